"""tarenv: a two-round visual reasoning environment.

The agent looks at an image and a multiple-choice question, reasons,
optionally marks image regions, reasons again over the annotated image,
and terminates with an answer letter.  This package provides the
environment state machine, the action wire formats, rule-based rewards,
detection-to-VQA dataset tooling, an evaluation harness, a chat-backend
client, and CLI/HTTP surfaces.
"""

__version__ = "0.1.0"

from .config import AppConfig, BackendConfig, ConfigError, MarkStyle, load_config
from .episode import (
    EnvResponse,
    Episode,
    EpisodeConfig,
    EpisodeState,
    EpisodeStateError,
    apply_mark,
    create,
    decode_image,
    format_feedback,
    override_annotation,
    step,
)
from .geometry import (
    Annotation,
    BoundingBox,
    DetectionRecord,
    GeometryError,
    ImageDims,
    Side,
    center,
    center_point,
    clamp,
    contains,
    iou,
    side_of,
)
from .prompts import (
    ChatMessage,
    ImagePart,
    InferenceProtocol,
    TextPart,
    format_options,
    system_prompt,
    user_round1,
    user_round1_text,
)
from .protocol import (
    ActionFormat,
    AgentMessage,
    Mark,
    ParseError,
    ParseErrorKind,
    Terminate,
    extract_tag_answer,
    parse,
    parse_explicit,
    parse_implicit,
    render,
)
from .rewards import (
    RewardBreakdown,
    TrajectoryError,
    normalize_letter,
    score_accuracy,
    score_final_format,
    score_round1_format,
    score_trajectory,
)

__all__ = [
    "__version__",
    "AppConfig",
    "BackendConfig",
    "ConfigError",
    "MarkStyle",
    "load_config",
    "EnvResponse",
    "Episode",
    "EpisodeConfig",
    "EpisodeState",
    "EpisodeStateError",
    "apply_mark",
    "create",
    "decode_image",
    "format_feedback",
    "override_annotation",
    "step",
    "Annotation",
    "BoundingBox",
    "DetectionRecord",
    "GeometryError",
    "ImageDims",
    "Side",
    "center",
    "center_point",
    "clamp",
    "contains",
    "iou",
    "side_of",
    "ChatMessage",
    "ImagePart",
    "InferenceProtocol",
    "TextPart",
    "format_options",
    "system_prompt",
    "user_round1",
    "user_round1_text",
    "ActionFormat",
    "AgentMessage",
    "Mark",
    "ParseError",
    "ParseErrorKind",
    "Terminate",
    "extract_tag_answer",
    "parse",
    "parse_explicit",
    "parse_implicit",
    "render",
    "RewardBreakdown",
    "TrajectoryError",
    "normalize_letter",
    "score_accuracy",
    "score_final_format",
    "score_round1_format",
    "score_trajectory",
]
