"""Chat-completion backends: a deterministic scripted mock, a ground-truth
oracle for end-to-end checks, and a remote client speaking the de-facto
chat-completions wire protocol with inline base64 images.
"""

from __future__ import annotations

import base64
import hashlib
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import httpx
from PIL import Image

from .episode import decode_image, image_to_png_bytes
from .geometry import BoundingBox
from .prompts import ChatMessage, ImagePart, InferenceProtocol, TextPart, user_round1_text
from .protocol import ActionFormat, AgentMessage, Mark, Terminate, render


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.1
    max_tokens: int = 2048

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class Completion:
    text: str
    prompt_tokens: int | None = None
    completion_tokens: int | None = None


class ModelBackend(Protocol):
    deterministic: bool

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams | None = None) -> Completion:
        ...


class BackendError(RuntimeError):
    """Base class for backend failures."""


class TransportFailure(BackendError):
    """Network-level failure after exhausting retries."""


class BackendStatusError(BackendError):
    """Non-2xx HTTP response after exhausting retries."""

    def __init__(self, status_code: int, body: str):
        self.status_code = status_code
        super().__init__(f"backend returned status {status_code}: {body[:200]}")


class MalformedResponseError(BackendError):
    """2xx response that does not carry a completion."""


class ScriptExhaustedError(BackendError):
    """The scripted mock ran out of replies."""


class ScriptedBackend:
    """Replays a fixed list of responses in order; thread-safe."""

    deterministic = True

    def __init__(self, script: Iterable[str]):
        self._script = list(script)
        if not self._script:
            raise ValueError("script must be non-empty")
        self._index = 0
        self._lock = threading.Lock()

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams | None = None) -> Completion:
        with self._lock:
            if self._index >= len(self._script):
                raise ScriptExhaustedError(f"script of {len(self._script)} replies exhausted")
            text = self._script[self._index]
            self._index += 1
        return Completion(text=text)


def _image_fingerprint(image: Image.Image) -> str:
    digest = hashlib.sha1()
    digest.update(image.mode.encode())
    digest.update(f"{image.width}x{image.height}".encode())
    digest.update(image.tobytes())
    return digest.hexdigest()


class OracleBackend:
    """Answers from ground truth: round 1 marks the sample's boxes, round 2
    terminates with the correct letter.

    Samples are keyed by their round-1 user text plus (when available) a
    fingerprint of the round-1 image, so identically worded questions on
    different images stay distinct and the backend can serve many
    interleaved episodes.  The round is inferred from the number of
    assistant messages in the conversation.  Samples without a
    ground-truth box mark a centered fallback region (marking never
    affects scoring).
    """

    deterministic = True

    def __init__(self, fmt: ActionFormat = ActionFormat.EXPLICIT):
        self.fmt = fmt
        self._by_prompt: dict[tuple[str, str | None], tuple[tuple[BoundingBox, ...], str]] = {}
        self._lock = threading.Lock()

    def register(
        self,
        question: str,
        options: Sequence[tuple[str, str]],
        answer: str,
        boxes: Sequence[BoundingBox],
        dims: tuple[int, int],
        image: Image.Image | None = None,
    ) -> None:
        text = user_round1_text(question, options, InferenceProtocol.TAR)
        key = (text, _image_fingerprint(image) if image is not None else None)
        if not boxes:
            w, h = dims
            boxes = [BoundingBox(w // 4, h // 4, max(w // 4 + 1, (3 * w) // 4), max(h // 4 + 1, (3 * h) // 4))]
        with self._lock:
            existing = self._by_prompt.get(key)
            if existing is not None and existing != (tuple(boxes), answer):
                raise ValueError(
                    f"conflicting oracle registration for prompt {text[:80]!r}; "
                    "register with images to disambiguate"
                )
            self._by_prompt[key] = (tuple(boxes), answer)

    @classmethod
    def from_samples(cls, samples: Iterable, fmt: ActionFormat = ActionFormat.EXPLICIT) -> "OracleBackend":
        """Build from VqaSample-like objects (question/options/answer/
        provenance.gt_boxes/dims attributes).  Sample images are loaded
        for keying when their files exist."""
        backend = cls(fmt)
        for s in samples:
            image = None
            try:
                image = decode_image(s.image_path)
            except (OSError, ValueError):
                pass
            backend.register(
                s.question, s.options, s.answer, s.provenance.gt_boxes,
                (s.dims.width, s.dims.height), image=image,
            )
        return backend

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams | None = None) -> Completion:
        first_user = next((m for m in messages if m.role == "user"), None)
        if first_user is None:
            raise LookupError("oracle received a conversation with no user message")
        text = first_user.text
        raster = next(
            (p.image for p in first_user.parts
             if isinstance(p, ImagePart) and isinstance(p.image, Image.Image)),
            None,
        )
        keys = [(text, None)] if raster is None else [
            (text, _image_fingerprint(raster)), (text, None),
        ]
        entry = None
        with self._lock:
            for key in keys:
                entry = self._by_prompt.get(key)
                if entry is not None:
                    break
        if entry is None:
            raise LookupError(f"oracle has no sample for prompt: {text[:120]!r}")
        boxes, answer = entry
        assistant_turns = sum(1 for m in messages if m.role == "assistant")
        if assistant_turns == 0:
            message = AgentMessage(
                thought="I will mark the region of interest and take a closer look.",
                actions=(Mark(boxes),),
            )
        else:
            message = AgentMessage(
                thought="The marked region confirms the finding.",
                actions=(Terminate(answer),),
            )
        return Completion(text=render(message, self.fmt))


def encode_image_part(part: ImagePart) -> str:
    """PNG base64 data URL for an image part (raster, path, or bytes)."""
    image = part.image
    if isinstance(image, Image.Image):
        raw = image_to_png_bytes(image)
    elif isinstance(image, bytes):
        raw = image
    elif isinstance(image, (str, Path)) and Path(str(image)).is_file():
        raw = Path(str(image)).read_bytes()
    else:
        raise ValueError(f"image part {image!r} is not a raster, bytes, or readable path")
    return "data:image/png;base64," + base64.b64encode(raw).decode("ascii")


def encode_messages(messages: Sequence[ChatMessage]) -> list[dict]:
    """Wire-format messages: plain string content for text-only messages,
    typed part lists when images are attached."""
    encoded = []
    for message in messages:
        if all(isinstance(p, TextPart) for p in message.parts):
            encoded.append({"role": message.role, "content": message.text})
            continue
        content: list[dict] = []
        for p in message.parts:
            if isinstance(p, TextPart):
                content.append({"type": "text", "text": p.text})
            else:
                content.append({"type": "image_url", "image_url": {"url": encode_image_part(p)}})
        encoded.append({"role": message.role, "content": content})
    return encoded


class RemoteChatBackend:
    """POSTs to ``{endpoint}/chat/completions`` with retries and a
    max-in-flight limit; images travel inline as base64 data URLs."""

    deterministic = False

    def __init__(
        self,
        endpoint_url: str,
        api_key: str | None = None,
        model_name: str | None = None,
        *,
        max_in_flight: int = 4,
        timeout_s: float = 60.0,
        attempts: int = 3,
        backoff_s: float = 0.5,
        transport: httpx.BaseTransport | None = None,
    ):
        self.model_name = model_name
        self._attempts = attempts
        self._backoff_s = backoff_s
        self._semaphore = threading.Semaphore(max_in_flight)
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(
            base_url=endpoint_url.rstrip("/"),
            headers=headers,
            timeout=timeout_s,
            transport=transport,
        )

    def close(self) -> None:
        self._client.close()

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams | None = None) -> Completion:
        params = params or GenerationParams()
        body = {
            "model": self.model_name,
            "messages": encode_messages(messages),
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        last_error: BackendError | None = None
        for attempt in range(self._attempts):
            if attempt:
                time.sleep(self._backoff_s * 2 ** (attempt - 1))
            with self._semaphore:
                try:
                    response = self._client.post("/chat/completions", json=body)
                except httpx.HTTPError as exc:
                    last_error = TransportFailure(f"transport error: {exc}")
                    continue
            if not (200 <= response.status_code < 300):
                last_error = BackendStatusError(response.status_code, response.text)
                continue
            try:
                data = response.json()
                text = data["choices"][0]["message"]["content"]
                if not isinstance(text, str):
                    raise TypeError("content is not a string")
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                last_error = MalformedResponseError(f"cannot read completion from response: {exc}")
                continue
            usage = data.get("usage") or {}
            return Completion(
                text=text,
                prompt_tokens=usage.get("prompt_tokens"),
                completion_tokens=usage.get("completion_tokens"),
            )
        assert last_error is not None
        raise last_error
