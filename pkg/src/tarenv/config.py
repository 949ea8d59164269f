"""Runtime configuration with precedence: defaults < config file < env vars < flags."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from .protocol import ActionFormat

ENV_ENDPOINT = "TARENV_ENDPOINT"
ENV_API_KEY = "TARENV_API_KEY"
ENV_MODEL = "TARENV_MODEL"
ENV_CONFIG = "TARENV_CONFIG"

DEFAULT_FEEDBACK_TEMPLATE = (
    "Marked {n} region(s) at {boxes}. Continue reasoning over the annotated image "
    "and answer the question."
)


class ConfigError(ValueError):
    """Raised for unreadable or malformed configuration files."""


@dataclass(frozen=True)
class MarkStyle:
    """Rectangle outline style: RGB color, no fill, stroke width
    max(min_width, round(relative_width * min(image dims)))."""

    color: tuple[int, int, int] = (255, 0, 0)
    min_width: int = 2
    relative_width: float = 0.004

    def stroke_width(self, width: int, height: int) -> int:
        return max(self.min_width, int(round(self.relative_width * min(width, height))))


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str | None = None
    api_key: str | None = None
    model: str | None = None
    max_in_flight: int = 4
    timeout_s: float = 60.0


@dataclass(frozen=True)
class AppConfig:
    system_prompt: str | None = None  # None selects the built-in prompt
    feedback_template: str = DEFAULT_FEEDBACK_TEMPLATE
    mark_style: MarkStyle = field(default_factory=MarkStyle)
    format: ActionFormat = ActionFormat.EXPLICIT
    backend: BackendConfig = field(default_factory=BackendConfig)
    parallelism: int = 1
    seed: int = 0
    ttl_s: float = 600.0
    workdir: str | None = None


def _mark_style_from_dict(data: Mapping[str, Any]) -> MarkStyle:
    style = MarkStyle()
    if "color" in data:
        color = data["color"]
        if not (isinstance(color, list) and len(color) == 3):
            raise ConfigError(f"mark_style.color must be [r, g, b], got {color!r}")
        style = replace(style, color=tuple(int(c) for c in color))
    if "min_width" in data:
        style = replace(style, min_width=int(data["min_width"]))
    if "relative_width" in data:
        style = replace(style, relative_width=float(data["relative_width"]))
    return style


def _apply_dict(config: AppConfig, data: Mapping[str, Any]) -> AppConfig:
    known = {
        "system_prompt", "feedback_template", "mark_style", "format",
        "backend", "parallelism", "seed", "ttl_s", "workdir",
    }
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "system_prompt" in data:
        config = replace(config, system_prompt=data["system_prompt"])
    if "feedback_template" in data:
        config = replace(config, feedback_template=str(data["feedback_template"]))
    if "mark_style" in data:
        config = replace(config, mark_style=_mark_style_from_dict(data["mark_style"]))
    if "format" in data:
        try:
            config = replace(config, format=ActionFormat(data["format"]))
        except ValueError as exc:
            raise ConfigError(f"unknown format {data['format']!r}") from exc
    if "backend" in data:
        backend = config.backend
        b = data["backend"]
        for key in ("endpoint", "api_key", "model"):
            if key in b:
                backend = replace(backend, **{key: b[key]})
        if "max_in_flight" in b:
            backend = replace(backend, max_in_flight=int(b["max_in_flight"]))
        if "timeout_s" in b:
            backend = replace(backend, timeout_s=float(b["timeout_s"]))
        config = replace(config, backend=backend)
    if "parallelism" in data:
        config = replace(config, parallelism=int(data["parallelism"]))
    if "seed" in data:
        config = replace(config, seed=int(data["seed"]))
    if "ttl_s" in data:
        config = replace(config, ttl_s=float(data["ttl_s"]))
    if "workdir" in data:
        config = replace(config, workdir=data["workdir"])
    return config


def load_config(
    path: str | Path | None = None,
    env: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> AppConfig:
    """Build an AppConfig from an optional JSON file, environment variables,
    and explicit overrides, later sources winning."""
    env = os.environ if env is None else env
    config = AppConfig()
    if path is None and env.get(ENV_CONFIG):
        path = env[ENV_CONFIG]
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        config = _apply_dict(config, data)
    backend = config.backend
    if env.get(ENV_ENDPOINT):
        backend = replace(backend, endpoint=env[ENV_ENDPOINT])
    if env.get(ENV_API_KEY):
        backend = replace(backend, api_key=env[ENV_API_KEY])
    if env.get(ENV_MODEL):
        backend = replace(backend, model=env[ENV_MODEL])
    config = replace(config, backend=backend)
    if overrides:
        config = _apply_dict(config, overrides)
    return config
