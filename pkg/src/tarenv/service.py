"""HTTP environment service.

Exposes episode sessions over a small JSON API (versioned under /v1) so
external trainers can drive the two-round loop remotely: create an
episode, post agent turns, fetch the transcript, and score trajectories
with the same reward code the CLI uses.  Sessions live in memory with a
TTL; each session serializes its steps (a second in-flight step gets
409) and expired or unknown ids get 404.
"""

from __future__ import annotations

import base64
import binascii
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, Field

from . import __version__
from .config import AppConfig
from .episode import (
    Episode,
    EpisodeConfig,
    EpisodeStateError,
    create,
    decode_image,
    image_to_png_bytes,
    override_annotation,
    step,
)
from .protocol import ActionFormat
from .rewards import TrajectoryError, score_trajectory

API_PREFIX = "/v1"


class ServiceError(Exception):
    def __init__(self, status_code: int, message: str):
        self.status_code = status_code
        self.message = message
        super().__init__(message)


class UnknownSessionError(ServiceError):
    def __init__(self, episode_id: str):
        super().__init__(404, f"unknown or expired episode: {episode_id}")


class SessionBusyError(ServiceError):
    def __init__(self, episode_id: str):
        super().__init__(409, f"a step is already in flight for episode {episode_id}")


@dataclass
class ServiceSession:
    episode_id: str
    episode: Episode
    created_at: float
    ttl_s: float
    from_path: bool = False
    step_lock: threading.Lock = field(default_factory=threading.Lock)

    def expired(self, now: float) -> bool:
        return now - self.created_at > self.ttl_s


class SessionStore:
    """Thread-safe in-memory session table with TTL eviction on access."""

    def __init__(self, ttl_s: float = 600.0, clock: Callable[[], float] = time.monotonic):
        self.ttl_s = ttl_s
        self.clock = clock
        self._sessions: dict[str, ServiceSession] = {}
        self._table_lock = threading.Lock()

    def add(self, episode: Episode, *, from_path: bool = False) -> ServiceSession:
        session = ServiceSession(
            episode_id=episode.id,
            episode=episode,
            created_at=self.clock(),
            ttl_s=self.ttl_s,
            from_path=from_path,
        )
        with self._table_lock:
            if episode.id in self._sessions:
                raise ServiceError(409, f"episode id already exists: {episode.id}")
            self._sessions[episode.id] = session
        return session

    def get(self, episode_id: str) -> ServiceSession:
        now = self.clock()
        with self._table_lock:
            session = self._sessions.get(episode_id)
            if session is not None and session.expired(now):
                del self._sessions[episode_id]
                session = None
        if session is None:
            raise UnknownSessionError(episode_id)
        return session

    def delete(self, episode_id: str) -> None:
        with self._table_lock:
            session = self._sessions.pop(episode_id, None)
        if session is None or session.expired(self.clock()):
            raise UnknownSessionError(episode_id)

    def purge_expired(self) -> int:
        now = self.clock()
        with self._table_lock:
            stale = [k for k, s in self._sessions.items() if s.expired(now)]
            for k in stale:
                del self._sessions[k]
        return len(stale)

    def __len__(self) -> int:
        return len(self._sessions)


class EpisodeCreateRequest(BaseModel):
    image_b64: str | None = None
    image_path: str | None = None
    question: str
    options: list[tuple[str, str]] = Field(min_length=1)
    format: str | None = None
    ground_truth: str | None = None
    annotation_override_b64: str | None = None
    annotation_override_path: str | None = None
    episode_id: str | None = None


class StepRequest(BaseModel):
    agent_text: str


class RewardRequest(BaseModel):
    trajectory: list[str] = Field(min_length=1)
    ground_truth: str
    format: str = ActionFormat.EXPLICIT.value


def _decode_b64_image(data: str, field_name: str) -> Image.Image:
    try:
        raw = base64.b64decode(data, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ServiceError(400, f"{field_name}: invalid base64: {exc}") from exc
    try:
        return decode_image(raw)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ServiceError(400, f"{field_name}: undecodable image: {exc}") from exc


def _load_image(b64: str | None, path: str | None, field_prefix: str) -> tuple[Image.Image, bool]:
    if (b64 is None) == (path is None):
        raise ServiceError(400, f"exactly one of {field_prefix}_b64 / {field_prefix}_path required")
    if b64 is not None:
        return _decode_b64_image(b64, f"{field_prefix}_b64"), False
    try:
        return decode_image(path), True
    except (FileNotFoundError, UnidentifiedImageError, OSError, ValueError) as exc:
        raise ServiceError(400, f"{field_prefix}_path: cannot load image: {exc}") from exc


def _parse_format(value: str | None, default: ActionFormat) -> ActionFormat:
    if value is None:
        return default
    try:
        return ActionFormat(value)
    except ValueError as exc:
        raise ServiceError(400, f"format: must be one of "
                                f"{[f.value for f in ActionFormat]}, got {value!r}") from exc


def _b64_png(image: Image.Image | None) -> str | None:
    if image is None:
        return None
    return base64.b64encode(image_to_png_bytes(image)).decode("ascii")


def create_app(config: AppConfig | None = None,
               clock: Callable[[], float] = time.monotonic) -> FastAPI:
    """Build the FastAPI application around one shared session store."""
    config = config or AppConfig()
    store = SessionStore(ttl_s=config.ttl_s, clock=clock)
    app = FastAPI(title="tarenv environment service", version=__version__)
    app.state.store = store
    app.state.config = config

    @app.exception_handler(ServiceError)
    async def service_error_handler(request: Request, exc: ServiceError):
        return JSONResponse(status_code=exc.status_code, content={"error": exc.message})

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        fields = [
            {"field": ".".join(str(p) for p in err["loc"] if p != "body"), "message": err["msg"]}
            for err in exc.errors()
        ]
        return JSONResponse(status_code=400,
                            content={"error": "request validation failed", "fields": fields})

    @app.get(f"{API_PREFIX}/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post(f"{API_PREFIX}/episodes", status_code=201)
    def create_episode(body: EpisodeCreateRequest):
        store.purge_expired()
        image, from_path = _load_image(body.image_b64, body.image_path, "image")
        fmt = _parse_format(body.format, config.format)
        episode_config = EpisodeConfig(
            format=fmt,
            feedback_template=config.feedback_template,
            mark_style=config.mark_style,
            system_prompt_override=config.system_prompt,
        )
        try:
            episode = create(
                image, body.question, body.options, episode_config,
                ground_truth=body.ground_truth, episode_id=body.episode_id,
            )
        except ValueError as exc:
            raise ServiceError(400, f"options: {exc}") from exc
        if body.annotation_override_b64 is not None or body.annotation_override_path is not None:
            override, _ = _load_image(
                body.annotation_override_b64, body.annotation_override_path,
                "annotation_override",
            )
            override_annotation(episode, override)
        session = store.add(episode, from_path=from_path)
        return {"episode_id": session.episode_id}

    @app.post(f"{API_PREFIX}/episodes/{{episode_id}}/step")
    def step_episode(episode_id: str, body: StepRequest):
        session = store.get(episode_id)
        if not session.step_lock.acquire(blocking=False):
            raise SessionBusyError(episode_id)
        try:
            if session.episode.done:
                raise ServiceError(409, f"episode {episode_id} is already finished")
            try:
                response = step(session.episode, body.agent_text)
            except EpisodeStateError as exc:
                raise ServiceError(409, str(exc)) from exc
        finally:
            session.step_lock.release()
        payload = {
            "episode_id": episode_id,
            "state": session.episode.state.value,
            "feedback": response.feedback,
            "done": response.done,
            "final_answer": response.final_answer,
            "parse_ok": response.parse_ok,
            "updated_image_b64": _b64_png(response.updated_image),
        }
        if response.updated_image is not None and session.from_path and config.workdir:
            os.makedirs(config.workdir, exist_ok=True)
            out = os.path.join(config.workdir, f"{episode_id}_marked.png")
            response.updated_image.save(out, format="PNG")
            payload["updated_image_path"] = out
        return payload

    @app.get(f"{API_PREFIX}/episodes/{{episode_id}}")
    def get_episode(episode_id: str):
        session = store.get(episode_id)
        episode = session.episode
        return {
            "episode_id": episode_id,
            "state": episode.state.value,
            "done": episode.done,
            "final_answer": episode.final_answer,
            "format": episode.format.value,
            "question": episode.question,
            "options": [[letter, text] for letter, text in episode.options],
            "transcript": episode.transcript.to_dicts(),
        }

    @app.delete(f"{API_PREFIX}/episodes/{{episode_id}}", status_code=204)
    def delete_episode(episode_id: str):
        store.delete(episode_id)
        return Response(status_code=204)

    @app.post(f"{API_PREFIX}/reward")
    def reward(body: RewardRequest):
        fmt = _parse_format(body.format, config.format)
        try:
            breakdown = score_trajectory(body.trajectory, body.ground_truth, fmt)
        except (TrajectoryError, ValueError) as exc:
            raise ServiceError(400, str(exc)) from exc
        return breakdown.to_dict()

    return app
