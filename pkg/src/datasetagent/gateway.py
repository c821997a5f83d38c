"""Uniform access to the external model services, plus deterministic offline mocks.

Four services are used: a text model (demand parsing, failure diagnosis), a
multimodal analyzer (per-image analysis documents), a grounder (boxes) and a
segmenter (masks). Each is reached through a :class:`ModelHandle` whose
transport is either HTTP or a mock that replays fixture sidecars.

Wire format (HTTP and sidecars share the reply shapes)::

    request:  {"model", "task": complete|analyze|ground|segment,
               "prompt"?, "prompts"?, "image"?: {"id", "width", "height", "png_base64"}}
    complete -> {"text": str}
    analyze  -> {"analysis": {...}}
    ground   -> {"detections": [{"class", "box": [x1,y1,x2,y2], "confidence"}]}
    segment  -> {"masks": [{"class", "instance_id", "confidence", "rle": {"size", "counts"}}]}
"""

from __future__ import annotations

import base64
import enum
import hashlib
import json
import logging
import os
import socket
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

import numpy as np

from .annotation import Detection, GroundingResult, InstanceMask, SegmentationResult
from .errors import BackendTimeout, BackendUnavailable, DimensionMismatch
from .formats import encode_png, rle_decode
from .geometry import NormalizedBox, iou

log = logging.getLogger(__name__)

ENV_ENDPOINTS = {
    "text": "DATASETAGENT_TEXT_ENDPOINT",
    "multimodal": "DATASETAGENT_MM_ENDPOINT",
    "grounding": "DATASETAGENT_GROUND_ENDPOINT",
    "segmentation": "DATASETAGENT_SEG_ENDPOINT",
}
ENV_API_KEY = "DATASETAGENT_API_KEY"


class ModelKind(str, enum.Enum):
    TEXT = "text"
    MULTIMODAL = "multimodal"
    GROUNDING = "grounding"
    SEGMENTATION = "segmentation"


@dataclass(frozen=True)
class PromptSpec:
    """A text, point or box prompt for the grounder/segmenter."""

    kind: str
    payload: Any

    def __post_init__(self):
        if self.kind == "text":
            if not isinstance(self.payload, str) or not self.payload.strip():
                raise ValueError("text prompt needs a non-empty string")
        elif self.kind == "point":
            x, y = self.payload
            if not (0 <= x <= 1 and 0 <= y <= 1):
                raise ValueError(f"point {self.payload} outside [0, 1]")
        elif self.kind == "box":
            if not isinstance(self.payload, NormalizedBox):
                object.__setattr__(self, "payload", NormalizedBox.from_seq(self.payload))
        else:
            raise ValueError(f"unknown prompt kind {self.kind!r}")

    def to_json(self) -> dict:
        payload = self.payload.as_list() if isinstance(self.payload, NormalizedBox) else self.payload
        if isinstance(payload, tuple):
            payload = list(payload)
        return {"kind": self.kind, "payload": payload}


@dataclass(frozen=True)
class GatewayRequest:
    task: str
    prompt: str | None = None
    prompts: tuple[PromptSpec, ...] = ()
    image: Any = None


class Transport(Protocol):
    def call(self, handle: "ModelHandle", request: GatewayRequest) -> Mapping: ...


@dataclass(frozen=True)
class ModelHandle:
    kind: ModelKind
    endpoint: str
    transport: Transport
    model: str = ""
    timeout_ms: int = 30_000
    max_retries: int = 2
    backoff_s: float = 0.5

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("retries must be non-negative")


TextModelHandle = ModelHandle


def _call_with_retries(handle: ModelHandle, request: GatewayRequest) -> Mapping:
    attempts = handle.max_retries + 1
    last: BackendUnavailable | None = None
    for attempt in range(attempts):
        try:
            return handle.transport.call(handle, request)
        except BackendUnavailable as exc:
            last = exc
            log.warning("%s backend attempt %d/%d failed: %s", handle.kind.value, attempt + 1, attempts, exc)
            if attempt + 1 < attempts and handle.backoff_s > 0:
                time.sleep(handle.backoff_s * 2**attempt)
    assert last is not None
    raise last


def complete_text(handle: ModelHandle, prompt: str) -> str:
    reply = _call_with_retries(handle, GatewayRequest("complete", prompt=prompt))
    return str(reply.get("text", ""))


def analyze_multimodal(handle: ModelHandle, image, prompt: str) -> Any:
    """Raw analysis document; validating it is the caller's job."""
    reply = _call_with_retries(handle, GatewayRequest("analyze", prompt=prompt, image=image))
    return reply.get("analysis")


def _parse_detection(raw: Mapping) -> Detection:
    return Detection(str(raw["class"]), NormalizedBox.from_seq(raw["box"]), float(raw["confidence"]))


def ground(handle: ModelHandle, image, prompts: Sequence[PromptSpec]) -> GroundingResult:
    """Detections in descending confidence order; no filtering is applied."""
    if not prompts:
        raise ValueError("grounding needs at least one prompt")
    reply = _call_with_retries(handle, GatewayRequest("ground", prompts=tuple(prompts), image=image))
    dets = [_parse_detection(d) for d in reply.get("detections", [])]
    dets.sort(key=lambda d: -d.confidence)
    return GroundingResult(dets)


def segment(handle: ModelHandle, image, prompts: Sequence[PromptSpec]) -> SegmentationResult:
    if not prompts:
        raise ValueError("segmentation needs at least one prompt")
    reply = _call_with_retries(handle, GatewayRequest("segment", prompts=tuple(prompts), image=image))
    h, w = image.pixels.shape[:2]
    masks = []
    for m in reply.get("masks", []):
        bitmask = rle_decode(m["rle"])
        if bitmask.shape != (h, w):
            raise DimensionMismatch(f"mask {bitmask.shape[::-1]} vs image {(w, h)}")
        masks.append(InstanceMask(str(m["class"]), int(m["instance_id"]), bitmask, float(m.get("confidence", 1.0))))
    masks.sort(key=lambda m: -m.confidence)
    return SegmentationResult(masks)


# ----------------------------------------------------------------- transports


class HttpTransport:
    """Single JSON request/response per call; bearer token from the environment."""

    def __init__(self, api_key_env: str = ENV_API_KEY):
        self.api_key_env = api_key_env

    def call(self, handle: ModelHandle, request: GatewayRequest) -> Mapping:
        body: dict[str, Any] = {"model": handle.model, "task": request.task}
        if request.prompt is not None:
            body["prompt"] = request.prompt
        if request.prompts:
            body["prompts"] = [p.to_json() for p in request.prompts]
        if request.image is not None:
            px = request.image.pixels
            body["image"] = {
                "id": request.image.id,
                "width": int(px.shape[1]),
                "height": int(px.shape[0]),
                "png_base64": base64.b64encode(encode_png(px)).decode("ascii"),
            }
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(
            handle.endpoint, data=json.dumps(body).encode(), headers=headers, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=handle.timeout_ms / 1000) as resp:
                return json.loads(resp.read().decode())
        except (socket.timeout, TimeoutError) as exc:
            raise BackendTimeout(f"{handle.endpoint}: timed out") from exc
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                raise BackendTimeout(f"{handle.endpoint}: timed out") from exc
            raise BackendUnavailable(f"{handle.endpoint}: {exc.reason}") from exc
        except (OSError, ValueError) as exc:
            raise BackendUnavailable(f"{handle.endpoint}: {exc}") from exc


def prompt_key(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def sidecar_path(image) -> Path:
    uri = str(image.origin_uri)
    if uri.startswith("file://"):
        uri = uri[len("file://") :]
    return Path(uri).with_suffix(".json")


def load_sidecar(image) -> dict:
    path = sidecar_path(image)
    if not path.is_file():
        return {}
    return json.loads(path.read_text())


def _text_tokens(prompts: Sequence[PromptSpec]) -> set[str]:
    tokens = set()
    for p in prompts:
        if p.kind == "text":
            for part in p.payload.replace(",", ".").split("."):
                if part.strip():
                    tokens.add(part.strip().casefold())
    return tokens


def _matches_prompt(cls: str, box: NormalizedBox, prompts: Sequence[PromptSpec]) -> str | None:
    """Which prompt kind selects this object, if any (text beats box beats point)."""
    if cls.casefold() in _text_tokens(prompts):
        return "text"
    for p in prompts:
        if p.kind == "box" and iou(box, p.payload) >= 0.5:
            return "box"
    for p in prompts:
        if p.kind == "point":
            x, y = p.payload
            if box.x1 <= x <= box.x2 and box.y1 <= y <= box.y2:
                return "point"
    return None


def _mask_box(rle: Mapping) -> NormalizedBox:
    mask = rle_decode(rle)
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    if not len(xs):
        return NormalizedBox(0.0, 0.0, 1.0, 1.0)
    return NormalizedBox(xs.min() / w, ys.min() / h, (xs.max() + 1) / w, (ys.max() + 1) / h)


@dataclass
class MockTransport:
    """Offline stand-in for every backend.

    Text replies come from ``replies`` (keyed by the SHA-256 of the prompt) or
    from ``fallback``. Vision replies are read from the JSON sidecar stored next
    to each fixture image, so results are a pure function of (fixture, prompt).
    A sidecar detection may carry ``box_prompt_confidence``, the score returned
    when it is re-queried with a box prompt.
    """

    replies: Mapping[str, str] = field(default_factory=dict)
    fallback: Callable[[str], str] | None = None

    def call(self, handle: ModelHandle, request: GatewayRequest) -> Mapping:
        if request.task == "complete":
            key = prompt_key(request.prompt or "")
            if key in self.replies:
                return {"text": self.replies[key]}
            if self.fallback is not None:
                return {"text": self.fallback(request.prompt or "")}
            raise BackendUnavailable(f"mock has no reply for prompt {key[:12]}")
        sidecar = load_sidecar(request.image)
        if request.task == "analyze":
            return {"analysis": sidecar.get("analysis", {})}
        if request.task == "ground":
            out = []
            for det in sidecar.get("detections", []):
                how = _matches_prompt(det["class"], NormalizedBox.from_seq(det["box"]), request.prompts)
                if how is None:
                    continue
                conf = det["confidence"]
                if how == "box":
                    conf = det.get("box_prompt_confidence", conf)
                out.append({"class": det["class"], "box": det["box"], "confidence": conf})
            return {"detections": out}
        if request.task == "segment":
            out = []
            for m in sidecar.get("masks", []):
                if _matches_prompt(m["class"], _mask_box(m["rle"]), request.prompts) is not None:
                    out.append(m)
            return {"masks": out}
        raise BackendUnavailable(f"mock cannot serve task {request.task!r}")


def load_replies(path: str | Path | None) -> dict[str, str]:
    """Canned text replies: a JSON object mapping prompt SHA-256 (or raw prompt) to reply."""
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text())
    return {k if len(k) == 64 and all(c in "0123456789abcdef" for c in k) else prompt_key(k): v for k, v in doc.items()}


@dataclass(frozen=True)
class Backends:
    text: ModelHandle
    multimodal: ModelHandle
    grounding: ModelHandle
    segmentation: ModelHandle


def make_backends(
    settings: Mapping[str, Mapping] | None = None,
    mock: bool = False,
    mock_transport: MockTransport | None = None,
) -> Backends:
    """Build the four handles from config sections ``[backends.<kind>]`` and the environment.

    Recognised keys per section: endpoint, model, timeout_ms, max_retries, backoff_s.
    Environment variables override config endpoints.
    """
    settings = settings or {}
    transport: Transport = (mock_transport or MockTransport()) if mock else HttpTransport()
    handles = {}
    for kind in ModelKind:
        conf = dict(settings.get(kind.value, {}))
        endpoint = os.environ.get(ENV_ENDPOINTS[kind.value]) or conf.get("endpoint") or ("mock://" + kind.value if mock else "")
        handles[kind.value] = ModelHandle(
            kind=kind,
            endpoint=endpoint,
            transport=transport,
            model=str(conf.get("model", "")),
            timeout_ms=int(conf.get("timeout_ms", 30_000)),
            max_retries=int(conf.get("max_retries", 2)),
            backoff_s=float(conf.get("backoff_s", 0.0 if mock else 0.5)),
        )
    return Backends(**handles)
