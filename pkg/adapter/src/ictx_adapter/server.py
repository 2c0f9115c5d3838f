"""Protocol server: /v1/generate and /v1/health around a caption backend.

Request and response bodies follow the generation wire protocol:

  POST /v1/generate
    {"shots": [{"image": {"id": str} | {"b64": str}, "caption": str}, ...],
     "test_image": {"id": str} | {"b64": str},
     "params": {"length_penalty": float, "max_tokens": int,
                "beam_size": int, "seed": int?}}
    -> {"caption": str, "model": str}
  GET /v1/health -> {"status": "ok", "model": str}
  Errors: {"error": {"code": str, "message": str}} with HTTP 4xx/5xx.

Requests are validated by hand (not by framework models) so malformed
bodies always produce the documented error payload shape.
"""

from __future__ import annotations

import base64
import binascii
import threading
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .prompt import PromptTemplate, render_prompt


class RequestError(ValueError):
    """Client-side protocol violation (maps to HTTP 400)."""


class ModelError(RuntimeError):
    """Backend failure: load, OOM, or generation error (maps to HTTP 500)."""


@dataclass(frozen=True)
class AdapterConfig:
    model: str = "mock/echo-last"
    device: str = "cpu"
    image_root: str | None = None
    port: int = 8080
    template: PromptTemplate = field(default_factory=PromptTemplate)

    def __post_init__(self):
        if not 0 < self.port < 65536:
            raise ValueError(f"port out of range: {self.port}")


@dataclass(frozen=True)
class ParsedRequest:
    shots: list[tuple[str, str]]  # (image key, caption)
    images: list[bytes | None]  # payload per shot, test image last
    test_image: str
    length_penalty: float
    max_tokens: int
    beam_size: int
    seed: int | None


def _image_ref(ref, config: AdapterConfig) -> tuple[str, bytes | None]:
    """Resolve one image reference to (key, payload bytes or None)."""
    if not isinstance(ref, dict):
        raise RequestError("image ref must be an object")
    if "b64" in ref:
        try:
            return f"b64:{hash(ref['b64'])}", base64.b64decode(
                ref["b64"], validate=True)
        except (binascii.Error, TypeError) as exc:
            raise RequestError(f"invalid base64 image payload: {exc}") from exc
    if "id" in ref:
        if not isinstance(ref["id"], str) or not ref["id"]:
            raise RequestError("image id must be a non-empty string")
        if config.image_root is None:
            raise RequestError(
                "id-mode image refs require the server to run with an "
                "image root (set ICTX_IMAGE_ROOT)")
        path = Path(config.image_root) / ref["id"]
        if not path.is_file():
            raise RequestError(f"image {ref['id']!r} not found under image root")
        return ref["id"], path.read_bytes()
    raise RequestError("image ref needs 'id' or 'b64'")


def parse_request(body, config: AdapterConfig, *,
                  resolve_images: bool = True) -> ParsedRequest:
    if not isinstance(body, dict):
        raise RequestError("request body must be a JSON object")
    for key in ("shots", "test_image", "params"):
        if key not in body:
            raise RequestError(f"missing required field {key!r}")
    if not isinstance(body["shots"], list):
        raise RequestError("'shots' must be an array")
    shots, images = [], []
    for i, shot in enumerate(body["shots"]):
        if not isinstance(shot, dict) or "image" not in shot or "caption" not in shot:
            raise RequestError(f"shot {i} needs 'image' and 'caption'")
        if not isinstance(shot["caption"], str) or not shot["caption"]:
            raise RequestError(f"shot {i} caption must be a non-empty string")
        if resolve_images:
            key, payload = _image_ref(shot["image"], config)
        else:
            key, payload = _image_key_only(shot["image"]), None
        shots.append((key, shot["caption"]))
        images.append(payload)
    if resolve_images:
        test_key, test_payload = _image_ref(body["test_image"], config)
    else:
        test_key, test_payload = _image_key_only(body["test_image"]), None
    images.append(test_payload)
    p = body["params"]
    if not isinstance(p, dict):
        raise RequestError("'params' must be an object")
    try:
        length_penalty = float(p["length_penalty"])
        max_tokens = int(p["max_tokens"])
        beam_size = int(p["beam_size"])
    except (KeyError, TypeError, ValueError) as exc:
        raise RequestError(f"malformed decoding params: {exc}") from exc
    if max_tokens < 1 or beam_size < 1:
        raise RequestError("max_tokens and beam_size must be >= 1")
    seed = p.get("seed")
    if seed is not None and not isinstance(seed, int):
        raise RequestError("seed must be an integer")
    return ParsedRequest(shots=shots, images=images, test_image=test_key,
                         length_penalty=length_penalty, max_tokens=max_tokens,
                         beam_size=beam_size, seed=seed)


def _image_key_only(ref) -> str:
    if not isinstance(ref, dict):
        raise RequestError("image ref must be an object")
    if "b64" in ref:
        return f"b64:{hash(ref['b64'])}"
    if "id" in ref:
        if not isinstance(ref["id"], str) or not ref["id"]:
            raise RequestError("image id must be a non-empty string")
        return ref["id"]
    raise RequestError("image ref needs 'id' or 'b64'")


def echo_last_backend(request: ParsedRequest, config: AdapterConfig) -> str:
    """Deterministic mock: the last shot's caption."""
    if not request.shots:
        raise RequestError("echo-last needs at least one shot")
    return request.shots[-1][1]


def load_model_backend(config: AdapterConfig):
    """Hook for a real interleaved captioning model.

    Loads the model named in the config and returns a callable with the
    same signature as echo_last_backend. Decoding params map directly onto
    beam search arguments (length_penalty, max_new_tokens, num_beams); the
    rendered prompt comes from render_prompt and images interleave at each
    image-token position.
    """
    raise ModelError(
        f"no loader available for model {config.model!r}; this build hosts "
        "the mock backend only (run serve-mock), or plug a loader in here")


def build_app(config: AdapterConfig, backend, *,
              resolve_images: bool = True) -> FastAPI:
    app = FastAPI()
    lock = threading.Lock()  # one request in flight per model instance

    def error(status: int, code: str, message: str) -> JSONResponse:
        return JSONResponse(status_code=status,
                            content={"error": {"code": code, "message": message}})

    @app.get("/v1/health")
    async def health():
        return {"status": "ok", "model": config.model}

    @app.post("/v1/generate")
    async def generate(request: Request):
        try:
            body = await request.json()
        except Exception:
            return error(400, "bad_request", "body is not valid JSON")
        try:
            parsed = parse_request(body, config, resolve_images=resolve_images)
            with lock:
                caption = backend(parsed, config)
        except RequestError as exc:
            return error(400, "bad_request", str(exc))
        except ModelError as exc:
            return error(500, "backend", str(exc))
        return {"caption": caption, "model": config.model}

    return app


def serve_mock(config: AdapterConfig) -> FastAPI:
    """App with echo-last behavior; byte-compatible with serve()."""
    return build_app(config, echo_last_backend, resolve_images=False)


def serve(config: AdapterConfig) -> FastAPI:
    """App around a real model; requires a loadable backend."""
    backend = load_model_backend(config)
    return build_app(config, backend)
