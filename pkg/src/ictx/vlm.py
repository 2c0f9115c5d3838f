"""Generation contract: a protocol client for external captioning models
plus in-process deterministic stubs for GPU-free runs.

Wire protocol:
  POST /v1/generate
    {"shots": [{"image": {"id": str} | {"b64": str}, "caption": str}, ...],
     "test_image": {"id": str} | {"b64": str},
     "params": {"length_penalty": float, "max_tokens": int,
                "beam_size": int, "seed": int?}}
    -> {"caption": str, "model": str}
  GET /v1/health -> {"status": "ok", "model": str}
  Errors: {"error": {"code": str, "message": str}} with HTTP 4xx/5xx.

ICTX_VLM_ENDPOINT overrides any configured endpoint.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .assign import InContextSequence
from .corpus import EmbeddingStore, TagSet

ENDPOINT_ENV = "ICTX_VLM_ENDPOINT"
STUB_MODES = ("copy-nearest", "echo-last", "tag-template")

MAX_ATTEMPTS = 3
BACKOFF_INITIAL_S = 0.25


class VlmError(Exception):
    """Base class for generation failures."""


class TransportError(VlmError):
    """Retryable: the endpoint could not be reached or timed out."""


class ProtocolError(VlmError):
    """Fatal: the peer violated the wire schema."""


class BackendError(VlmError):
    """The model reported an error payload."""


class BatchError(VlmError):
    """Some requests in a batch exhausted their retries."""

    def __init__(self, failed: dict[int, Exception], partial: list):
        self.failed = failed
        self.partial = partial
        idxs = ", ".join(str(i) for i in sorted(failed))
        super().__init__(f"batch failed at indices: {idxs}")


@dataclass(frozen=True)
class DecodingParams:
    length_penalty: float = -2.0
    max_tokens: int = 20
    beam_size: int = 3
    seed: int | None = None

    def __post_init__(self):
        if self.max_tokens < 1:
            raise VlmError("max_tokens must be >= 1")
        if self.beam_size < 1:
            raise VlmError("beam_size must be >= 1")

    def to_wire(self) -> dict:
        params = {"length_penalty": self.length_penalty,
                  "max_tokens": self.max_tokens,
                  "beam_size": self.beam_size}
        if self.seed is not None:
            params["seed"] = self.seed
        return params


@dataclass(frozen=True)
class GenerationRequest:
    sequence: InContextSequence
    params: DecodingParams = DecodingParams()
    image_b64: dict[str, str] | None = None  # optional inline payloads

    def _image_ref(self, image_id: str) -> dict:
        if self.image_b64 and image_id in self.image_b64:
            return {"b64": self.image_b64[image_id]}
        return {"id": image_id}

    def to_wire(self) -> dict:
        return {
            "shots": [{"image": self._image_ref(i), "caption": c}
                      for i, c in self.sequence.shots],
            "test_image": self._image_ref(self.sequence.test_image_id),
            "params": self.params.to_wire(),
        }

    @classmethod
    def from_wire(cls, body: dict) -> "GenerationRequest":
        def ref_id(ref: dict) -> str:
            if "id" in ref:
                return ref["id"]
            if "b64" in ref:
                return f"b64:{hash(ref['b64'])}"
            raise ProtocolError("image ref needs 'id' or 'b64'")

        try:
            shots = tuple((ref_id(s["image"]), s["caption"]) for s in body["shots"])
            test_id = ref_id(body["test_image"])
            p = body["params"]
            params = DecodingParams(
                length_penalty=float(p["length_penalty"]),
                max_tokens=int(p["max_tokens"]),
                beam_size=int(p["beam_size"]),
                seed=p.get("seed"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed generate request: {exc}") from exc
        seq = InContextSequence(shots=shots, test_image_id=test_id,
                                order_policy="as-retrieved")
        return cls(sequence=seq, params=params)


@dataclass(frozen=True)
class GenerationResponse:
    caption: str
    model: str
    latency_ms: float | None = None

    def __post_init__(self):
        if not self.caption:
            raise ProtocolError("empty caption in generation response")


def stub_generate(sequence: InContextSequence, mode: str, *,
                  images: EmbeddingStore | None = None,
                  tags: dict[str, TagSet] | None = None) -> str:
    """Deterministic caption stubs modelling short-cut behaviors.

    copy-nearest: caption of the shot whose image embedding has max
    cosine with the test image (ties: earliest shot).
    echo-last: the last shot's caption.
    tag-template: "a photo of " + up to 3 sorted test-image object tags.
    """
    if mode not in STUB_MODES:
        raise VlmError(f"unknown stub mode {mode!r}")
    if mode == "echo-last":
        if not sequence.shots:
            raise VlmError("echo-last requires at least one shot")
        return sequence.shots[-1][1]
    if mode == "tag-template":
        objects = []
        if tags is not None and sequence.test_image_id in tags:
            objects = sorted(tags[sequence.test_image_id].objects)[:3]
        if not objects:
            return "a photo of something"
        return "a photo of " + " and ".join(objects)
    # copy-nearest
    if images is None:
        raise VlmError("copy-nearest requires image embeddings")
    if not sequence.shots:
        raise VlmError("copy-nearest requires at least one shot")
    test_vec = images.row(sequence.test_image_id).astype(np.float64)
    tn = np.linalg.norm(test_vec)
    if tn == 0.0:
        raise VlmError(f"zero-norm embedding for {sequence.test_image_id!r}")
    best_i, best_sim = 0, -np.inf
    for i, (image_id, _) in enumerate(sequence.shots):
        vec = images.row(image_id).astype(np.float64)
        vn = np.linalg.norm(vec)
        if vn == 0.0:
            raise VlmError(f"zero-norm embedding for {image_id!r}")
        sim = float(vec @ test_vec / (vn * tn))
        if sim > best_sim:
            best_i, best_sim = i, sim
    return sequence.shots[best_i][1]


class StubBackend:
    """In-process deterministic backend with a generation-call counter."""

    def __init__(self, mode: str, *, images: EmbeddingStore | None = None,
                 tags: dict[str, TagSet] | None = None):
        if mode not in STUB_MODES:
            raise VlmError(f"unknown stub mode {mode!r}")
        self.mode = mode
        self.images = images
        self.tags = tags
        self.calls = 0
        self.model_id = f"stub/{mode}"

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        self.calls += 1
        caption = stub_generate(request.sequence, self.mode,
                                images=self.images, tags=self.tags)
        return GenerationResponse(caption=caption, model=self.model_id)


class HttpBackend:
    """Protocol client with bounded retries on transport errors."""

    def __init__(self, endpoint: str | None = None, timeout: float = 30.0):
        endpoint = os.environ.get(ENDPOINT_ENV) or endpoint
        if not endpoint:
            raise VlmError(f"no endpoint configured (set {ENDPOINT_ENV} or pass one)")
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.model_id = self.endpoint

    def health(self) -> dict:
        import httpx
        try:
            resp = httpx.get(f"{self.endpoint}/v1/health", timeout=self.timeout)
        except httpx.HTTPError as exc:
            raise TransportError(f"health check failed: {exc}") from exc
        try:
            body = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"malformed health body: {exc}") from exc
        if resp.status_code != 200 or body.get("status") != "ok":
            raise BackendError(f"unhealthy endpoint: {body}")
        return body

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        import httpx
        payload = request.to_wire()
        last_exc: Exception | None = None
        for attempt in range(MAX_ATTEMPTS):
            if attempt:
                time.sleep(BACKOFF_INITIAL_S * (2 ** (attempt - 1)))
            started = time.monotonic()
            try:
                resp = httpx.post(f"{self.endpoint}/v1/generate", json=payload,
                                  timeout=self.timeout)
            except httpx.HTTPError as exc:
                last_exc = TransportError(f"transport failure: {exc}")
                continue
            latency_ms = (time.monotonic() - started) * 1000.0
            try:
                body = resp.json()
            except ValueError as exc:
                raise ProtocolError(
                    f"malformed response body (status {resp.status_code}) "
                    f"for request {payload!r}") from exc
            if resp.status_code != 200:
                err = body.get("error", {})
                raise BackendError(
                    f"model error {err.get('code', resp.status_code)}: "
                    f"{err.get('message', '')}")
            if "caption" not in body or "model" not in body:
                raise ProtocolError(f"response missing fields: {body!r}")
            return GenerationResponse(caption=body["caption"], model=body["model"],
                                      latency_ms=latency_ms)
        raise last_exc  # type: ignore[misc]


def batch_generate(backend, requests: list[GenerationRequest],
                   max_in_flight: int = 4) -> list[GenerationResponse]:
    """Run requests with bounded concurrency; responses align positionally
    with requests regardless of completion order."""
    if max_in_flight < 1:
        raise VlmError("max_in_flight must be >= 1")
    results: list[GenerationResponse | None] = [None] * len(requests)
    failed: dict[int, Exception] = {}
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        futures = {pool.submit(backend.generate, req): i
                   for i, req in enumerate(requests)}
        for fut, i in futures.items():
            try:
                results[i] = fut.result()
            except Exception as exc:  # noqa: BLE001 - collected per index
                failed[i] = exc
    if failed:
        raise BatchError(failed, results)
    return results  # type: ignore[return-value]


def make_backend(endpoint: str | None = None, stub: str | None = None, *,
                 images: EmbeddingStore | None = None,
                 tags: dict[str, TagSet] | None = None):
    """Backend factory shared by the pipeline and the CLI."""
    if stub is not None:
        return StubBackend(stub, images=images, tags=tags)
    return HttpBackend(endpoint)
