"""Text-to-image backends and plan execution.

Two backends share one interface: a deterministic procedural mock (the test
oracle: class token controls foreground hue, background token controls the
backdrop, so classes are separable by color) and an HTTP client for a real
diffusion service. ``run_plan`` fans records out to a worker pool and appends
results to a dataset store; reruns with ``resume`` skip finished records.
"""

from __future__ import annotations

import base64
import colorsys
import hashlib
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import requests
from PIL import Image

from .prompts import GenParams, GenerationPlan, PromptRecord
from .store import DatasetStore, ManifestEntry, StoreError

ENV_BACKEND_URL = "DATASETCLONE_BACKEND_URL"
ENV_BACKEND_TOKEN = "DATASETCLONE_BACKEND_TOKEN"


class BackendError(RuntimeError):
    """Unrecoverable failure for one record (malformed response, bad payload)."""


class RetryableBackendError(BackendError):
    """Transient failure (connection refused, timeout, 5xx) worth retrying."""


@dataclass(frozen=True)
class BackendCapabilities:
    max_width: int = 4096
    max_height: int = 4096


@dataclass
class ImageResult:
    png_bytes: bytes
    backend_id: str
    elapsed_ms: float
    safety_flagged: bool = False


class Backend:
    """Interface for text-to-image services."""

    backend_id: str = "base"
    capabilities: BackendCapabilities = BackendCapabilities()
    # None means safe for any level of concurrent calls.
    max_concurrency: Optional[int] = None

    def generate(self, prompt: str, seed: int, params: GenParams) -> ImageResult:
        raise NotImplementedError

    def check_params(self, params: GenParams) -> None:
        caps = self.capabilities
        if params.width > caps.max_width or params.height > caps.max_height:
            raise BackendError(
                f"{params.width}x{params.height} exceeds backend capability "
                f"{caps.max_width}x{caps.max_height}"
            )


def _hash_unit(token: str) -> float:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") / 2**32


def _hsv_rgb(h: float, s: float, v: float) -> np.ndarray:
    return np.array([round(c * 255) for c in colorsys.hsv_to_rgb(h, s, v)], dtype=np.uint8)


def _shape_mask(kind: int, h: int, w: int, cx: int, cy: int, radius: int) -> np.ndarray:
    yy, xx = np.ogrid[:h, :w]
    if kind == 0:  # disc
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
    if kind == 1:  # square
        return (np.abs(xx - cx) <= radius) & (np.abs(yy - cy) <= radius)
    if kind == 2:  # diamond
        return np.abs(xx - cx) + np.abs(yy - cy) <= radius
    # ring
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    return (d2 <= radius**2) & (d2 >= (radius // 2) ** 2)


def mock_generate(prompt: str, seed: int, params: GenParams) -> ImageResult:
    """Procedural image fully determined by (prompt, seed, params).

    Foreground: a centered shape whose dominant hue hashes the class token
    (the text before the first comma); the same hash also fixes the outline
    kind and a concentric inner accent color, so class identity survives
    color-jitter augmentation (hue shifts move both tones together).
    Backdrop: a muted color hashing the background token (text after
    " inside ", empty otherwise) plus seeded noise, so distinct seeds always
    give distinct images while the class appearance stays fixed.
    """
    t0 = time.perf_counter()
    class_token = prompt.split(",")[0]
    # The multi-instance templates prepend fixed text; strip it so every
    # prompt of a class maps to one appearance.
    for prefix in ("a photo of multiple different ", "a photo of multiple "):
        if class_token.startswith(prefix):
            class_token = class_token[len(prefix):]
            break
    background_token = prompt.split(" inside ", 1)[1] if " inside " in prompt else ""

    class_digest = hashlib.sha256(class_token.encode("utf-8")).digest()
    fg = _hsv_rgb(_hash_unit(class_token), 1.0, 1.0)
    shape_kind = class_digest[4] % 4
    accent = _hsv_rgb(int.from_bytes(class_digest[5:9], "little") / 2**32, 1.0, 1.0)
    bg = _hsv_rgb(_hash_unit("bg:" + background_token), 0.45, 0.35)

    w, h = params.width, params.height
    prompt_digest = hashlib.sha256(prompt.encode("utf-8")).digest()
    rng = np.random.default_rng([seed, int.from_bytes(prompt_digest[:8], "little")])

    img = bg[None, None, :].astype(np.int16) + rng.integers(-12, 13, size=(h, w, 3), dtype=np.int16)
    img = np.clip(img, 0, 255).astype(np.uint8)

    side = min(w, h)
    radius = side // 3 + int(rng.integers(-(side // 16), side // 16 + 1))
    cx = w // 2 + int(rng.integers(-(side // 12), side // 12 + 1))
    cy = h // 2 + int(rng.integers(-(side // 12), side // 12 + 1))
    img[_shape_mask(shape_kind, h, w, cx, cy, radius)] = fg
    img[_shape_mask(0, h, w, cx, cy, max(2, int(radius * 0.45)))] = accent

    buf = io.BytesIO()
    Image.fromarray(img, mode="RGB").save(buf, format="PNG")
    elapsed = (time.perf_counter() - t0) * 1000.0
    return ImageResult(png_bytes=buf.getvalue(), backend_id="mock", elapsed_ms=elapsed)


class MockBackend(Backend):
    backend_id = "mock"
    capabilities = BackendCapabilities()
    max_concurrency = None

    def generate(self, prompt: str, seed: int, params: GenParams) -> ImageResult:
        self.check_params(params)
        return mock_generate(prompt, seed, params)


class HttpBackend(Backend):
    """Client for a remote diffusion service speaking the JSON wire protocol.

    POST {endpoint}/generate with {"prompt", "seed", "num_inference_steps",
    "guidance_scale", "width", "height"}; expects 200 with
    {"image_base64": <PNG>, "safety_flagged": bool}. Endpoint and bearer token
    default to the DATASETCLONE_BACKEND_URL / _TOKEN environment variables.
    """

    backend_id = "http"

    RETRY_BACKOFF = (0.5, 2.0, 8.0)

    def __init__(
        self,
        endpoint: Optional[str] = None,
        token: Optional[str] = None,
        timeout: float = 120.0,
        max_concurrency: int = 4,
        backoff: Sequence[float] = RETRY_BACKOFF,
    ):
        self.endpoint = (endpoint or os.environ.get(ENV_BACKEND_URL, "")).rstrip("/")
        if not self.endpoint:
            raise BackendError(f"no backend endpoint; set {ENV_BACKEND_URL} or pass endpoint=")
        self.token = token if token is not None else os.environ.get(ENV_BACKEND_TOKEN)
        self.timeout = timeout
        self.max_concurrency = max_concurrency
        self.backoff = tuple(backoff)
        self.session = requests.Session()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        return headers

    def _post_once(self, body: dict) -> dict:
        try:
            resp = self.session.post(
                f"{self.endpoint}/generate",
                json=body,
                headers=self._headers(),
                timeout=self.timeout,
            )
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise RetryableBackendError(f"backend unreachable: {exc}") from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise RetryableBackendError(f"backend returned {resp.status_code}")
        if resp.status_code != 200:
            raise BackendError(f"backend returned {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except (json.JSONDecodeError, ValueError) as exc:
            raise BackendError(f"malformed response: {exc}") from exc

    def generate(self, prompt: str, seed: int, params: GenParams) -> ImageResult:
        self.check_params(params)
        body = {
            "prompt": prompt,
            "seed": seed,
            "num_inference_steps": params.steps,
            "guidance_scale": params.guidance,
            "width": params.width,
            "height": params.height,
        }
        t0 = time.perf_counter()
        attempts = len(self.backoff) + 1
        payload = None
        for attempt in range(attempts):
            try:
                payload = self._post_once(body)
                break
            except RetryableBackendError:
                if attempt == attempts - 1:
                    raise
                time.sleep(self.backoff[attempt])
        assert payload is not None
        try:
            png = base64.b64decode(payload["image_base64"])
            flagged = bool(payload["safety_flagged"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"malformed response payload: {exc}") from exc
        with Image.open(io.BytesIO(png)) as im:
            if im.size != (params.width, params.height):
                raise BackendError(
                    f"backend returned {im.size[0]}x{im.size[1]}, "
                    f"expected {params.width}x{params.height}"
                )
        elapsed = (time.perf_counter() - t0) * 1000.0
        return ImageResult(
            png_bytes=png, backend_id=self.backend_id, elapsed_ms=elapsed, safety_flagged=flagged
        )


@dataclass
class RunReport:
    completed: int = 0
    failed: int = 0
    skipped: int = 0
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "completed": self.completed,
            "failed": self.failed,
            "skipped": self.skipped,
            "errors": self.errors,
        }


def _encode_for_storage(result: ImageResult, image_format: str, quality: int) -> tuple[bytes, str]:
    if image_format == "png":
        return result.png_bytes, "png"
    with Image.open(io.BytesIO(result.png_bytes)) as im:
        buf = io.BytesIO()
        im.convert("RGB").save(buf, format="JPEG", quality=quality)
    return buf.getvalue(), "jpg"


def _entry_for(record: PromptRecord, params: GenParams, backend_id: str, file_path: str,
               sha: str, status: str, error: str = "") -> ManifestEntry:
    return ManifestEntry(
        wnid=record.wnid,
        class_index=record.class_index,
        template=record.template.value,
        background=record.background,
        prompt=record.prompt_text,
        seed=record.seed,
        index_in_class=record.index_in_class,
        steps=params.steps,
        guidance=params.guidance,
        width=params.width,
        height=params.height,
        backend_id=backend_id,
        file_path=file_path,
        sha256=sha,
        status=status,
        error=error,
    )


def run_plan(
    plan: GenerationPlan,
    backend: Backend,
    store: DatasetStore,
    workers: int = 1,
    resume: bool = False,
    image_format: str = "png",
    jpeg_quality: int = 95,
) -> RunReport:
    """Execute every pending plan record against the backend.

    Workers generate and write image files concurrently; manifest appends are
    serialized on the coordinating thread, so the final manifest contents do
    not depend on worker count or completion order. Backend failures mark the
    record failed and the run continues; store failures abort.
    """
    if image_format not in ("png", "jpeg"):
        raise ValueError(f"unsupported image format {image_format!r}")
    existing = store.keys()
    if existing and not resume:
        raise StoreError(
            f"store at {store.root} already has {len(existing)} entries; "
            "pass resume=True to continue"
        )

    report = RunReport()
    pending = []
    for record in plan.records:
        if record.key in existing:
            report.skipped += 1
        else:
            pending.append(record)

    params = plan.gen_params

    def produce(record: PromptRecord) -> ManifestEntry:
        result = backend.generate(record.prompt_text, record.seed, params)
        data, ext = _encode_for_storage(result, image_format, jpeg_quality)
        rel_path = f"images/{record.wnid}/{record.template.value}/{record.index_in_class:06d}.{ext}"
        sha = store.write_image(rel_path, data)
        return _entry_for(record, params, result.backend_id, rel_path, sha, "ok")

    pool_size = max(1, workers)
    if backend.max_concurrency is not None:
        pool_size = min(pool_size, backend.max_concurrency)

    with ThreadPoolExecutor(max_workers=pool_size) as pool:
        futures = {pool.submit(produce, record): record for record in pending}
        for future in as_completed(futures):
            record = futures[future]
            try:
                entry = future.result()
            except BackendError as exc:
                entry = _entry_for(
                    record, params, backend.backend_id, "", "", "failed", str(exc)
                )
                report.failed += 1
                report.errors.append(f"{record.key}: {exc}")
            else:
                report.completed += 1
            store.append(entry)
    return report
