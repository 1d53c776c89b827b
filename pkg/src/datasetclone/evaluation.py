"""Evaluation: top-k accuracy (optionally class-restricted) and feature extraction.

Class-restricted scoring follows the common robustness-set convention: by
default the logits are cut down to the allowed classes *before* ranking, and
only samples of allowed classes may appear. Feature matrices go to disk in a
little-endian binary format (magic ``FEATMAT1``).
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .store import DatasetView
from .training import Checkpoint, normalize_pixels

logger = logging.getLogger(__name__)

FEATMAT_MAGIC = b"FEATMAT1"


class EvalError(ValueError):
    """Dataset, checkpoint and mask disagree."""


@dataclass(frozen=True)
class ClassMask:
    allowed: frozenset[int]

    def __post_init__(self):
        if not self.allowed:
            raise EvalError("class mask must be non-empty")
        if any(i < 0 for i in self.allowed):
            raise EvalError("class mask indices must be non-negative")

    @classmethod
    def from_indices(cls, indices: Sequence[int]) -> "ClassMask":
        return cls(frozenset(int(i) for i in indices))

    @classmethod
    def from_file(cls, path: str | Path) -> "ClassMask":
        text = Path(path).read_text(encoding="utf-8").strip()
        if text.startswith("["):
            return cls.from_indices(json.loads(text))
        return cls.from_indices(int(line) for line in text.splitlines() if line.strip())


def topk_accuracy(
    logits: np.ndarray,
    labels: np.ndarray,
    ks: Sequence[int],
    mask: Optional[ClassMask] = None,
    mask_logits: bool = True,
) -> dict[int, float]:
    """Fraction of rows whose true class ranks in the top k.

    With a mask, every label must belong to it; when ``mask_logits`` the
    ranking also runs over the allowed classes only. Ties in a logit row are
    broken toward the smaller class index, deterministically.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise EvalError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    if logits.shape[0] == 0:
        raise EvalError("no samples to score")

    if mask is not None:
        outside = sorted(set(labels.tolist()) - mask.allowed)
        if outside:
            raise EvalError(f"test labels outside class mask: {outside[:5]}")
        if mask_logits:
            allowed = np.array(sorted(mask.allowed), dtype=np.int64)
            position = {c: p for p, c in enumerate(allowed.tolist())}
            logits = logits[:, allowed]
            labels = np.array([position[y] for y in labels.tolist()], dtype=np.int64)

    # Stable argsort on negated logits: equal scores keep ascending class order.
    order = np.argsort(-logits, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(order.shape[0])[:, None]
    ranks[rows, order] = np.arange(order.shape[1])[None, :]
    label_rank = ranks[np.arange(len(labels)), labels]
    return {int(k): float(np.mean(label_rank < k)) for k in ks}


def center_preprocess(image: Image.Image, size: int, checkpoint: Checkpoint) -> torch.Tensor:
    """Bicubic resize so the shortest side equals ``size``, then central square crop."""
    if image.mode != "RGB":
        image = image.convert("RGB")
    w, h = image.size
    scale = size / min(w, h)
    image = image.resize((max(size, round(w * scale)), max(size, round(h * scale))), Image.BICUBIC)
    w, h = image.size
    left = (w - size) // 2
    top = (h - size) // 2
    image = image.crop((left, top, left + size, top + size))
    tensor = torch.from_numpy(np.asarray(image, dtype=np.float32).transpose(2, 0, 1) / 255.0)
    return normalize_pixels(tensor, checkpoint.config.multicrop)


def _batched_forward(
    module: torch.nn.Module,
    checkpoint: Checkpoint,
    dataset: DatasetView,
    size: int,
    batch_size: int,
    skip_bad: bool,
) -> tuple[np.ndarray, np.ndarray, list[int]]:
    outputs: list[np.ndarray] = []
    kept_labels: list[int] = []
    skipped: list[int] = []
    batch: list[torch.Tensor] = []
    batch_labels: list[int] = []
    module.eval()

    def flush():
        if not batch:
            return
        with torch.no_grad():
            out = module(torch.stack(batch))
        outputs.append(out.numpy())
        kept_labels.extend(batch_labels)
        batch.clear()
        batch_labels.clear()

    for i, (path, label) in enumerate(dataset):
        try:
            with Image.open(path) as im:
                tensor = center_preprocess(im, size, checkpoint)
        except (OSError, SyntaxError) as exc:
            if not skip_bad:
                raise
            logger.warning("skipping undecodable image %s: %s", path, exc)
            skipped.append(i)
            continue
        batch.append(tensor)
        batch_labels.append(label)
        if len(batch) == batch_size:
            flush()
    flush()
    if not outputs:
        raise EvalError("no decodable images in dataset")
    return np.concatenate(outputs, axis=0), np.asarray(kept_labels, dtype=np.int32), skipped


def predict_logits(
    checkpoint: Checkpoint,
    dataset: DatasetView,
    batch_size: int = 64,
    resize: Optional[int] = None,
) -> tuple[np.ndarray, np.ndarray]:
    size = resize or checkpoint.config.multicrop.global_size
    logits, labels, _ = _batched_forward(
        checkpoint.model(), checkpoint, dataset, size, batch_size, skip_bad=False
    )
    return logits, labels


def evaluate_topk(
    checkpoint: Checkpoint,
    dataset: DatasetView,
    ks: Sequence[int] = (1, 5),
    mask: Optional[ClassMask] = None,
    mask_logits: bool = True,
    batch_size: int = 64,
    resize: Optional[int] = None,
) -> dict[int, float]:
    """Top-k accuracy of the full model (encoder + classifier) on real images."""
    bad = [y for y in dataset.labels if not 0 <= y < checkpoint.num_classes]
    if bad:
        raise EvalError(
            f"dataset labels exceed checkpoint classes ({checkpoint.num_classes}): "
            f"{sorted(set(bad))[:5]}"
        )
    if mask is not None and not set(mask.allowed) <= set(range(checkpoint.num_classes)):
        raise EvalError("class mask is not a subset of the checkpoint's classes")
    logits, labels = predict_logits(checkpoint, dataset, batch_size=batch_size, resize=resize)
    return topk_accuracy(logits, labels, ks, mask=mask, mask_logits=mask_logits)


@dataclass
class FeatureMatrix:
    """Row-major float32 features with integer labels."""

    X: np.ndarray
    labels: np.ndarray
    normalized: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if self.X.ndim != 2:
            raise EvalError("feature matrix must be 2-D")
        if self.X.shape[0] != self.labels.shape[0]:
            raise EvalError("one label per feature row required")
        if not np.all(np.isfinite(self.X)):
            raise EvalError("features contain NaN or Inf")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


def extract_features(
    checkpoint: Checkpoint,
    dataset: DatasetView,
    resolution: int = 224,
    batch_size: int = 64,
) -> FeatureMatrix:
    """Encode every dataset image: shortest side to ``resolution`` (bicubic),
    central crop, frozen encoder forward. Undecodable images are skipped with
    a warning and noted in the metadata."""
    feats, labels, skipped = _batched_forward(
        checkpoint.encoder, checkpoint, dataset, resolution, batch_size, skip_bad=True
    )
    meta = {
        "source_dataset": dataset.name,
        "encoder_id": checkpoint.config.encoder_arch,
        "resolution": resolution,
        "skipped_indices": skipped,
    }
    return FeatureMatrix(X=feats, labels=labels, normalized=False, meta=meta)


def write_features(fm: FeatureMatrix, path: str | Path) -> None:
    """Binary layout: magic, uint32-LE header length, JSON header, float32-LE
    row-major features, int32-LE labels."""
    header = {
        "n": fm.n,
        "d": fm.d,
        "dtype": "f32",
        "normalized": fm.normalized,
        "meta": fm.meta,
    }
    header_bytes = json.dumps(header, ensure_ascii=False, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(FEATMAT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(fm.X.astype("<f4").tobytes(order="C"))
        f.write(fm.labels.astype("<i4").tobytes(order="C"))


def read_features(path: str | Path) -> FeatureMatrix:
    blob = Path(path).read_bytes()
    if blob[:8] != FEATMAT_MAGIC:
        raise EvalError(f"{path}: not a feature matrix file")
    (header_len,) = struct.unpack_from("<I", blob, 8)
    header_end = 12 + header_len
    header = json.loads(blob[12:header_end].decode("utf-8"))
    n, d = header["n"], header["d"]
    x_end = header_end + 4 * n * d
    X = np.frombuffer(blob[header_end:x_end], dtype="<f4").reshape(n, d)
    labels = np.frombuffer(blob[x_end:x_end + 4 * n], dtype="<i4")
    return FeatureMatrix(
        X=X.copy(), labels=labels.copy(),
        normalized=bool(header["normalized"]), meta=header.get("meta", {}),
    )
