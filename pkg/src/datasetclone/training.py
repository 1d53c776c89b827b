"""From-scratch supervised training on a generated dataset.

SGD with momentum, linear warmup for the first 10% of iterations followed by
cosine decay to zero, and a multi-crop augmentation pipeline (one or more
global crops plus several small local crops; random resized crop, flip, color
jitter, grayscale, blur). The cross-entropy loss is averaged over all views
of a batch. Desk-scale defaults use a small convolutional encoder on 32px
crops; ``encoder_arch="resnet50"`` switches to the full-scale architecture.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision.transforms.functional as TF
import yaml
from PIL import Image
from torchvision.transforms import InterpolationMode

from .store import DatasetView

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; aborting is better than saving garbage."""


@dataclass(frozen=True)
class MultiCropConfig:
    num_global: int = 1
    num_local: int = 8
    global_size: int = 32
    local_size: int = 16
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    pixel_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    pixel_std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.num_global < 1:
            raise ValueError("need at least one global crop")
        if self.num_local < 0:
            raise ValueError("num_local must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    momentum: float = 0.9
    # Not stated by the source protocol; common ImageNet practice scaled by batch size.
    base_lr: float = 0.1
    weight_decay: float = 1e-4
    warmup_fraction: float = 0.10
    multicrop: MultiCropConfig = field(default_factory=MultiCropConfig)
    encoder_arch: str = "tiny_conv"
    seed: int = 0
    # Keep decoded images in memory; disable for datasets that do not fit.
    cache_images: bool = True

    def __post_init__(self):
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["multicrop"] = asdict(self.multicrop)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        mc = d.pop("multicrop", {})
        if mc:
            for key in ("global_scale", "local_scale", "pixel_mean", "pixel_std"):
                if key in mc:
                    mc[key] = tuple(mc[key])
            d["multicrop"] = MultiCropConfig(**mc)
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        text = Path(path).read_text(encoding="utf-8")
        return cls.from_dict(yaml.safe_load(text) or {})


def lr_at(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    """Learning rate at an optimizer step: linear ramp over the first
    ``warmup_fraction`` of steps, then cosine decay to zero at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = max(1, math.ceil(warmup_fraction * total_steps))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    if total_steps == warmup:
        return 0.0
    progress = (step - warmup) / (total_steps - warmup)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def _rand(rng: torch.Generator) -> float:
    return torch.rand((), generator=rng).item()


def _uniform(rng: torch.Generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * _rand(rng)


def _randint(rng: torch.Generator, lo: int, hi: int) -> int:
    # half-open [lo, hi)
    return int(torch.randint(lo, hi, (), generator=rng).item())


def _sample_crop_box(height: int, width: int, scale: tuple[float, float],
                     rng: torch.Generator) -> tuple[int, int, int, int]:
    area = height * width
    log_ratio = (math.log(3 / 4), math.log(4 / 3))
    for _ in range(10):
        target_area = area * _uniform(rng, scale[0], scale[1])
        aspect = math.exp(_uniform(rng, log_ratio[0], log_ratio[1]))
        crop_w = int(round(math.sqrt(target_area * aspect)))
        crop_h = int(round(math.sqrt(target_area / aspect)))
        if 0 < crop_w <= width and 0 < crop_h <= height:
            top = _randint(rng, 0, height - crop_h + 1)
            left = _randint(rng, 0, width - crop_w + 1)
            return top, left, crop_h, crop_w
    # Fallback, clamped to the closest valid aspect (torchvision convention).
    in_ratio = width / height
    if in_ratio < 3 / 4:
        crop_w = width
        crop_h = min(height, int(round(crop_w / (3 / 4))))
    elif in_ratio > 4 / 3:
        crop_h = height
        crop_w = min(width, int(round(crop_h * (4 / 3))))
    else:
        crop_w, crop_h = width, height
    top = (height - crop_h) // 2
    left = (width - crop_w) // 2
    return top, left, crop_h, crop_w


def _augment_view(img: torch.Tensor, out_size: int, scale: tuple[float, float],
                  blur_p: float, rng: torch.Generator) -> torch.Tensor:
    _, height, width = img.shape
    top, left, crop_h, crop_w = _sample_crop_box(height, width, scale, rng)
    view = TF.resized_crop(img, top, left, crop_h, crop_w, [out_size, out_size],
                           InterpolationMode.BICUBIC, antialias=True).clamp(0.0, 1.0)
    if _rand(rng) < 0.5:
        view = TF.hflip(view)
    if _rand(rng) < 0.8:
        view = TF.adjust_brightness(view, _uniform(rng, 0.6, 1.4))
        view = TF.adjust_contrast(view, _uniform(rng, 0.6, 1.4))
        view = TF.adjust_saturation(view, _uniform(rng, 0.8, 1.2))
        view = TF.adjust_hue(view, _uniform(rng, -0.1, 0.1))
    if _rand(rng) < 0.2:
        view = TF.rgb_to_grayscale(view, num_output_channels=3)
    if _rand(rng) < blur_p:
        # Sigma range is stated for 224px crops; scale with the crop so small
        # desk-scale views keep the same relative blur.
        sigma = _uniform(rng, 0.1, 2.0) * out_size / 224.0
        if sigma > 0.05:
            kernel = max(3, (out_size // 10) * 2 + 1)
            view = TF.gaussian_blur(view, [kernel, kernel], [sigma, sigma])
    return view.clamp(0.0, 1.0)


def normalize_pixels(view: torch.Tensor, config: MultiCropConfig) -> torch.Tensor:
    mean = torch.tensor(config.pixel_mean).view(3, 1, 1)
    std = torch.tensor(config.pixel_std).view(3, 1, 1)
    return (view - mean) / std


def multicrop_views(image: Image.Image, config: MultiCropConfig,
                    rng: torch.Generator) -> list[torch.Tensor]:
    """Produce ``num_global + num_local`` augmented views of one image.

    Blur probabilities follow the multi-crop recipe: certain on the first
    global crop, rare on the remaining globals, even odds on locals. Images
    smaller than the local crop size are upscaled first (logged).
    """
    if image.mode != "RGB":
        image = image.convert("RGB")
    if min(image.size) < config.local_size:
        scale_up = config.local_size / min(image.size)
        new_size = (max(1, round(image.size[0] * scale_up)), max(1, round(image.size[1] * scale_up)))
        logger.warning("image %s smaller than local crop %d; upscaling to %s",
                       image.size, config.local_size, new_size)
        image = image.resize(new_size, Image.BICUBIC)
    img = TF.to_tensor(image)
    views = []
    for g in range(config.num_global):
        blur_p = 1.0 if g == 0 else 0.1
        views.append(_augment_view(img, config.global_size, config.global_scale, blur_p, rng))
    for _ in range(config.num_local):
        views.append(_augment_view(img, config.local_size, config.local_scale, 0.5, rng))
    return [normalize_pixels(v, config) for v in views]


class TinyConvEncoder(nn.Module):
    """Three stride-2 conv blocks plus global average pooling; 64-d features."""

    feature_dim = 64

    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.BatchNorm2d(16),
            nn.ReLU(inplace=True),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.BatchNorm2d(32),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.features(x)
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


def build_encoder(arch: str) -> tuple[nn.Module, int]:
    if arch == "tiny_conv":
        return TinyConvEncoder(), TinyConvEncoder.feature_dim
    if arch == "resnet50":
        import torchvision.models as tvm

        model = tvm.resnet50(weights=None)
        dim = model.fc.in_features
        model.fc = nn.Identity()
        return model, dim
    raise ValueError(f"unknown encoder_arch {arch!r}")


@dataclass
class Checkpoint:
    encoder: nn.Module
    classifier: nn.Module
    config: TrainConfig
    history: dict
    num_classes: int
    feature_dim: int
    catalog_name: str = ""

    def model(self) -> nn.Module:
        return nn.Sequential(self.encoder, self.classifier)

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        archive = out / "checkpoint.pt"
        torch.save(
            {"encoder": self.encoder.state_dict(), "classifier": self.classifier.state_dict()},
            archive,
        )
        metadata = {
            "config": self.config.to_dict(),
            "history": self.history,
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "catalog_name": self.catalog_name,
        }
        (out / "metadata.json").write_text(
            json.dumps(metadata, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        return archive

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        out = path.parent if path.suffix == ".pt" else path
        metadata = json.loads((out / "metadata.json").read_text(encoding="utf-8"))
        config = TrainConfig.from_dict(metadata["config"])
        encoder, feature_dim = build_encoder(config.encoder_arch)
        classifier = nn.Linear(feature_dim, metadata["num_classes"])
        states = torch.load(out / "checkpoint.pt", map_location="cpu", weights_only=True)
        encoder.load_state_dict(states["encoder"])
        classifier.load_state_dict(states["classifier"])
        encoder.eval()
        classifier.eval()
        return cls(
            encoder=encoder,
            classifier=classifier,
            config=config,
            history=metadata["history"],
            num_classes=metadata["num_classes"],
            feature_dim=feature_dim,
            catalog_name=metadata.get("catalog_name", ""),
        )


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return math.ceil(n_samples / batch_size)


def _load_rgb(path: Path) -> Image.Image:
    with Image.open(path) as im:
        return im.convert("RGB")


def train(dataset: DatasetView, config: TrainConfig,
          num_classes: Optional[int] = None) -> Checkpoint:
    """Train encoder + linear classifier from scratch on the dataset.

    Shuffling and augmentation randomness are decided by ``config.seed``, so
    runs are reproducible. Raises TrainingDiverged on non-finite loss.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    n_classes = num_classes or dataset.num_classes
    labels = dataset.labels
    bad = [y for y in labels if not 0 <= y < n_classes]
    if bad:
        raise ValueError(f"labels outside [0, {n_classes}): {sorted(set(bad))[:5]}")
    seen = set(labels)
    for missing in sorted(set(range(n_classes)) - seen):
        logger.warning("class %d has no training samples", missing)

    torch.manual_seed(config.seed)
    encoder, feature_dim = build_encoder(config.encoder_arch)
    classifier = nn.Linear(feature_dim, n_classes)
    model_params = list(encoder.parameters()) + list(classifier.parameters())
    optimizer = torch.optim.SGD(
        model_params, lr=config.base_lr, momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    rng = torch.Generator().manual_seed(config.seed)

    n = len(dataset)
    per_epoch = steps_per_epoch(n, config.batch_size)
    total_steps = config.epochs * per_epoch
    mc = config.multicrop
    views_per_image = mc.num_global + mc.num_local

    encoder.train()
    classifier.train()
    lr_history: list[float] = []
    loss_history: list[float] = []
    global_step = 0
    image_cache: dict[Path, Image.Image] = {}

    def get_image(path: Path) -> Image.Image:
        if not config.cache_images:
            return _load_rgb(path)
        if path not in image_cache:
            image_cache[path] = _load_rgb(path)
        return image_cache[path]

    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=rng).tolist()
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch_idx = order[start:start + config.batch_size]
            globals_batch, locals_batch, batch_labels = [], [], []
            for i in batch_idx:
                path, label = dataset[i]
                views = multicrop_views(get_image(path), mc, rng)
                globals_batch.extend(views[: mc.num_global])
                locals_batch.extend(views[mc.num_global:])
                batch_labels.append(label)

            targets = torch.tensor(batch_labels, dtype=torch.long)
            loss_sum = torch.zeros(())
            logits_g = classifier(encoder(torch.stack(globals_batch)))
            loss_sum = loss_sum + F.cross_entropy(
                logits_g, targets.repeat_interleave(mc.num_global), reduction="sum"
            )
            if locals_batch:
                logits_l = classifier(encoder(torch.stack(locals_batch)))
                loss_sum = loss_sum + F.cross_entropy(
                    logits_l, targets.repeat_interleave(mc.num_local), reduction="sum"
                )
            loss = loss_sum / (len(batch_idx) * views_per_image)

            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {global_step} "
                    f"(lr={lr_history[-1] if lr_history else config.base_lr:.3g})"
                )

            lr = lr_at(global_step, total_steps, config.base_lr, config.warmup_fraction)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            lr_history.append(lr)
            epoch_loss += loss.item() * len(batch_idx)
            global_step += 1
        loss_history.append(epoch_loss / n)

    encoder.eval()
    classifier.eval()
    history = {
        "loss_per_epoch": loss_history,
        "lr_per_step": lr_history,
        "steps_per_epoch": per_epoch,
        "total_steps": total_steps,
    }
    return Checkpoint(
        encoder=encoder,
        classifier=classifier,
        config=config,
        history=history,
        num_classes=n_classes,
        feature_dim=feature_dim,
        catalog_name=dataset.name,
    )
