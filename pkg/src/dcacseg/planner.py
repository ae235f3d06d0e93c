"""Dataset fingerprinting and experiment planning.

A reduced analogue of the nnU-Net experiment planner: the fingerprint keeps
median image size, per-channel intensity percentiles and domain counts, and
three closed-form rules turn it into a network/training configuration.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .data import DatasetManifest, load_image

MIN_PATCH = 32
MAX_PATCH = 512
MAX_DEPTH = 5
MIN_BOTTLENECK = 4
MAX_FINGERPRINT_PIXELS = 1_000_000


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class Fingerprint:
    median_height: float
    median_width: float
    percentile_low: tuple[float, ...]   # p0.5 per channel
    percentile_high: tuple[float, ...]  # p99.5 per channel
    num_domains: int
    num_samples: int

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class PlanConfig:
    patch_size: int = 64
    depth: int = 4
    base_channels: int = 32
    max_channels: int = 320
    num_classes: int = 2
    num_domains: int = 1
    dcac_enabled: bool = False
    seed: int = 0
    # optimisation
    batch_size: int = 2
    minibatches_per_epoch: int = 250
    epochs: int = 1000
    initial_lr: float = 0.01
    momentum: float = 0.99
    poly_exponent: float = 0.9
    grad_clip_norm: float | None = 12.0
    ema_alpha: float = 0.9
    domain_loss_weight: float = 1.0
    dice_eps: float = 1e-5
    # sampling / augmentation
    p_fg: float = 1.0 / 3.0
    p_mirror: float = 0.5
    p_rot90: float = 0.5
    p_intensity: float = 0.15
    intensity_range: tuple[float, float] = (0.9, 1.1)
    # dcac heads
    predictor_hidden: int = 128
    dac_kernel_sizes: tuple[int, ...] = (1,)
    cac_kernel_sizes: tuple[int, ...] = (1, 1)
    stop_gradient_domain_encoding: bool = False
    feature_tap: str = "pre_norm"  # or "post_act"
    descriptor_norm: str = "standardize"  # or "stage_rms", "none"
    # inference
    step_fraction: float = 0.5
    sigma_scale: float = 1.0 / 8.0
    tta: bool = True
    val_tta: bool = False
    intensity_percentiles: tuple[tuple[float, ...], tuple[float, ...]] | None = None

    def __post_init__(self) -> None:
        self.intensity_range = tuple(self.intensity_range)
        self.dac_kernel_sizes = tuple(self.dac_kernel_sizes)
        self.cac_kernel_sizes = tuple(self.cac_kernel_sizes)
        if self.intensity_percentiles is not None:
            self.intensity_percentiles = tuple(tuple(p) for p in self.intensity_percentiles)
        self.validate()

    def validate(self) -> None:
        if self.depth < 1:
            raise PlanError(f"depth must be >= 1, got {self.depth}")
        if self.patch_size % (2 ** self.depth):
            raise PlanError(f"patch_size {self.patch_size} not divisible by 2^{self.depth}")
        if self.patch_size // 2 ** self.depth < MIN_BOTTLENECK:
            raise PlanError(
                f"bottleneck size {self.patch_size // 2 ** self.depth} < {MIN_BOTTLENECK}"
            )
        if self.base_channels < 1 or self.max_channels < self.base_channels:
            raise PlanError("invalid channel configuration")
        if self.num_classes < 2:
            raise PlanError("num_classes must be >= 2")
        if self.num_domains < 1:
            raise PlanError("num_domains must be >= 1")
        if self.dcac_enabled and self.num_domains < 2:
            raise PlanError("DCAC needs at least 2 source domains")
        if self.batch_size < 1 or self.minibatches_per_epoch < 1 or self.epochs < 1:
            raise PlanError("batch_size, minibatches_per_epoch and epochs must be positive")
        for k in self.dac_kernel_sizes + self.cac_kernel_sizes:
            if k < 1 or k % 2 == 0:
                raise PlanError(f"dynamic kernel sizes must be odd and >= 1, got {k}")
        if self.feature_tap not in ("pre_norm", "post_act"):
            raise PlanError(f"unknown feature_tap {self.feature_tap!r}")
        if self.descriptor_norm not in ("none", "stage_rms", "standardize"):
            raise PlanError(f"unknown descriptor_norm {self.descriptor_norm!r}")
        if not self.cac_kernel_sizes:
            raise PlanError("CAC head needs at least one layer")

    @property
    def channels(self) -> list[int]:
        """Encoder channels for stages 0..depth."""
        return [min(self.base_channels * 2 ** s, self.max_channels) for s in range(self.depth + 1)]

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PlanConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise PlanError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> PlanConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes: Any) -> PlanConfig:
        return dataclasses.replace(self, **changes)


PRESETS: dict[str, dict[str, Any]] = {
    # CPU-feasible settings used by the acceptance runs
    "desk": dict(patch_size=64, depth=4, base_channels=16, minibatches_per_epoch=20, epochs=60),
    # optimisation settings of the original setup; 1000 epochs baseline, 2500 with DCAC
    "full": dict(batch_size=2, minibatches_per_epoch=250),
}


def compute_fingerprint(manifest: DatasetManifest) -> Fingerprint:
    if not manifest.samples:
        raise PlanError("empty manifest")
    heights, widths, pixels = [], [], []
    for s in manifest.samples:
        img = load_image(s.image_path)
        heights.append(img.shape[0])
        widths.append(img.shape[1])
        pixels.append(img.reshape(-1, img.shape[-1]))
    pooled = np.concatenate(pixels, axis=0)
    if len(pooled) > MAX_FINGERPRINT_PIXELS:
        idx = np.linspace(0, len(pooled) - 1, MAX_FINGERPRINT_PIXELS).round().astype(np.int64)
        pooled = pooled[idx]
    lo = np.percentile(pooled, 0.5, axis=0)
    hi = np.percentile(pooled, 99.5, axis=0)
    return Fingerprint(
        median_height=float(np.median(heights)),
        median_width=float(np.median(widths)),
        percentile_low=tuple(float(v) for v in lo),
        percentile_high=tuple(float(v) for v in hi),
        num_domains=manifest.num_domains,
        num_samples=len(manifest.samples),
    )


def plan(fp: Fingerprint, overrides: dict[str, Any] | None = None,
         out_path: str | Path | None = None) -> PlanConfig:
    """Derive a :class:`PlanConfig` from a fingerprint.

    patch size is the largest power of two not exceeding the smaller median
    dimension (capped at 512), depth is the deepest pooling that keeps a
    bottleneck of at least 4 pixels (capped at 5). Any field can be
    overridden; ``epochs`` defaults to 2500 with DCAC and 1000 without.
    """
    overrides = dict(overrides or {})
    smallest = min(fp.median_height, fp.median_width)
    if smallest < MIN_PATCH:
        raise PlanError(f"median image size {smallest} smaller than minimum patch {MIN_PATCH}")
    patch = min(MAX_PATCH, 2 ** int(math.floor(math.log2(smallest))))
    depth = min(MAX_DEPTH, int(math.log2(patch // MIN_BOTTLENECK)))

    cfg: dict[str, Any] = dict(
        patch_size=patch,
        depth=depth,
        base_channels=32,
        max_channels=320,
        num_domains=fp.num_domains,
        intensity_percentiles=(fp.percentile_low, fp.percentile_high),
    )
    cfg.update(overrides)
    if "epochs" not in overrides:
        cfg["epochs"] = 2500 if cfg.get("dcac_enabled", False) else 1000
    result = PlanConfig(**cfg)
    if out_path is not None:
        result.save(out_path)
    return result
