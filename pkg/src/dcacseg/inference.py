"""Sliding-window prediction with Gaussian importance weighting, mirror TTA and fold ensembling."""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import pad_to, save_mask
from .planner import PlanConfig

WEIGHT_FLOOR = 1e-8
# (dims to flip) for identity, horizontal, vertical, both
MIRROR_VARIANTS: tuple[tuple[int, ...], ...] = ((), (3,), (2,), (2, 3))


class PlanMismatchError(ValueError):
    pass


@dataclass
class PredictionMap:
    probs: np.ndarray                      # H x W x C, float32
    domain_probs: np.ndarray | None = None  # K, averaged over tiles and mirror variants

    def mask(self, threshold: float | None = None) -> np.ndarray:
        """Argmax labels; in the binary case ``threshold`` applies to the foreground probability."""
        if threshold is not None and self.probs.shape[-1] == 2:
            return (self.probs[..., 1] > threshold).astype(np.uint8)
        return self.probs.argmax(axis=-1).astype(np.uint8)


def gaussian_weights(patch_size: int, sigma_scale: float = 1.0 / 8.0) -> np.ndarray:
    """Separable Gaussian centred at ``(P-1)/2``, normalised to max 1, floored at 1e-8."""
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    sigma = patch_size * sigma_scale
    x = np.arange(patch_size, dtype=np.float64) - (patch_size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.max()
    return np.maximum(w, WEIGHT_FLOOR)


def tile_origins(size: int, patch_size: int, step_fraction: float = 0.5) -> list[int]:
    """Evenly spread tile starts covering ``[0, size)`` with a nominal step of
    ``step_fraction * patch_size``."""
    if size < patch_size:
        raise ValueError("image smaller than patch; pad first")
    if not 0 < step_fraction <= 1:
        raise ValueError("step_fraction must be in (0, 1]")
    step = patch_size * step_fraction
    n = int(math.ceil((size - patch_size) / step)) + 1
    if n == 1:
        return [0]
    actual = (size - patch_size) / (n - 1)
    return [int(round(actual * i)) for i in range(n)]


@dataclass
class TileGrid:
    origins: list[tuple[int, int]]
    patch_size: int
    step: int
    weight_map: np.ndarray  # accumulated importance per pixel of the padded image

    @classmethod
    def build(cls, shape: tuple[int, int], patch_size: int, step_fraction: float = 0.5,
              sigma_scale: float = 1.0 / 8.0, use_gaussian: bool = True) -> TileGrid:
        ys = tile_origins(shape[0], patch_size, step_fraction)
        xs = tile_origins(shape[1], patch_size, step_fraction)
        w = gaussian_weights(patch_size, sigma_scale) if use_gaussian else np.ones((patch_size, patch_size))
        acc = np.zeros(shape, dtype=np.float64)
        origins = [(y, x) for y in ys for x in xs]
        for y, x in origins:
            acc[y:y + patch_size, x:x + patch_size] += w
        return cls(origins, patch_size, max(1, int(round(patch_size * step_fraction))), acc)


def _model_dtype(model: Callable) -> torch.dtype:
    if isinstance(model, nn.Module):
        for p in model.parameters():
            return p.dtype
    return torch.float32


@contextmanager
def eval_mode(model: Callable):
    """Temporarily switch a module to evaluation mode (running statistics are then read-only)."""
    was_training = isinstance(model, nn.Module) and model.training
    if was_training:
        model.eval()
    try:
        yield model
    finally:
        if was_training:
            model.train()


def _forward(model: Callable, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
    out = model(x)
    if isinstance(out, torch.Tensor):
        return out, None
    dom = None if out[1] is None else torch.softmax(out[1], dim=-1)
    return out[0], dom


@torch.no_grad()
def tta_mirror(model: Callable, patch: torch.Tensor,
               variants: Sequence[tuple[int, ...]] = MIRROR_VARIANTS) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Average softmax over mirrored copies of ``patch`` (B, C, H, W), each un-flipped first."""
    probs_sum = None
    dom_sum = None
    for dims in variants:
        x = torch.flip(patch, dims) if dims else patch
        with eval_mode(model):
            logits, dom = _forward(model, x)
        p = torch.softmax(logits, dim=1)
        if dims:
            p = torch.flip(p, dims)
        probs_sum = p if probs_sum is None else probs_sum + p
        if dom is not None:
            dom_sum = dom if dom_sum is None else dom_sum + dom
    n = len(variants)
    return probs_sum / n, None if dom_sum is None else dom_sum / n


@torch.no_grad()
def sliding_window(image: np.ndarray, model: Callable, patch_size: int, step_fraction: float = 0.5,
                   sigma_scale: float = 1.0 / 8.0, tta: bool = True, use_gaussian: bool = True,
                   tile_batch: int = 8) -> PredictionMap:
    """Tile ``image`` (H x W x 3), predict each tile and blend with Gaussian weights.

    Images smaller than the patch are zero-padded symmetrically and the result
    cropped back. Tiles are accumulated sequentially in float64, so the output
    does not depend on the tile batch size.
    """
    h, w = image.shape[:2]
    padded, (oy, ox) = pad_to(np.asarray(image), patch_size)
    grid = TileGrid.build(padded.shape[:2], patch_size, step_fraction, sigma_scale, use_gaussian)
    weight = (gaussian_weights(patch_size, sigma_scale) if use_gaussian
              else np.ones((patch_size, patch_size)))
    dtype = _model_dtype(model)
    chw = torch.from_numpy(np.ascontiguousarray(padded.transpose(2, 0, 1))).to(dtype)
    acc = None
    dom_acc = None
    variants = MIRROR_VARIANTS if tta else ((),)
    for start in range(0, len(grid.origins), tile_batch):
        origins = grid.origins[start:start + tile_batch]
        batch = torch.stack([chw[:, y:y + patch_size, x:x + patch_size] for y, x in origins])
        probs, dom = tta_mirror(model, batch, variants)
        probs = probs.double().numpy()
        if acc is None:
            acc = np.zeros((probs.shape[1],) + padded.shape[:2], dtype=np.float64)
        for (y, x), p in zip(origins, probs):
            acc[:, y:y + patch_size, x:x + patch_size] += p * weight
        if dom is not None:
            d = dom.double().numpy()
            for row in d:
                dom_acc = row.copy() if dom_acc is None else dom_acc + row
    probs = (acc / grid.weight_map)[:, oy:oy + h, ox:ox + w]
    dom_probs = None if dom_acc is None else (dom_acc / len(grid.origins)).astype(np.float32)
    return PredictionMap(np.ascontiguousarray(probs.transpose(1, 2, 0)).astype(np.float32), dom_probs)


def predict_image(model, image: np.ndarray, plan: PlanConfig, tta: bool | None = None) -> PredictionMap:
    return sliding_window(image, model, plan.patch_size, plan.step_fraction, plan.sigma_scale,
                          plan.tta if tta is None else tta)


def _comparable_plan(plan: PlanConfig) -> dict:
    d = plan.to_dict()
    d.pop("seed", None)
    return d


def ensemble(fold_models: Sequence, image: np.ndarray, plan: PlanConfig | None = None,
             tta: bool | None = None) -> PredictionMap:
    """Mean of the members' probability maps (softmax averaging).

    Sums are taken in float64 over float32 member maps, so identical members
    reproduce the single-model output bit for bit.
    """
    if not fold_models:
        raise ValueError("ensemble needs at least one model")
    plans = [getattr(m, "plan", None) for m in fold_models]
    known = [p for p in plans if p is not None]
    if known:
        ref = _comparable_plan(known[0])
        if any(_comparable_plan(p) != ref for p in known[1:]):
            raise PlanMismatchError("plan mismatch across checkpoints")
    plan = plan or (known[0] if known else None)
    if plan is None:
        raise ValueError("a plan is required for models without one")
    acc = None
    dom_acc = None
    for m in fold_models:
        pm = predict_image(m, image, plan, tta)
        acc = pm.probs.astype(np.float64) if acc is None else acc + pm.probs
        if pm.domain_probs is not None:
            dom_acc = (pm.domain_probs.astype(np.float64) if dom_acc is None
                       else dom_acc + pm.domain_probs)
    n = len(fold_models)
    return PredictionMap((acc / n).astype(np.float32),
                         None if dom_acc is None else (dom_acc / n).astype(np.float32))


def save_prediction(pred: PredictionMap, out_dir: str | Path, image_id: str,
                    threshold: float | None = None, save_probs: bool = False,
                    class_names: Sequence[str] = ("background", "tumor")) -> Path:
    """Write ``masks/<id>.png`` and optionally ``probs/<id>.bin`` with a JSON sidecar."""
    out_dir = Path(out_dir)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    mask_path = out_dir / "masks" / f"{image_id}.png"
    save_mask(pred.mask(threshold), mask_path)
    if save_probs:
        (out_dir / "probs").mkdir(parents=True, exist_ok=True)
        pred.probs.astype("<f4").tofile(out_dir / "probs" / f"{image_id}.bin")
        names = list(class_names)[:pred.probs.shape[-1]]
        sidecar = {"shape": list(pred.probs.shape), "dtype": "float32", "byte_order": "little",
                   "layout": "HWC", "class_names": names}
        (out_dir / "probs" / f"{image_id}.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return mask_path


def load_probs(path: str | Path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    return np.fromfile(path.with_suffix(".bin"), dtype="<f4").reshape(meta["shape"])
