"""Training loop, model selection, cross-validation and experiment protocols."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Literal, Sequence

import numpy as np
import torch

from .data import (AugmentConfig, CaseData, DatasetManifest, augment, load_cases, make_folds,
                   merge_manifests, patches_to_arrays, sample_minibatch)
from .evaluation import MetricsReport, dice, write_report
from .inference import ensemble, predict_image
from .losses import LossBreakdown, compute_loss
from .model import SegmentationModel, build_model
from .planner import PlanConfig

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "dice_loss", "ce_loss", "domain_loss", "val_dice", "ema_dice",
               "ema_domain_acc", "selected")


class DivergenceError(RuntimeError):
    pass


class ProtocolError(ValueError):
    pass


# ---------------------------------------------------------------------------
# schedule and optimiser
# ---------------------------------------------------------------------------


def poly_lr(epoch: int, total_epochs: int, lr0: float = 0.01, exponent: float = 0.9) -> float:
    if epoch < 0 or epoch > total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr0 * (1 - epoch / total_epochs) ** exponent


@torch.no_grad()
def sgd_nesterov_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None],
                      velocities: Sequence[torch.Tensor], lr: float, momentum: float) -> None:
    """In-place Nesterov update: ``v <- mu v - lr g``, ``theta <- theta + mu v - lr g``.

    Entries whose gradient is ``None`` are left untouched.
    """
    for g in grads:
        if g is not None and not torch.isfinite(g).all():
            raise DivergenceError("divergence: non-finite gradient")
    for p, g, v in zip(params, grads, velocities):
        if g is None:
            continue
        v.mul_(momentum).add_(g, alpha=-lr)
        p.add_(v, alpha=momentum).add_(g, alpha=-lr)


@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 0.0
    velocity: dict[str, torch.Tensor] = field(default_factory=dict)
    ema_dice: float | None = None
    ema_domain_acc: float | None = None
    best_selection_score: float = -math.inf
    steps: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def fresh(cls, model: torch.nn.Module, seed: int) -> TrainState:
        return cls(velocity={n: torch.zeros_like(p) for n, p in model.named_parameters()},
                   rng=np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# epochs
# ---------------------------------------------------------------------------


def train_step(model: SegmentationModel, images: np.ndarray, masks: np.ndarray, domains: np.ndarray,
               plan: PlanConfig, state: TrainState) -> LossBreakdown:
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(images).to(dtype)
    y = torch.from_numpy(masks)
    d = torch.from_numpy(domains) if model.dcac is not None else None
    model.zero_grad(set_to_none=True)
    loss, breakdown = compute_loss(model(x), y, d, plan.domain_loss_weight, plan.dice_eps)
    if not torch.isfinite(loss):
        raise DivergenceError(f"divergence: non-finite loss at epoch {state.epoch}")
    loss.backward()
    named = [(n, p) for n, p in model.named_parameters()]
    grads = [p.grad for _, p in named]
    if plan.grad_clip_norm is not None:
        present = [g for g in grads if g is not None]
        for g in present:
            if not torch.isfinite(g).all():
                raise DivergenceError("divergence: non-finite gradient")
        total = torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in present]))
        if total > plan.grad_clip_norm:
            scale = plan.grad_clip_norm / (float(total) + 1e-6)
            for g in present:
                g.mul_(scale)
    sgd_nesterov_step([p for _, p in named], grads, [state.velocity[n] for n, _ in named],
                      state.lr, plan.momentum)
    state.steps += 1
    return breakdown


def train_epoch(model: SegmentationModel, cases: Sequence[CaseData], plan: PlanConfig,
                state: TrainState) -> tuple[TrainState, LossBreakdown]:
    """One epoch of ``plan.minibatches_per_epoch`` optimiser steps at a fixed learning rate."""
    state.lr = poly_lr(state.epoch, plan.epochs, plan.initial_lr, plan.poly_exponent)
    aug = AugmentConfig.from_plan(plan)
    model.train()
    totals = np.zeros(5)
    for _ in range(plan.minibatches_per_epoch):
        batch = augment(sample_minibatch(cases, plan, state.rng), state.rng, aug)
        b = train_step(model, *patches_to_arrays(batch), plan, state)
        totals += [b.dice_loss, b.ce_loss, b.seg_loss, b.domain_loss, b.total]
    totals /= plan.minibatches_per_epoch
    avg = LossBreakdown(*totals.tolist(), domain_weight=plan.domain_loss_weight)
    return state, avg


# ---------------------------------------------------------------------------
# validation and selection
# ---------------------------------------------------------------------------


def predict_cases(models: Sequence[SegmentationModel], cases: Iterable[CaseData], plan: PlanConfig,
                  tta: bool | None = None):
    for case in cases:
        yield case, ensemble(models, case.image, plan, tta)


def evaluate_cases(models: Sequence[SegmentationModel], cases: Sequence[CaseData], plan: PlanConfig,
                   domain_names: Sequence[str], tta: bool | None = None,
                   metadata: dict[str, Any] | None = None,
                   domain_labels: bool = False) -> tuple[MetricsReport, float | None]:
    """Score each case; domain accuracy is computed when ``domain_labels`` is set."""
    report = MetricsReport(metadata=dict(metadata or {}))
    hits = []
    for case, pred in predict_cases(models, cases, plan, tta):
        report.add(case.image_id, domain_names[case.domain_id], pred.mask(), case.mask)
        if domain_labels and pred.domain_probs is not None:
            hits.append(int(np.argmax(pred.domain_probs)) == case.domain_id)
    return report, (float(np.mean(hits)) if hits else None)


def update_ema(previous: float | None, current: float, alpha: float) -> float:
    return current if previous is None else alpha * previous + (1 - alpha) * current


@dataclass
class ValidationRecord:
    val_dice: float
    domain_acc: float | None
    selection_score: float
    selected: bool


def validate_and_select(model: SegmentationModel, val_cases: Sequence[CaseData], state: TrainState,
                        alpha: float, checkpoint_path: str | Path | None = None,
                        domain_labels: bool = True) -> tuple[TrainState, ValidationRecord]:
    """Update the Dice (and domain-accuracy) EMAs and save a checkpoint on strict improvement."""
    if not val_cases:
        raise ValueError("empty validation set")
    plan = model.plan
    model.eval()
    dices, hits = [], []
    for case in val_cases:
        pred = predict_image(model, case.image, plan, tta=plan.val_tta)
        dices.append(dice(pred.mask(), case.mask))
        if pred.domain_probs is not None and domain_labels:
            hits.append(int(np.argmax(pred.domain_probs)) == case.domain_id)
    val_dice = float(np.mean(dices))
    state.ema_dice = update_ema(state.ema_dice, val_dice, alpha)
    domain_acc = None
    if hits:
        domain_acc = float(np.mean(hits))
        state.ema_domain_acc = update_ema(state.ema_domain_acc, domain_acc, alpha)
        score = (state.ema_dice + state.ema_domain_acc) / 2
    else:
        score = state.ema_dice
    selected = score > state.best_selection_score
    if selected:
        state.best_selection_score = score
        if checkpoint_path is not None:
            model.save(checkpoint_path, meta={"epoch": state.epoch, "selection_score": score})
    return state, ValidationRecord(val_dice, domain_acc, score, selected)


# ---------------------------------------------------------------------------
# full training runs
# ---------------------------------------------------------------------------


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


@dataclass
class TrainResult:
    out_dir: Path
    best_checkpoint: Path | None
    final_checkpoint: Path
    history: list[dict[str, Any]]


def fit(model: SegmentationModel, train_cases: Sequence[CaseData], val_cases: Sequence[CaseData] | None,
        out_dir: str | Path, seed: int, domain_labels: bool = True) -> TrainResult:
    """Train for ``plan.epochs`` epochs, validating after each one when a validation set is given.

    Writes ``train_log.csv``, ``checkpoint_final.ckpt`` and, with validation,
    ``checkpoint_best.ckpt``.
    """
    plan = model.plan
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = TrainState.fresh(model, seed)
    best_path = out_dir / "checkpoint_best.ckpt" if val_cases else None
    history = []
    with open(out_dir / "train_log.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOG_COLUMNS)
        for epoch in range(plan.epochs):
            state.epoch = epoch
            state, losses = train_epoch(model, train_cases, plan, state)
            rec = None
            if val_cases:
                state, rec = validate_and_select(model, val_cases, state, plan.ema_alpha, best_path,
                                                 domain_labels)
            row = {
                "epoch": epoch, "lr": state.lr, "dice_loss": losses.dice_loss, "ce_loss": losses.ce_loss,
                "domain_loss": losses.domain_loss, "val_dice": rec.val_dice if rec else None,
                "ema_dice": state.ema_dice, "ema_domain_acc": state.ema_domain_acc,
                "selected": int(rec.selected) if rec else 0,
            }
            history.append(row)
            writer.writerow([row["epoch"]] + [_fmt(row[c]) for c in LOG_COLUMNS[1:-1]] + [row["selected"]])
            f.flush()
            logger.info("epoch %d lr %.5f seg %.4f dom %.4f val_dice %s", epoch, state.lr,
                        losses.seg_loss, losses.domain_loss, _fmt(row["val_dice"]))
    final_path = out_dir / "checkpoint_final.ckpt"
    model.save(final_path, meta={"epoch": plan.epochs - 1})
    return TrainResult(out_dir, best_path, final_path, history)


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _run_fold(manifest: DatasetManifest, plan: PlanConfig, train_idx: list[int], val_idx: list[int],
              fold: int, seed: int, out_dir: Path, threads: int | None) -> dict[str, Any]:
    if threads is not None:
        torch.set_num_threads(threads)
    s = fold_seed(seed, fold)
    cases = load_cases(manifest)
    train_cases = [cases[i] for i in train_idx]
    val_cases = [cases[i] for i in val_idx]
    model = build_model(plan, seed=s)
    fold_dir = out_dir / f"fold_{fold}"
    result = fit(model, train_cases, val_cases, fold_dir, s)
    best = SegmentationModel.load(result.best_checkpoint)
    report, dom_acc = evaluate_cases([best], val_cases, plan, manifest.domain_names,
                                     metadata={"fold": fold, "split": "validation"},
                                     domain_labels=True)
    report.metadata["domain_accuracy"] = dom_acc
    write_report(report, fold_dir / "report")
    return {"fold": fold, "checkpoint": str(result.best_checkpoint.relative_to(out_dir)),
            "val_seg_score": report.mean_seg_score, "val_domain_accuracy": dom_acc,
            "num_train": len(train_idx), "num_val": len(val_idx)}


@dataclass
class CrossvalResult:
    out_dir: Path
    checkpoints: list[Path]
    fold_reports: list[dict[str, Any]]


def run_crossval(manifest: DatasetManifest, plan: PlanConfig, k: int, seed: int, out_dir: str | Path,
                 jobs: int = 1) -> CrossvalResult:
    """Train one model per fold; each validates on its held-out fold for selection."""
    if k < 2:
        raise ValueError("k must be >= 2")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split = make_folds(manifest, k, seed)
    (out_dir / "folds.json").write_text(json.dumps({
        "k": k, "seed": seed,
        "assignments": [{"image": s.image_id, "domain": s.domain_id, "fold": int(f)}
                        for s, f in zip(manifest.samples, split.fold_assignments)],
    }, indent=2) + "\n")
    args = [(manifest, plan, split.train_indices(i), split.val_indices(i), i, seed, out_dir)
            for i in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_run_fold, *zip(*[a + (1,) for a in args])))
    else:
        reports = [_run_fold(*a, None) for a in args]
    (out_dir / "crossval_summary.json").write_text(json.dumps({"folds": reports}, indent=2) + "\n")
    return CrossvalResult(out_dir, [out_dir / r["checkpoint"] for r in reports], reports)


# ---------------------------------------------------------------------------
# experiment protocols
# ---------------------------------------------------------------------------

ExperimentKind = Literal["cross_domain", "in_domain_holdout", "full_train"]


@dataclass
class ExperimentProtocol:
    kind: ExperimentKind
    sources: list[DatasetManifest]
    eval_manifest: DatasetManifest | None = None
    val_manifest: DatasetManifest | None = None  # seen-domain samples for selection
    holdout_per_domain: int = 10
    folds: int = 0  # >= 2: cross-validate and ensemble the fold models
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("cross_domain", "in_domain_holdout", "full_train"):
            raise ProtocolError(f"unknown experiment kind {self.kind!r}")
        if not self.sources:
            raise ProtocolError("at least one source manifest is required")
        if self.kind == "cross_domain" and self.eval_manifest is None:
            raise ProtocolError("cross_domain needs an evaluation manifest")


def holdout_split(manifest: DatasetManifest, per_domain: int, seed: int) -> tuple[list[int], list[int]]:
    """Randomly hold out ``per_domain`` samples of every domain."""
    rng = np.random.default_rng(seed)
    ids = manifest.domain_ids
    held = []
    for d in range(manifest.num_domains):
        idx = np.flatnonzero(ids == d)
        if len(idx) <= per_domain:
            raise ProtocolError(f"domain {manifest.domain_names[d]} has only {len(idx)} samples")
        held.extend(rng.choice(idx, per_domain, replace=False).tolist())
    held_set = set(held)
    train = [i for i in range(len(manifest)) if i not in held_set]
    return train, sorted(held)


def _check_disjoint(a: DatasetManifest, b: DatasetManifest, what: str) -> None:
    overlap = {s.image_path for s in a.samples} & {s.image_path for s in b.samples}
    if overlap:
        raise ProtocolError(f"overlap between train and {what} sets: {len(overlap)} samples")


def _train_models(train: DatasetManifest, val: DatasetManifest | None, plan: PlanConfig,
                  protocol: ExperimentProtocol, out_dir: Path, jobs: int) -> tuple[list[SegmentationModel], list]:
    if protocol.folds >= 2:
        cv = run_crossval(train, plan, protocol.folds, protocol.seed, out_dir / "crossval", jobs)
        return [SegmentationModel.load(p) for p in cv.checkpoints], []
    model = build_model(plan, seed=fold_seed(protocol.seed, 0))
    val_cases = load_cases(val) if val is not None else None
    domain_labels = val is not None and val.domain_names == train.domain_names
    result = fit(model, load_cases(train), val_cases, out_dir / "model", fold_seed(protocol.seed, 0),
                 domain_labels)
    ckpt = result.best_checkpoint or result.final_checkpoint
    return [SegmentationModel.load(ckpt)], result.history


def run_experiment(protocol: ExperimentProtocol, plan: PlanConfig, out_dir: str | Path,
                   jobs: int = 1) -> MetricsReport:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source = merge_manifests(protocol.sources)
    val = protocol.val_manifest
    if protocol.kind == "cross_domain":
        train, evalm = source, protocol.eval_manifest
    elif protocol.kind == "in_domain_holdout":
        tr_idx, ho_idx = holdout_split(source, protocol.holdout_per_domain, protocol.seed)
        train, evalm = source.subset(tr_idx), source.subset(ho_idx)
    else:
        train, evalm = source, None
    if evalm is not None:
        _check_disjoint(train, evalm, "evaluation")
    if val is not None:
        _check_disjoint(train, val, "validation")
    plan = plan.replace(num_domains=train.num_domains)
    plan.save(out_dir / "plan.json")
    train.save(out_dir / "train_manifest.json")

    models, history = _train_models(train, val, plan, protocol, out_dir, jobs)
    meta: dict[str, Any] = {
        "experiment": protocol.kind, "dcac": plan.dcac_enabled,
        "train_domains": train.domain_names, "num_train": len(train), "seed": protocol.seed,
        "ensemble_size": len(models),
    }
    if val is not None:
        _, dom_acc = evaluate_cases(models, load_cases(val), plan, val.domain_names,
                                    domain_labels=val.domain_names == train.domain_names)
        meta["val_domain_accuracy"] = dom_acc
    if evalm is None:
        meta["training_curves"] = history
        report = MetricsReport(metadata=meta)
    else:
        meta["eval_domains"] = evalm.domain_names
        evalm.save(out_dir / "eval_manifest.json")
        report, _ = evaluate_cases(models, load_cases(evalm), plan, evalm.domain_names, metadata=meta)
    write_report(report, out_dir / "report")
    return report
