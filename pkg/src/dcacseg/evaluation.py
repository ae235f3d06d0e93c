"""Segmentation metrics, per-image score, reports and challenge ranking arithmetic."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

CSV_COLUMNS = ("image_id", "domain", "dice", "jaccard", "seg_score")


def _counts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p)), int(np.count_nonzero(g))


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both masks are empty."""
    inter, n_p, n_g = _counts(pred, gt)
    if n_p + n_g == 0:
        return 1.0
    return 2.0 * inter / (n_p + n_g)


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    inter, n_p, n_g = _counts(pred, gt)
    union = n_p + n_g - inter
    if union == 0:
        return 1.0
    return inter / union


def seg_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean of Dice and Jaccard, the per-image score used for ranking."""
    return (dice(pred, gt) + jaccard(pred, gt)) / 2.0


@dataclass(frozen=True)
class ChallengeWeights:
    preliminary_weight: float = 0.2
    final_weight: float = 0.8

    def __post_init__(self) -> None:
        if abs(self.preliminary_weight + self.final_weight - 1.0) > 1e-12:
            raise ValueError("challenge weights must sum to 1")


def challenge_score(prelim: float, final: float, w: ChallengeWeights = ChallengeWeights()) -> float:
    for v in (prelim, final):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"score {v} outside [0, 1]")
    return w.preliminary_weight * prelim + w.final_weight * final


@dataclass
class ImageResult:
    image_id: str
    domain: str
    dice: float
    jaccard: float
    seg_score: float


@dataclass
class MetricsReport:
    results: list[ImageResult] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)
    pooled: bool = False
    pooled_counts: tuple[int, int, int] = (0, 0, 0)  # intersection, |P|, |G| summed over images

    def add(self, image_id: str, domain: str, pred: np.ndarray, gt: np.ndarray) -> ImageResult:
        r = ImageResult(image_id, domain, dice(pred, gt), jaccard(pred, gt), seg_score(pred, gt))
        self.results.append(r)
        inter, n_p, n_g = _counts(pred, gt)
        i0, p0, g0 = self.pooled_counts
        self.pooled_counts = (i0 + inter, p0 + n_p, g0 + n_g)
        return r

    def summary(self) -> dict[str, Any]:
        n = len(self.results)
        out: dict[str, Any] = {"count": n, "metadata": self.metadata, "pooled": self.pooled,
                               "pooled_counts": list(self.pooled_counts)}
        if self.pooled:
            inter, n_p, n_g = self.pooled_counts
            d = 1.0 if n_p + n_g == 0 else 2.0 * inter / (n_p + n_g)
            union = n_p + n_g - inter
            j = 1.0 if union == 0 else inter / union
            out["mean"] = {"dice": d, "jaccard": j, "seg_score": (d + j) / 2.0}
        elif n:
            out["mean"] = {k: float(np.mean([getattr(r, k) for r in self.results]))
                           for k in ("dice", "jaccard", "seg_score")}
        else:
            out["mean"] = {}
        per_domain: dict[str, list[float]] = {}
        for r in self.results:
            per_domain.setdefault(r.domain, []).append(r.seg_score)
        out["per_domain_seg_score"] = {k: float(np.mean(v)) for k, v in sorted(per_domain.items())}
        return out

    @property
    def mean_seg_score(self) -> float:
        return self.summary()["mean"].get("seg_score", float("nan"))


def write_report(report: MetricsReport, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (one row per image) and ``<path>.json`` (summary).

    Floats are written with ``repr`` so the CSV reads back exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = path.with_suffix(".csv"), path.with_suffix(".json")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for r in report.results:
            writer.writerow([r.image_id, r.domain, repr(r.dice), repr(r.jaccard), repr(r.seg_score)])
    json_path.write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def read_report(path: str | Path) -> MetricsReport:
    path = Path(path)
    summary = json.loads(path.with_suffix(".json").read_text())
    report = MetricsReport(metadata=summary.get("metadata", {}), pooled=summary.get("pooled", False),
                           pooled_counts=tuple(summary.get("pooled_counts", (0, 0, 0))))
    with open(path.with_suffix(".csv"), newline="") as f:
        for row in csv.DictReader(f):
            report.results.append(ImageResult(row["image_id"], row["domain"], float(row["dice"]),
                                              float(row["jaccard"]), float(row["seg_score"])))
    return report


def evaluate_masks(pairs: Iterable[tuple[str, str, np.ndarray, np.ndarray]],
                   metadata: dict[str, Any] | None = None, pooled: bool = False) -> MetricsReport:
    """Build a report from ``(image_id, domain, pred, gt)`` tuples."""
    report = MetricsReport(metadata=dict(metadata or {}), pooled=pooled)
    for image_id, domain, pred, gt in pairs:
        report.add(image_id, domain, pred, gt)
    return report


def compare_reports(reports: dict[str, MetricsReport], path: str | Path | None = None) -> dict[str, Any]:
    """Side-by-side mean and per-domain seg scores of several runs on the same evaluation set."""
    table = {
        name: {"mean_seg_score": r.mean_seg_score, "count": len(r.results),
               "per_domain_seg_score": r.summary()["per_domain_seg_score"],
               "val_domain_accuracy": r.metadata.get("val_domain_accuracy")}
        for name, r in reports.items()
    }
    if path is not None:
        Path(path).write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    return table
