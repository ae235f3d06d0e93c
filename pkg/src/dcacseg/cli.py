"""Command-line entry point: ``dcacseg <subcommand> ...``.

Every run writes its artifacts into one directory: ``--out`` when given,
otherwise ``$DCACSEG_OUTPUT_DIR/<subcommand>-<timestamp>`` (default base
``./runs``).  The parsed arguments and resolved plan are echoed to
``config.resolved.json`` in that directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Sequence

import torch

from . import __version__
from .checkpoint import CheckpointError
from .data import (ManifestError, SynthSpec, load_cases, load_image, load_manifest, load_mask,
                   merge_manifests, synth_generate)
from .evaluation import evaluate_masks, write_report
from .inference import PlanMismatchError, ensemble, save_prediction
from .model import SegmentationModel, build_model
from .planner import PRESETS, PlanConfig, PlanError, compute_fingerprint, plan
from .trainer import (DivergenceError, ExperimentProtocol, ProtocolError, fit, fold_seed,
                      run_crossval, run_experiment)

ENV_OUTPUT_DIR = "DCACSEG_OUTPUT_DIR"
EXPECTED_ERRORS = (ManifestError, PlanError, ProtocolError, CheckpointError, PlanMismatchError,
                   DivergenceError, ValueError, OSError)

logger = logging.getLogger("dcacseg")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def run_dir(args: argparse.Namespace) -> Path:
    if args.out is not None:
        out = Path(args.out)
    else:
        base = Path(os.environ.get(ENV_OUTPUT_DIR, "runs"))
        out = base / f"{args.command}-{datetime.now().strftime('%Y%m%d-%H%M%S-%f')}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_resolved(out: Path, args: argparse.Namespace, resolved_plan: PlanConfig | None = None,
                   **extra: Any) -> None:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
           if k != "func"}
    cfg["output_dir"] = str(out)
    if resolved_plan is not None:
        cfg["plan"] = resolved_plan.to_dict()
    cfg.update(extra)
    (out / "config.resolved.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


def parse_overrides(pairs: Sequence[str]) -> dict[str, Any]:
    """``key=value`` pairs; values are parsed as JSON when possible."""
    out: dict[str, Any] = {}
    for pair in pairs:
        if "=" not in pair:
            raise CliError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out[key.strip()] = tuple(value) if isinstance(value, list) else value
    return out


def resolve_plan(args: argparse.Namespace, manifest) -> PlanConfig:
    """Plan from ``--plan`` if given, else from the manifest fingerprint plus preset/flags."""
    overrides: dict[str, Any] = {}
    if getattr(args, "plan", None):
        p = PlanConfig.load(args.plan)
    else:
        overrides.update(PRESETS[args.preset])
        p = None
    if getattr(args, "dcac", False):
        overrides["dcac_enabled"] = True
    overrides.update(parse_overrides(getattr(args, "set", None) or []))
    if manifest is not None:
        overrides["num_domains"] = manifest.num_domains
    if p is None:
        return plan(compute_fingerprint(manifest), overrides)
    try:
        p = p.replace(**overrides)
    except TypeError as exc:
        raise PlanError(str(exc)) from None
    p.validate()
    return p


def load_models(paths: Sequence[str]) -> list[SegmentationModel]:
    return [SegmentationModel.load(p) for p in paths]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    out = run_dir(args)
    spec = SynthSpec(num_domains=args.domains, samples_per_domain=args.per_domain,
                     image_size=args.size)
    manifest = synth_generate(spec, args.seed, out)
    write_resolved(out, args, samples=len(manifest))
    print(out / "manifest.json")
    return 0


def cmd_plan(args: argparse.Namespace) -> int:
    out = run_dir(args)
    manifest = load_manifest(args.manifest)
    p = resolve_plan(args, manifest)
    p.save(out / "plan.json")
    write_resolved(out, args, p)
    print(out / "plan.json")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    out = run_dir(args)
    manifest = load_manifest(args.manifest)
    p = resolve_plan(args, manifest).replace(seed=args.seed)
    val = load_manifest(args.val) if args.val else None
    write_resolved(out, args, p)
    p.save(out / "plan.json")
    s = fold_seed(args.seed, 0)
    model = build_model(p, seed=s)
    domain_labels = val is not None and val.domain_names == manifest.domain_names
    result = fit(model, load_cases(manifest), load_cases(val) if val else None, out, s, domain_labels)
    print(result.best_checkpoint or result.final_checkpoint)
    return 0


def cmd_crossval(args: argparse.Namespace) -> int:
    out = run_dir(args)
    manifest = load_manifest(args.manifest)
    p = resolve_plan(args, manifest).replace(seed=args.seed)
    write_resolved(out, args, p)
    p.save(out / "plan.json")
    res = run_crossval(manifest, p, args.k, args.seed, out, jobs=args.jobs)
    for ckpt in res.checkpoints:
        print(ckpt)
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    out = run_dir(args)
    models = load_models(args.checkpoint)
    if args.manifest:
        items = [(c.image_id, c.image) for c in load_cases(load_manifest(args.manifest))]
    else:
        paths = sorted(Path(args.images).glob("*.png"))
        if not paths:
            raise CliError(f"no .png images in {args.images}")
        items = ((path.stem, load_image(path)) for path in paths)
    write_resolved(out, args, models[0].plan)
    for image_id, image in items:
        pred = ensemble(models, image, tta=args.tta)
        save_prediction(pred, out, image_id, args.threshold, args.save_probs)
    print(out / "masks")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    out = run_dir(args)
    manifest = load_manifest(args.manifest)
    pred_dir = Path(args.pred)
    if (pred_dir / "masks").is_dir():
        pred_dir = pred_dir / "masks"

    def pairs():
        for s in manifest.samples:
            path = pred_dir / f"{s.image_id}.png"
            if not path.exists():
                raise CliError(f"missing prediction for {s.image_id}: {path}")
            yield s.image_id, manifest.domain_names[s.domain_id], load_mask(path), load_mask(s.mask_path)

    report = evaluate_masks(pairs(), metadata={"predictions": str(pred_dir)}, pooled=args.pooled)
    write_report(report, out / "report")
    write_resolved(out, args)
    print(json.dumps({"count": len(report.results), "mean_seg_score": report.mean_seg_score}))
    return 0


def cmd_experiment(args: argparse.Namespace) -> int:
    out = run_dir(args)
    sources = [load_manifest(m) for m in args.source]
    evalm = load_manifest(args.eval) if args.eval else None
    val = load_manifest(args.val) if args.val else None
    p = resolve_plan(args, merge_manifests(sources)).replace(seed=args.seed)
    write_resolved(out, args, p)
    proto = ExperimentProtocol(args.kind, sources, evalm, val, args.holdout, args.folds, args.seed)
    report = run_experiment(proto, p, out, jobs=args.jobs)
    summary = report.summary()
    print(json.dumps({"count": summary["count"], "mean_seg_score": report.mean_seg_score,
                      "val_domain_accuracy": summary["metadata"].get("val_domain_accuracy")}))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, seed_required: bool = False) -> None:
    p.add_argument("--out", help=f"output directory (default: ${ENV_OUTPUT_DIR}/<command>-<timestamp>)")
    p.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0,
                   help="random seed")
    p.add_argument("--threads", type=int, default=1,
                   help="torch intra-op threads; 1 keeps runs bit-reproducible (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_plan_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--plan", help="plan JSON; overrides the fingerprint-derived plan")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk",
                   help="scale preset applied when no --plan is given (default desk)")
    p.add_argument("--dcac", action="store_true", help="enable the domain and content adaptive head")
    p.add_argument("--set", nargs="*", metavar="KEY=VALUE", default=[],
                   help="extra plan overrides, e.g. epochs=10 domain_loss_weight=0.5")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcacseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic multi-domain dataset")
    p.add_argument("--domains", type=int, default=4, help="number of appearance domains")
    p.add_argument("--per-domain", type=int, default=10, help="images per domain")
    p.add_argument("--size", type=int, default=96, help="image side length in pixels")
    _add_common(p, seed_required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("plan", help="fingerprint a dataset and write plan.json")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    _add_plan_args(p)
    _add_common(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="train a single model")
    p.add_argument("--manifest", required=True, help="training manifest JSON")
    p.add_argument("--val", help="validation manifest used for checkpoint selection")
    _add_plan_args(p)
    _add_common(p, seed_required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("crossval", help="k-fold cross-validation training")
    p.add_argument("--manifest", required=True, help="training manifest JSON")
    p.add_argument("--k", type=int, default=5, help="number of folds (default 5)")
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel (default 1)")
    _add_plan_args(p)
    _add_common(p, seed_required=True)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("infer", help="predict masks with one checkpoint or a fold ensemble")
    p.add_argument("--checkpoint", required=True, nargs="+", help="checkpoint file(s)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", help="manifest listing the images to segment")
    src.add_argument("--images", help="directory of .png images to segment")
    p.add_argument("--threshold", type=float, default=None,
                   help="foreground if p(tumor) > threshold (default: argmax)")
    p.add_argument("--tta", dest="tta", action="store_true", default=None, help="force mirror TTA on")
    p.add_argument("--no-tta", dest="tta", action="store_false", help="force mirror TTA off")
    p.add_argument("--save-probs", action="store_true", help="also write float32 probability maps")
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted masks against a manifest's ground truth")
    p.add_argument("--pred", required=True, help="directory of <image_id>.png masks (or its parent)")
    p.add_argument("--manifest", required=True, help="ground-truth manifest JSON")
    p.add_argument("--pooled", action="store_true", help="also report pixel-pooled scores")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run a cross-domain, hold-out or full-train protocol")
    p.add_argument("--kind", required=True, choices=["cross_domain", "in_domain_holdout", "full_train"])
    p.add_argument("--source", required=True, nargs="+", help="source manifest(s); domains are concatenated")
    p.add_argument("--eval", help="evaluation manifest (cross_domain)")
    p.add_argument("--val", help="seen-domain validation manifest for selection")
    p.add_argument("--holdout", type=int, default=10, help="hold-out images per domain (default 10)")
    p.add_argument("--folds", type=int, default=0, help=">= 2 trains a cross-validated ensemble")
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel (default 1)")
    _add_plan_args(p)
    _add_common(p)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except (CliError, *EXPECTED_ERRORS) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"dcacseg {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
