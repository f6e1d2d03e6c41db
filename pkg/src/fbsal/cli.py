"""Batch command-line front end.

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data, metrics, pseudo
from . import tensor as T
from .losses import LossWeights, sample_nonfixations
from .network import FeedbackNet, FeedbackNetConfig
from .train import GRADCHECK, TrainingDiverged, batch_loss, stream, train, write_outputs

OK, INVALID, FAILED = 0, 1, 2


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _err(msg: str) -> None:
    print(f"fbsal: {msg}", file=sys.stderr)


def _timestamp():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    return int(epoch) if epoch and epoch.isdigit() else None


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    try:
        cfg = data.load_config(args.config)
    except (data.ConfigError, OSError) as exc:
        raise CommandError(INVALID, f"invalid config: {exc}")
    net_cfg = cfg.net_config()
    if args.no_feedback:
        net_cfg = FeedbackNetConfig(**{**net_cfg.__dict__, "feedback_enabled": False})
    seed = cfg.seed if args.seed is None else args.seed
    if not cfg.data:
        raise CommandError(INVALID, "invalid config: data: path to fixture directory required")
    try:
        samples = data.load_dataset(cfg.data)
    except (OSError, ValueError) as exc:
        raise CommandError(INVALID, f"cannot load training data: {exc}")
    opt = cfg.optimizer
    try:
        result = train(
            samples,
            net_cfg,
            cfg.loss_weights(),
            epochs=args.epochs,
            seed=seed,
            lr=opt.lr,
            momentum=opt.momentum,
            weight_decay=opt.weight_decay,
            batch_size=opt.batch_size,
            lr_decay=opt.lr_decay,
            clip_norm=opt.clip_norm,
            max_steps=args.max_steps,
        )
    except TrainingDiverged as exc:
        raise CommandError(FAILED, f"training failed at step {exc.step}: {exc}")
    ckpt, trace = write_outputs(result, args.out)
    if result.trace:
        first, last = result.trace[0].total, result.trace[-1].total
        print(f"{len(result.trace)} steps, total loss {first:.6g} -> {last:.6g}")
    print(f"checkpoint: {ckpt}\nloss trace: {trace}")
    return OK


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in names if m not in metrics.METRICS]
    if unknown:
        raise CommandError(INVALID, f"unknown metric(s) {', '.join(unknown)}; valid: {', '.join(metrics.METRICS)}")
    if "ig" in names and not args.baseline:
        raise CommandError(INVALID, "metric 'ig' requires --baseline")
    try:
        report = metrics.evaluate_all(
            args.pred,
            args.gt,
            args.fix,
            names,
            baseline=args.baseline,
            seed=args.seed,
            n_splits=args.splits,
            metadata={"checkpoint": args.checkpoint, "timestamp": _timestamp()},
        )
    except ValueError as exc:
        raise CommandError(INVALID, str(exc))
    report.write(args.report)
    width = max(len(m) for m in names)
    for m in names:
        print(f"{m:<{width}}  {report.aggregate[m]:.4f}")
    for f in report.failures:
        _err(f"{f['id']}: {f['error']}")
    if report.failures:
        _err(f"{len(report.failures)} image(s) failed; report has {len(report.per_image)} completed rows")
        return FAILED
    return OK


# ---------------------------------------------------------------- aggregate


def cmd_aggregate(args) -> int:
    dirs = [Path(d) for d in args.inputs.split(",") if d]
    if not dirs:
        raise CommandError(INVALID, "--inputs needs at least one annotator directory")
    for d in dirs:
        if not d.is_dir():
            raise CommandError(INVALID, f"annotator directory {d} does not exist")
    listings = {d: data.find_maps(d) for d in dirs}
    all_ids = sorted(set().union(*listings.values()))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for image_id in all_ids:
        missing = [d.name for d in dirs if image_id not in listings[d]]
        if missing:
            _err(f"warning: {image_id}: no map from annotator(s) {', '.join(missing)}; skipped")
            continue
        try:
            ann = pseudo.load_annotations(dirs, image_id, args.weight)
        except (pseudo.AnnotatorShapeError, data.MapFormatError) as exc:
            _err(str(exc))
            failures += 1
            continue
        for w in pseudo.validate_annotations(ann):
            _err(f"warning: {w.kind}: {w.message}")
        data.write_map(pseudo.aggregate(ann), out / f"{image_id}.pgm", "PGM16")
    if args.manifest:
        try:
            manifest = pseudo.build_manifest(args.images, out, args.split_ratio, args.seed)
        except ValueError as exc:
            raise CommandError(FAILED, f"manifest: {exc}")
        for w in manifest.warnings:
            _err(f"warning: {w}")
        manifest.write(args.manifest)
    if failures:
        _err(f"{failures} image(s) failed")
        return FAILED
    return OK


# ---------------------------------------------------------------- gradcheck


def gradcheck_setup(cfg: data.RunConfig | None, seed: int, n_images: int = 2, hw=(32, 32)):
    """Tiny network in eval mode plus a fixed fixture batch and objective.

    The weights are moved to a point where central differences are
    meaningful. Zero biases put dead channels exactly on a ReLU kink, so
    biases get small random positive values. Head maps with near-zero
    pixels give the KLD term third derivatives of order 1/P^3, so each
    head's output bias is raised until its pre-activation is at least 1
    on the check batch.
    """
    net_cfg = cfg.net_config() if cfg else FeedbackNetConfig()
    weights = cfg.loss_weights() if cfg else LossWeights()
    rng = stream(seed, GRADCHECK)
    samples = [data.synth_sample(rng, hw, id=f"g{i}") for i in range(n_images)]
    net = FeedbackNet(net_cfg, seed=seed)
    for p in net.params:
        if p.name.endswith(".bias"):
            p.data[:] = rng.uniform(0.01, 0.1, size=p.data.shape)
    x = np.stack([s.image for s in samples])
    with T.no_grad():
        for n, feats in net.pathway_features(x).items():
            b1 = net.heads[n][3]
            b1.data += max(0.0, 1.0 - float(net.head_logits(feats, n).data.min()))

    fix = [sample_nonfixations(s.fixations.mask(), stream(seed, GRADCHECK, i)) for i, s in enumerate(samples)]

    def objective():
        return batch_loss(net, samples, fix, weights)[2]

    return net, objective


def cmd_gradcheck(args) -> int:
    cfg = None
    if args.config:
        try:
            cfg = data.load_config(args.config)
        except (data.ConfigError, OSError) as exc:
            raise CommandError(INVALID, f"invalid config: {exc}")
    net, objective = gradcheck_setup(cfg, args.seed, args.images, (args.size, args.size))
    corrupt = {args.corrupt: 2.0} if args.corrupt else None
    if args.corrupt and args.corrupt not in net.named_parameters():
        raise CommandError(INVALID, f"--corrupt: no parameter named {args.corrupt!r}")
    report = T.grad_check(
        objective, net.params, h=args.step, tol=args.tolerance, samples=args.samples,
        rng=np.random.default_rng(args.seed), corrupt=corrupt,
    )
    width = max(len(n) for n in report.errors)
    for name, err in report.errors.items():
        print(f"{name:<{width}}  {err:.3e}  ({report.coordinates[name]} checked, {report.skipped[name]} at kinks)")
    name, worst = report.worst
    print(f"worst: {name} {worst:.3e} (tolerance {args.tolerance:g})")
    if not report.passed:
        raise CommandError(INVALID, f"gradient check failed for {', '.join(report.failures())}")
    return OK


# ---------------------------------------------------------------- fixtures


def cmd_fixtures(args) -> int:
    try:
        ids = data.make_fixtures(args.out, args.n, (args.size, args.size), args.seed, args.sigma)
    except ValueError as exc:
        raise CommandError(INVALID, str(exc))
    print(f"wrote {len(ids)} fixtures to {args.out}")
    return OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbsal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the feedback network on a fixture set")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=1)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--no-feedback", action="store_true", help="train the forward-only ablation")
    t.add_argument("--max-steps", type=int, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score prediction maps")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt")
    e.add_argument("--fix")
    e.add_argument("--metrics", default="cc,sim,kldiv")
    e.add_argument("--baseline")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--splits", type=int, default=100)
    e.add_argument("--checkpoint", default=None, help="checkpoint id recorded in the report")
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("aggregate", help="build pseudo ground truth from annotator maps")
    a.add_argument("--inputs", required=True, help="comma-separated annotator directories")
    a.add_argument("--weight", type=float, default=pseudo.DEFAULT_WEIGHT)
    a.add_argument("--out", required=True)
    a.add_argument("--manifest")
    a.add_argument("--images", default=None, help="image directory for the manifest")
    a.add_argument("--split-ratio", type=float, default=pseudo.DEFAULT_SPLIT)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_aggregate)

    g = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    g.add_argument("--config")
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--images", type=int, default=2)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--samples", type=int, default=64)
    g.add_argument("--step", type=float, default=1e-5)
    g.add_argument("--corrupt", help="debug: double the analytic gradient of this parameter")
    g.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("fixtures", help="write synthetic scenes, fixations and ground truth")
    f.add_argument("--out", required=True)
    f.add_argument("-n", type=int, default=8)
    f.add_argument("--size", type=int, default=32)
    f.add_argument("--seed", type=int, default=1)
    f.add_argument("--sigma", type=float, default=None)
    f.set_defaults(func=cmd_fixtures)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return INVALID if exc.code else OK
    try:
        return args.func(args)
    except CommandError as exc:
        _err(str(exc))
        return exc.code
    except Exception as exc:  # noqa: BLE001
        _err(f"runtime failure: {exc}")
        return FAILED


if __name__ == "__main__":
    sys.exit(main())
