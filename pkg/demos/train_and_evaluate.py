"""Overfit the tiny feedback net on synthetic scenes, then score it.

Trains the full model and the forward-only ablation with identical
settings, writes their fused predictions as SMAP files and prints the
evaluation table for each.

    python3 demos/train_and_evaluate.py [--epochs 250] [--out /tmp/fbsal_demo]
"""

import argparse
import contextlib
import io
import json
from pathlib import Path

import numpy as np

from fbsal import data
from fbsal.cli import main
from fbsal.network import FeedbackNet, FeedbackNetConfig
from fbsal.train import predict


def run(argv):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(argv)
    if code != 0:
        raise SystemExit(f"fbsal {argv[0]} exited with {code}")
    return buf.getvalue()


def main_demo():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=250)
    ap.add_argument("--out", default="/tmp/fbsal_demo")
    args = ap.parse_args()
    out = Path(args.out)

    run(["fixtures", "--out", str(out / "fx"), "-n", "8", "--size", "32", "--seed", "1"])
    cfg = {"seed": 42, "data": "fx", "optimizer": {"lr": 0.04, "batch_size": 4}}
    (out / "cfg.json").write_text(json.dumps(cfg))
    samples = data.load_dataset(out / "fx")
    images = np.stack([s.image for s in samples])

    for name, extra in (("full", []), ("ablation", ["--no-feedback"])):
        run_dir = out / name
        run(["train", "--config", str(out / "cfg.json"), "--out", str(run_dir), "--epochs", str(args.epochs), *extra])
        rows = (run_dir / "loss_trace.csv").read_text().splitlines()[1:]
        first, last = float(rows[0].split(",")[3]), float(rows[-1].split(",")[3])

        net = FeedbackNet(FeedbackNetConfig(feedback_enabled=not extra))
        net.load(run_dir / "checkpoint.sfbn")
        pred_dir = run_dir / "pred"
        pred_dir.mkdir(exist_ok=True)
        for s, p in zip(samples, predict(net, images)):
            data.write_map(p, pred_dir / f"{s.id}.smap")

        table = run(["eval", "--pred", str(pred_dir), "--gt", str(out / "fx" / "maps"), "--fix", str(out / "fx" / "fixations"),
                     "--metrics", "cc,sim,kldiv,nss,auc_judd", "--report", str(run_dir / "report.json")])
        print(f"== {name}: {len(rows)} steps, loss {first:.3f} -> {last:.3f}")
        print(table)


if __name__ == "__main__":
    main_demo()
