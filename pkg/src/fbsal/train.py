"""SGD training loop for the feedback network.

Randomness is split into independent streams derived from one root seed:
weight init, dropout masks (per step), non-fixation draws (per epoch and
image) and batch order (per epoch).  Any one of them can be reproduced
without replaying the others.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Sample
from .losses import LossWeights, deep_supervision, sample_nonfixations
from .metrics import cc
from .network import FeedbackNet, FeedbackNetConfig, PathwayScores

INIT, DROPOUT, NONFIX, ORDER, GRADCHECK = range(5)


def stream(seed: int, purpose: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, purpose, *keys])


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


@dataclass
class TraceRow:
    step: int
    loss_score: float
    loss_fuse: float
    total: float


@dataclass
class TrainResult:
    net: FeedbackNet
    trace: list[TraceRow] = field(default_factory=list)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss_score", "loss_fuse", "total"])
        for r in self.trace:
            w.writerow([r.step, repr(r.loss_score), repr(r.loss_fuse), repr(r.total)])
        return buf.getvalue()


def image_scores(scores: PathwayScores, i: int) -> PathwayScores:
    return PathwayScores({n: s[i] for n, s in scores.S.items()}, scores.fused[i])


def batch_loss(
    net: FeedbackNet,
    batch: Sequence[Sample],
    samples,
    weights: LossWeights,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    """Mean (Loss_score, Loss_fuse, total) over a batch."""
    x = np.stack([s.image for s in batch])
    scores = net.run(x, training=training, rng=rng)
    ls_terms, lf_terms = [], []
    for i, (s, fs) in enumerate(zip(batch, samples)):
        ls, lf = deep_supervision(image_scores(scores, i), s.gt, fs, weights)
        ls_terms.append(ls)
        lf_terms.append(lf)
    n = len(batch)
    loss_score = T.tsum(T.stack_scalars(ls_terms)) / n
    loss_fuse = T.tsum(T.stack_scalars(lf_terms)) / n
    total = weights.lambda1 * loss_score + weights.lambda2 * loss_fuse
    return loss_score, loss_fuse, total


def train(
    samples: Sequence[Sample],
    net_cfg: FeedbackNetConfig,
    weights: LossWeights = LossWeights(),
    epochs: int = 1,
    seed: int = 0,
    lr: float = 4e-2,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    batch_size: int = 10,
    lr_decay: float = 0.9,
    max_steps: int | None = None,
    net: FeedbackNet | None = None,
    clip_norm: float = 5.0,
) -> TrainResult:
    """Momentum SGD over ``epochs`` passes; the gradient norm is clipped at ``clip_norm`` (0 disables)."""
    net = net or FeedbackNet(net_cfg, seed=int(stream(seed, INIT).integers(2**63)))
    result = TrainResult(net)
    step = 0
    for epoch in range(epochs):
        epoch_lr = lr * lr_decay**epoch
        order = stream(seed, ORDER, epoch).permutation(len(samples))
        for start in range(0, len(order), batch_size):
            if max_steps is not None and step >= max_steps:
                return result
            idx = order[start : start + batch_size]
            batch = [samples[i] for i in idx]
            fix_samples = [
                sample_nonfixations(samples[i].fixations.mask(), stream(seed, NONFIX, epoch, int(i)), (seed, epoch, int(i)))
                for i in idx
            ]
            try:
                ls, lf, total = batch_loss(net, batch, fix_samples, weights, True, stream(seed, DROPOUT, step))
            except ValueError as exc:
                raise TrainingDiverged(step, float("nan")) from exc
            if not math.isfinite(total.item()):
                raise TrainingDiverged(step, total.item())
            T.backward(total)
            T.clip_grad_norm(net.params, clip_norm)
            T.sgd_step(net.params, epoch_lr, momentum, weight_decay)
            result.trace.append(TraceRow(step, ls.item(), lf.item(), total.item()))
            step += 1
    return result


def predict(net: FeedbackNet, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Eval-mode fused maps for an N x 3 x H x W stack."""
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(net.run(images[start : start + batch_size]).fused.data[:, 0])
    return np.concatenate(out)


def mean_cc(net: FeedbackNet, samples: Sequence[Sample]) -> float:
    preds = predict(net, np.stack([s.image for s in samples]))
    return float(np.mean([cc(p, s.gt) for p, s in zip(preds, samples)]))


def write_outputs(result: TrainResult, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, trace = out / "checkpoint.sfbn", out / "loss_trace.csv"
    result.net.save(ckpt)
    trace.write_text(result.trace_csv())
    return ckpt, trace
