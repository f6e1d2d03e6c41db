"""Training objectives: sFNE, KLD, CC, their hybrid, and deep supervision.

All functions take the prediction as a (differentiable) 2-d :class:`Tensor`
and ground truth as arrays; they return scalar tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    delta: float = 0.1
    eta: float = 0.025
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if not value >= 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {value}")


@dataclass(frozen=True)
class FixationSample:
    """Fixation mask, an equally sized disjoint non-fixation mask, and their counts."""

    F: np.ndarray
    F_bar: np.ndarray
    n_fix: int
    n_nonfix: int
    seed: object = None

    @property
    def N(self) -> int:
        return self.n_fix


def sample_nonfixations(F, rng: np.random.Generator, seed=None) -> FixationSample:
    """Draw as many non-fixation pixels as there are fixations, uniformly without replacement."""
    F = np.asarray(F) > 0
    n = int(F.sum())
    if n == 0:
        raise ValueError("empty fixation map")
    candidates = np.flatnonzero(~F.reshape(-1))
    take = min(n, candidates.size)
    chosen = rng.choice(candidates, size=take, replace=False) if take else np.empty(0, dtype=int)
    F_bar = np.zeros(F.size, dtype=bool)
    F_bar[chosen] = True
    return FixationSample(F.astype(np.float64), F_bar.reshape(F.shape).astype(np.float64), n, take, seed)


def _check_same(P: Tensor, G: np.ndarray, what: str) -> None:
    if P.shape != G.shape:
        raise T.ShapeError(f"{what}: prediction shape {P.shape} != ground truth shape {G.shape}")


def sfne_loss(P, G, sample: FixationSample, alpha: float = 1.0, beta: float = 1.0) -> Tensor:
    P, G = T.as_tensor(P), np.asarray(G, dtype=np.float64)
    _check_same(P, G, "sfne_loss")
    _check_same(P, sample.F, "sfne_loss (fixation mask)")
    Pz = T.zscore(P, EPS)
    Gz = T.zscore(G, EPS).data
    diff = Pz - Gz
    fix = T.tsum((diff * sample.F) ** 2) / sample.n_fix
    if sample.n_nonfix:
        nonfix = T.tsum((diff * sample.F_bar) ** 2) / sample.n_nonfix
    else:
        nonfix = T.Tensor(0.0)
    return alpha * fix + beta * nonfix


def _distribution(P: Tensor, what: str, allow_empty: bool = False) -> Tensor:
    # negative prediction mass is clipped before normalising
    P = T.relu(P)
    total = T.tsum(P)
    if not total.data > 0:
        if allow_empty:
            return P * 0.0
        raise ValueError(f"{what}: map has no positive mass")
    return P / total


def kld_loss(P, G, eps: float = EPS, allow_empty_prediction: bool = False) -> Tensor:
    """sum G^ log(G^/(P^+eps) + eps) with both maps normalised to unit mass.

    An all-zero prediction is rejected unless ``allow_empty_prediction``,
    in which case it is scored as the zero distribution (a dead saliency
    head during training).
    """
    P, G = T.as_tensor(P), T.as_tensor(G)
    if P.shape != G.shape:
        raise T.ShapeError(f"kld_loss: shapes {P.shape} and {G.shape} differ")
    Ph = _distribution(P, "kld_loss prediction", allow_empty_prediction)
    Gh = _distribution(G, "kld_loss ground truth")
    return T.tsum(Gh * T.log(Gh / (Ph + eps) + eps))


def pearson(P, G, eps: float = EPS) -> Tensor:
    P, G = T.as_tensor(P), T.as_tensor(G)
    if P.shape != G.shape:
        raise T.ShapeError(f"pearson: shapes {P.shape} and {G.shape} differ")
    return T.mean(T.zscore(P, eps) * T.zscore(G, eps))


def cc_loss(P, G) -> Tensor:
    return 1.0 - pearson(P, G)


def neg_nss_loss(P, F) -> Tensor:
    """-NSS; kept only to build the comparison objectives of the loss ablation."""
    F = np.asarray(F, dtype=np.float64)
    return -T.tsum(T.zscore(P, EPS) * F) / F.sum()


def hybrid_loss(P, G, sample: FixationSample, weights: LossWeights = LossWeights()) -> Tensor:
    """gamma*KLD + delta*(1 - CC) + eta*sFNE; zero-weight terms are skipped."""
    P = T.as_tensor(P)
    G = np.asarray(G, dtype=np.float64)
    terms = []
    if weights.gamma:
        terms.append(weights.gamma * kld_loss(P, G, allow_empty_prediction=True))
    if weights.delta:
        terms.append(weights.delta * cc_loss(P, G))
    if weights.eta:
        terms.append(weights.eta * sfne_loss(P, G, sample, weights.alpha, weights.beta))
    if not terms:
        return P.sum() * 0.0
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def combine(kld: float, cc_term: float, sfne: float, weights: LossWeights = LossWeights()) -> float:
    """Plain-number form of the hybrid combination."""
    return weights.gamma * kld + weights.delta * cc_term + weights.eta * sfne


def _as_map(x: Tensor) -> Tensor:
    # N=1 x 1 x H x W  ->  H x W
    while x.ndim > 2:
        if x.shape[0] != 1:
            raise T.ShapeError(f"expected a single map, got shape {x.shape}")
        x = x[0]
    return x


def deep_supervision(scores, G, sample: FixationSample, weights: LossWeights = LossWeights()) -> tuple[Tensor, Tensor]:
    """Return (Loss_score, Loss_fuse) for one image.

    ``scores`` is a :class:`~fbsal.network.PathwayScores` (or anything with
    ``heads`` and ``fused``) holding single-image maps.
    """
    heads = [_as_map(s) for s in scores.heads]
    if not heads:
        raise ValueError("no saliency heads to supervise")
    loss_score = hybrid_loss(heads[0], G, sample, weights)
    for s in heads[1:]:
        loss_score = loss_score + hybrid_loss(s, G, sample, weights)
    loss_score = loss_score / len(heads)
    loss_fuse = hybrid_loss(_as_map(scores.fused), G, sample, weights)
    return loss_score, loss_fuse


def total_loss(scores, G, sample: FixationSample, weights: LossWeights = LossWeights()) -> Tensor:
    loss_score, loss_fuse = deep_supervision(scores, G, sample, weights)
    return weights.lambda1 * loss_score + weights.lambda2 * loss_fuse
