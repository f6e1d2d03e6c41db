"""Saliency evaluation metrics and batch evaluation.

Location-based metrics (NSS, the AUC family, IG) take a
:class:`~fbsal.data.FixationSet`; distribution-based ones (CC, SIM, KLdiv)
take a ground-truth map of the same shape.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import losses
from .data import FixationSet, find_maps, load_unit_map, read_fixations

EPS = 1e-8
METRICS = ("auc_judd", "auc_borji", "sauc", "nss", "cc", "sim", "kldiv", "ig")
LOCATION_METRICS = {"auc_judd", "auc_borji", "sauc", "nss", "ig"}
DISTRIBUTION_METRICS = {"cc", "sim", "kldiv"}


def _map(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2:
        raise ValueError(f"expected a 2-d map, got shape {P.shape}")
    return P


def _fix_values(P: np.ndarray, fix: FixationSet) -> np.ndarray:
    if len(fix) == 0:
        raise ValueError("empty fixation set")
    if fix.map_shape != P.shape:
        raise ValueError(f"fixations are for a {fix.map_shape} map, prediction is {P.shape}")
    return P[fix.rows, fix.cols]


def zscore(P: np.ndarray, eps: float = EPS) -> np.ndarray:
    c = P - P.mean()
    std = np.sqrt(np.mean(c * c))
    return np.zeros_like(P) if std < eps else c / std


def nss(P, fix: FixationSet) -> float:
    P = _map(P)
    _fix_values(P, fix)
    return float(zscore(P)[fix.rows, fix.cols].mean())


def cc(P, G) -> float:
    return float(losses.pearson(_map(P), _map(G)).item())


def _unit_mass(P: np.ndarray, what: str) -> np.ndarray:
    total = P.sum()
    if not total > 0:
        raise ValueError(f"{what}: map must have positive mass")
    return P / total


def sim(P, G) -> float:
    P, G = _map(P), _map(G)
    if P.shape != G.shape:
        raise ValueError(f"sim: shapes {P.shape} and {G.shape} differ")
    return float(np.minimum(_unit_mass(P, "sim"), _unit_mass(G, "sim")).sum())


def kldiv(P, G) -> float:
    return float(losses.kld_loss(_map(P), _map(G), EPS).item())


def info_gain(P, fix: FixationSet, baseline) -> float:
    """Mean log2 gain of the prediction over a baseline at fixated pixels."""
    if baseline is None:
        raise ValueError("information gain needs a baseline map")
    P, B = _map(P), _map(baseline)
    if P.shape != B.shape:
        raise ValueError(f"info_gain: baseline shape {B.shape} != prediction shape {P.shape}")
    _fix_values(P, fix)
    Ph, Bh = _unit_mass(P, "info_gain prediction"), _unit_mass(B, "info_gain baseline")
    r, c = fix.rows, fix.cols
    return float(np.mean(np.log2(Ph[r, c] + EPS) - np.log2(Bh[r, c] + EPS)))


# ---------------------------------------------------------------- AUC family


def auc_judd(P, fix: FixationSet) -> float:
    """ROC area with one threshold per distinct saliency value at fixations.

    True positives are counted over fixated pixels, false positives over
    the remaining pixels; the curve runs (0,0) -> thresholds -> (1,1) and is
    integrated with trapezoids.  The area is accumulated in integers and
    divided once.
    """
    P = _map(P)
    pos = _fix_values(P, fix)
    n_fix = pos.size
    n_neg = P.size - n_fix
    if n_neg == 0:
        raise ValueError("auc_judd needs at least one non-fixated pixel")
    thresholds = np.unique(pos)[::-1]
    all_sorted = np.sort(P.reshape(-1))
    pos_sorted = np.sort(pos)
    above_all = all_sorted.size - np.searchsorted(all_sorted, thresholds, side="left")
    tp = pos_sorted.size - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = above_all - tp
    tp = np.concatenate(([0], tp, [n_fix])).astype(np.int64)
    fp = np.concatenate(([0], fp, [n_neg])).astype(np.int64)
    twice_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    return twice_area / (2 * n_fix * n_neg)


def roc_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    """P(pos > neg) + 0.5 P(pos == neg), via average ranks."""
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2
    return float(u / (pos.size * neg.size))


def auc_borji(P, fix: FixationSet, n_splits: int = 100, rng: np.random.Generator | None = None) -> float:
    """Mean ROC area against negatives drawn uniformly (with replacement) from all pixels."""
    P = _map(P)
    pos = _fix_values(P, fix)
    rng = rng if rng is not None else np.random.default_rng(0)
    flat = P.reshape(-1)
    scores = [roc_auc(pos, flat[rng.integers(0, flat.size, size=pos.size)]) for _ in range(n_splits)]
    return float(np.mean(scores))


def sauc(
    P, fix: FixationSet, other_fix: FixationSet, n_splits: int = 100, rng: np.random.Generator | None = None
) -> float:
    """Shuffled AUC: negatives drawn (with replacement) from other images' fixations."""
    P = _map(P)
    pos = _fix_values(P, fix)
    if len(other_fix) == 0:
        raise ValueError("sauc needs at least one fixation from other images")
    if other_fix.map_shape != P.shape:
        other_fix = other_fix.rescaled(P.shape)
    neg_pool = P[other_fix.rows, other_fix.cols]
    rng = rng if rng is not None else np.random.default_rng(0)
    scores = [roc_auc(pos, neg_pool[rng.integers(0, neg_pool.size, size=pos.size)]) for _ in range(n_splits)]
    return float(np.mean(scores))


# ---------------------------------------------------------------- batch evaluation


@dataclass
class EvalReport:
    per_image: list[dict]
    aggregate: dict[str, float]
    metadata: dict = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        meta = dict(self.metadata)
        meta["failures"] = self.failures
        return {
            "metadata": meta,
            "aggregate": {k: _sig10(v) for k, v in self.aggregate.items()},
            "per_image": [{k: (_sig10(v) if k != "id" else v) for k, v in row.items()} for row in self.per_image],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())


def _sig10(v: float):
    if v is None or not math.isfinite(v):
        return None
    return float(f"{v:.10g}")


def _other_fixations(fixations: dict[str, FixationSet], image_id: str, shape) -> FixationSet:
    pts = []
    for other_id, fx in fixations.items():
        if other_id != image_id:
            pts += fx.rescaled(shape).points if fx.map_shape != shape else fx.points
    return FixationSet(tuple(pts), shape)


def evaluate_all(
    pred_dir,
    gt_dir=None,
    fix_dir=None,
    metrics: Sequence[str] = ("cc", "sim", "kldiv"),
    baseline=None,
    seed: int = 0,
    n_splits: int = 100,
    metadata: dict | None = None,
    threads: int | None = None,
) -> EvalReport:
    """Evaluate every prediction in ``pred_dir`` against its ground truth.

    Ids missing a counterpart are recorded in ``failures`` and skipped.
    Rows come out in sorted-id order whatever the listing order.
    """
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise ValueError(f"unknown metrics {unknown}; valid names: {', '.join(METRICS)}")
    if "ig" in metrics and baseline is None:
        raise ValueError("metric 'ig' needs a baseline map")
    needs_fix = any(m in LOCATION_METRICS for m in metrics)
    needs_gt = any(m in DISTRIBUTION_METRICS for m in metrics)
    if needs_fix and fix_dir is None:
        raise ValueError("location-based metrics need a fixation directory")
    if needs_gt and gt_dir is None:
        raise ValueError("distribution metrics need a ground-truth directory")
    if isinstance(baseline, (str, os.PathLike)):
        baseline = load_unit_map(baseline)

    preds = find_maps(pred_dir)
    gts = find_maps(gt_dir) if needs_gt else {}
    fix_files = {p.stem: p for p in Path(fix_dir).glob("*.csv")} if needs_fix else {}
    failures: list[dict] = []

    pred_maps = {i: load_unit_map(p) for i, p in sorted(preds.items())}
    fixations: dict[str, FixationSet] = {}
    for i in sorted(fix_files):
        shape = pred_maps[i].shape if i in pred_maps else None
        if shape is None:
            continue
        fixations[i] = read_fixations(fix_files[i], shape)

    def one(image_id: str):
        P = pred_maps[image_id]
        missing = []
        if needs_gt and image_id not in gts:
            missing.append("ground truth")
        if needs_fix and image_id not in fixations:
            missing.append("fixations")
        if missing:
            return None, {"id": image_id, "error": "missing " + " and ".join(missing)}
        try:
            rng_root = np.random.SeedSequence([seed, int.from_bytes(image_id.encode()[:8].ljust(8, b"\0"), "little")])
            borji_rng, sauc_rng = (np.random.default_rng(s) for s in rng_root.spawn(2))
            G = load_unit_map(gts[image_id]) if needs_gt else None
            fx = fixations.get(image_id)
            row = {"id": image_id}
            for m in metrics:
                if m == "nss":
                    row[m] = nss(P, fx)
                elif m == "cc":
                    row[m] = cc(P, G)
                elif m == "sim":
                    row[m] = sim(P, G)
                elif m == "kldiv":
                    row[m] = kldiv(P, G)
                elif m == "auc_judd":
                    row[m] = auc_judd(P, fx)
                elif m == "auc_borji":
                    row[m] = auc_borji(P, fx, n_splits, borji_rng)
                elif m == "sauc":
                    row[m] = sauc(P, fx, _other_fixations(fixations, image_id, P.shape), n_splits, sauc_rng)
                elif m == "ig":
                    row[m] = info_gain(P, fx, baseline)
            return row, None
        except (ValueError, OSError) as exc:
            return None, {"id": image_id, "error": str(exc)}

    ids = sorted(pred_maps)
    threads = threads or int(os.environ.get("SALFB_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, ids))
    else:
        results = [one(i) for i in ids]

    rows = []
    for row, failure in results:
        if row is not None:
            rows.append(row)
        else:
            failures.append(failure)
    for orphan in sorted((set(gts) | set(fix_files)) - set(pred_maps)):
        failures.append({"id": orphan, "error": "missing prediction"})
    aggregate = {m: float(np.mean([r[m] for r in rows])) if rows else float("nan") for m in metrics}
    meta = {"dataset": str(gt_dir or fix_dir), "checkpoint": None, "timestamp": None, "metrics": list(metrics)}
    meta.update(metadata or {})
    return EvalReport(rows, aggregate, meta, failures)
