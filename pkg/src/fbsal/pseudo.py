"""Pseudo ground truth from several model-annotators' predictions.

The aggregated map for one image is ``g(sum_j alpha_j * s_j)`` with ``g``
a min-max normalisation (or, optionally, unit-mass normalisation).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .data import find_maps, load_unit_map, minmax

DEFAULT_WEIGHT = 0.2
# 150,000 training / 26,880 validation images
DEFAULT_SPLIT = 150_000 / 176_880


class AnnotatorShapeError(ValueError):
    def __init__(self, image_id: str, annotator: str, shape, expected):
        super().__init__(f"{image_id}: annotator {annotator!r} map has shape {shape}, expected {expected}")
        self.image_id = image_id
        self.annotator = annotator


@dataclass
class AnnotationSet:
    image_id: str
    annotator_maps: list[np.ndarray]
    annotator_ids: list[str]
    weights: list[float] | float = DEFAULT_WEIGHT

    def __post_init__(self):
        if not self.annotator_maps:
            raise ValueError(f"{self.image_id}: no annotator maps")
        if len(self.annotator_ids) != len(self.annotator_maps):
            raise ValueError(f"{self.image_id}: {len(self.annotator_ids)} ids for {len(self.annotator_maps)} maps")
        self.annotator_maps = [np.asarray(m, dtype=np.float64) for m in self.annotator_maps]
        shape = self.annotator_maps[0].shape
        for aid, m in zip(self.annotator_ids, self.annotator_maps):
            if m.shape != shape:
                raise AnnotatorShapeError(self.image_id, aid, m.shape, shape)
        if np.isscalar(self.weights):
            self.weights = [float(self.weights)] * len(self.annotator_maps)
        if len(self.weights) != len(self.annotator_maps):
            raise ValueError(f"{self.image_id}: {len(self.weights)} weights for {len(self.annotator_maps)} maps")

    @property
    def shape(self) -> tuple[int, int]:
        return self.annotator_maps[0].shape


def aggregate(annotations: AnnotationSet, norm: str = "minmax") -> np.ndarray:
    total = np.zeros(annotations.shape)
    for w, m in zip(annotations.weights, annotations.annotator_maps):
        total += w * m
    if norm == "minmax":
        return minmax(total)
    if norm == "sum":
        s = total.sum()
        return total / s if s > 0 else np.zeros_like(total)
    raise ValueError(f"unknown normalisation {norm!r}")


class AnnotationWarning(NamedTuple):
    kind: str  # zero-map | constant-map | nan | negative-cc
    annotators: tuple[str, ...]
    message: str


def validate_annotations(annotations: AnnotationSet) -> list[AnnotationWarning]:
    warnings = []
    usable = {}
    for aid, m in zip(annotations.annotator_ids, annotations.annotator_maps):
        if np.isnan(m).any():
            warnings.append(AnnotationWarning("nan", (aid,), f"{annotations.image_id}: {aid} has NaN cells"))
            continue
        if not m.any():
            warnings.append(AnnotationWarning("zero-map", (aid,), f"{annotations.image_id}: {aid} is all zero"))
            continue
        if m.max() == m.min():
            warnings.append(AnnotationWarning("constant-map", (aid,), f"{annotations.image_id}: {aid} is constant"))
            continue
        usable[aid] = m
    for (a, ma), (b, mb) in itertools.combinations(usable.items(), 2):
        r = np.corrcoef(ma.reshape(-1), mb.reshape(-1))[0, 1]
        if r < 0:
            warnings.append(
                AnnotationWarning("negative-cc", (a, b), f"{annotations.image_id}: CC({a}, {b}) = {r:.4f} < 0")
            )
    return warnings


# ---------------------------------------------------------------- manifests


@dataclass
class DatasetManifest:
    entries: list[dict]
    warnings: list[str] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, int]:
        return {s: sum(e["split"] == s for e in self.entries) for s in ("train", "val")}

    def to_json(self) -> str:
        return json.dumps({"entries": self.entries, "counts": self.counts}, indent=2) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())


def split_ids(ids: Sequence[str], ratio: float, seed: int) -> tuple[list[str], list[str]]:
    if not 0 <= ratio <= 1:
        raise ValueError(f"split ratio must be in [0, 1], got {ratio}")
    order = sorted(ids)
    perm = np.random.default_rng(seed).permutation(len(order))
    n_train = int(round(ratio * len(order)))
    shuffled = [order[i] for i in perm]
    return sorted(shuffled[:n_train]), sorted(shuffled[n_train:])


def _image_files(image_dir) -> dict[str, str]:
    out = {}
    for p in sorted(Path(image_dir).iterdir()):
        if p.is_file():
            out.setdefault(p.name.split(".")[0], str(p))
    return out


def build_manifest(image_dir, map_dir, split_ratio: float = DEFAULT_SPLIT, seed: int = 0) -> DatasetManifest:
    maps = {i: str(p) for i, p in find_maps(map_dir).items()}
    images = _image_files(image_dir) if image_dir is not None else {i: None for i in maps}
    common = sorted(set(images) & set(maps))
    if not common:
        raise ValueError(f"no ids shared between {image_dir} and {map_dir}")
    warnings = [f"{i}: image without pseudo map, excluded" for i in sorted(set(images) - set(maps))]
    warnings += [f"{i}: pseudo map without image, excluded" for i in sorted(set(maps) - set(images))]
    train, val = split_ids(common, split_ratio, seed)
    split_of = {i: "train" for i in train} | {i: "val" for i in val}
    entries = [{"image": images[i], "pseudo": maps[i], "split": split_of[i]} for i in common]
    return DatasetManifest(entries, warnings)


def mean_distribution(map_dir) -> np.ndarray:
    """Per-pixel mean of every map in the directory, min-max normalised."""
    paths = find_maps(map_dir)
    if not paths:
        raise ValueError(f"no maps in {map_dir}")
    maps = [load_unit_map(p) for _, p in sorted(paths.items())]
    shape = maps[0].shape
    acc = np.zeros(shape)
    for m in maps:
        acc += resize_nearest(m, shape)
    return minmax(acc / len(maps))


def resize_nearest(m: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = m.shape
    H, W = shape
    if (h, w) == (H, W):
        return m
    rows = np.arange(H) * h // H
    cols = np.arange(W) * w // W
    return m[rows[:, None], cols[None, :]]


def load_annotations(annotator_dirs: Sequence, image_id: str, weights) -> AnnotationSet:
    maps, ids = [], []
    for d in annotator_dirs:
        path = find_maps(d)[image_id]
        maps.append(load_unit_map(path))
        ids.append(Path(d).name)
    return AnnotationSet(image_id, maps, ids, weights)
