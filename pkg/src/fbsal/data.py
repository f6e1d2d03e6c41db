"""Map and fixation file formats, fixation blurring, synthetic fixtures, run config.

SMAP layout: ``b"SMAP"``, u32 height, u32 width (little-endian), then
height*width little-endian float32 values in row-major order.  PGM files
are read in both P2 (ASCII) and P5 (binary) forms and written as P5.
"""

from __future__ import annotations

import csv
import io
import json
import re
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SMAP_MAGIC = b"SMAP"
MAP_SUFFIXES = (".smap", ".pgm")


class MapFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = path
        self.offset = offset


@dataclass
class MapFile:
    format: str  # PGM8 | PGM16 | SMAP
    values: np.ndarray
    maxval: int | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def to_unit(self) -> np.ndarray:
        """Real-valued map; PGM integers are scaled into [0, 1]."""
        if self.format == "SMAP":
            return self.values.astype(np.float64)
        return self.values.astype(np.float64) / self.maxval


# ---------------------------------------------------------------- SMAP / PGM


def _read_smap(buf: bytes, path) -> MapFile:
    if len(buf) < 12:
        raise MapFormatError(path, len(buf), f"truncated header: expected 12 bytes, got {len(buf)}")
    h, w = struct.unpack_from("<II", buf, 4)
    expected = 12 + 4 * h * w
    if len(buf) != expected:
        raise MapFormatError(
            path, min(len(buf), expected), f"expected {expected} bytes for {h}x{w} map, got {len(buf)}"
        )
    values = np.frombuffer(buf, dtype="<f4", offset=12).reshape(h, w).astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise MapFormatError(path, 12, "non-finite value in SMAP data")
    return MapFile("SMAP", values)


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*")


def _pgm_tokens(buf: bytes, pos: int, count: int, path) -> tuple[list[int], int]:
    out = []
    for _ in range(count):
        m = _TOKEN.match(buf, pos)
        pos = m.end()
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise MapFormatError(path, start, "expected an integer in PGM header")
        out.append(int(buf[start:pos]))
    return out, pos


def _read_pgm(buf: bytes, path) -> MapFile:
    magic = buf[:2]
    if magic not in (b"P2", b"P5"):
        raise MapFormatError(path, 0, f"bad magic {magic!r}")
    (w, h, maxval), pos = _pgm_tokens(buf, 2, 3, path)
    if w < 1 or h < 1:
        raise MapFormatError(path, pos, f"invalid dimensions {w}x{h}")
    if not 0 < maxval <= 65535:
        raise MapFormatError(path, pos, f"maxval {maxval} outside 1..65535")
    if magic == b"P5":
        if pos >= len(buf) or not buf[pos : pos + 1].isspace():
            raise MapFormatError(path, pos, "expected a single whitespace byte before raster")
        pos += 1
        nbytes = 2 if maxval > 255 else 1
        need = w * h * nbytes
        have = len(buf) - pos
        if have < need:
            raise MapFormatError(path, len(buf), f"truncated raster: expected {need} bytes, got {have}")
        if have > need:
            raise MapFormatError(path, pos + need, f"{have - need} trailing bytes after raster")
        dtype = ">u2" if nbytes == 2 else "u1"
        values = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos).reshape(h, w).astype(np.int64)
    else:
        values_list, end = _pgm_tokens(buf, pos, w * h, path) if len(buf) > pos else ([], pos)
        if len(values_list) != w * h:
            raise MapFormatError(path, end, f"expected {w * h} samples, got {len(values_list)}")
        if buf[end:].strip():
            raise MapFormatError(path, end, "trailing data after raster")
        values = np.array(values_list, dtype=np.int64).reshape(h, w)
    if values.max() > maxval:
        raise MapFormatError(path, pos, f"sample value {values.max()} exceeds maxval {maxval}")
    return MapFile("PGM16" if maxval > 255 else "PGM8", values, maxval)


def _parse(buf: bytes, path) -> MapFile:
    if buf[:4] == SMAP_MAGIC:
        return _read_smap(buf, path)
    if buf[:2] in (b"P2", b"P5"):
        try:
            return _read_pgm(buf, path)
        except MapFormatError:
            raise
        except (IndexError, ValueError) as exc:
            raise MapFormatError(path, len(buf), f"malformed PGM: {exc}") from None
    raise MapFormatError(path, 0, f"unrecognised magic {buf[:4]!r}")


def read_map(path) -> MapFile:
    return _parse(Path(path).read_bytes(), path)


def parse_map(buf: bytes, name: str = "<bytes>") -> MapFile:
    return _parse(buf, name)


def encode_map(m, format: str = "SMAP") -> bytes:
    """Serialize a MapFile, or a real array (PGM formats quantize from [0, 1])."""
    if isinstance(m, MapFile):
        if format == m.format and format != "SMAP":
            values, maxval = m.values, m.maxval
            return _encode_pgm(values, maxval)
        m = m.to_unit()
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"maps must be 2-d, got shape {arr.shape}")
    if format == "SMAP":
        if not np.all(np.isfinite(arr)):
            raise ValueError("SMAP values must be finite")
        h, w = arr.shape
        return SMAP_MAGIC + struct.pack("<II", h, w) + arr.astype("<f4").tobytes()
    if format in ("PGM8", "PGM16"):
        maxval = 255 if format == "PGM8" else 65535
        return _encode_pgm(quantize(arr, maxval), maxval)
    raise ValueError(f"unknown map format {format!r}")


def _encode_pgm(values: np.ndarray, maxval: int) -> bytes:
    h, w = values.shape
    dtype = ">u2" if maxval > 255 else "u1"
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + values.astype(dtype).tobytes()


def quantize(arr: np.ndarray, maxval: int) -> np.ndarray:
    return np.rint(np.clip(arr, 0.0, 1.0) * maxval).astype(np.int64)


def write_map(m, path, format: str = "SMAP") -> None:
    Path(path).write_bytes(encode_map(m, format))


def load_unit_map(path) -> np.ndarray:
    return read_map(path).to_unit()


def find_maps(directory) -> dict[str, Path]:
    """Map files in ``directory`` keyed by id (file name up to the first dot)."""
    out = {}
    for p in sorted(Path(directory).iterdir()):
        if p.is_file() and p.suffix.lower() in MAP_SUFFIXES:
            out.setdefault(p.name.split(".")[0], p)
    return out


# ---------------------------------------------------------------- fixations


@dataclass(frozen=True)
class FixationSet:
    points: tuple[tuple[int, int], ...]
    map_shape: tuple[int, int]

    def __post_init__(self):
        h, w = self.map_shape
        pts = sorted({(int(r), int(c)) for r, c in self.points})
        for r, c in pts:
            if not (0 <= r < h and 0 <= c < w):
                raise ValueError(f"fixation ({r}, {c}) outside {h}x{w} map")
        object.__setattr__(self, "points", tuple(pts))
        object.__setattr__(self, "map_shape", (int(h), int(w)))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def rows(self) -> np.ndarray:
        return np.array([p[0] for p in self.points], dtype=int)

    @property
    def cols(self) -> np.ndarray:
        return np.array([p[1] for p in self.points], dtype=int)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.map_shape)
        if self.points:
            m[self.rows, self.cols] = 1.0
        return m

    @classmethod
    def from_mask(cls, mask) -> FixationSet:
        mask = np.asarray(mask)
        return cls(tuple(zip(*np.nonzero(mask > 0))), mask.shape)

    def rescaled(self, shape: tuple[int, int]) -> FixationSet:
        h, w = self.map_shape
        H, W = shape
        return FixationSet(tuple((r * H // h, c * W // w) for r, c in self.points), shape)


class FixationFormatError(ValueError):
    pass


def parse_fixations(text: str, shape: tuple[int, int], name: str = "<text>") -> FixationSet:
    lines = text.splitlines()
    if not lines or lines[0].strip().replace(" ", "") != "row,col":
        raise FixationFormatError(f"{name}: line 1: expected header 'row,col'")
    h, w = shape
    pts = []
    for lineno, row in enumerate(csv.reader(io.StringIO("\n".join(lines[1:]))), start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 2:
            raise FixationFormatError(f"{name}: line {lineno}: expected 2 fields, got {len(row)}")
        try:
            r, c = int(row[0].strip()), int(row[1].strip())
        except ValueError:
            raise FixationFormatError(f"{name}: line {lineno}: non-integer coordinate {row!r}") from None
        if not (0 <= r < h and 0 <= c < w):
            raise FixationFormatError(f"{name}: line {lineno}: ({r}, {c}) out of bounds for {h}x{w}")
        pts.append((r, c))
    return FixationSet(tuple(pts), (h, w))


def read_fixations(path, shape: tuple[int, int]) -> FixationSet:
    return parse_fixations(Path(path).read_text(), shape, str(path))


def write_fixations(fix: FixationSet, path) -> None:
    lines = ["row,col"] + [f"{r},{c}" for r, c in fix.points]
    Path(path).write_text("\n".join(lines) + "\n")


def fixations_to_saliency(fix: FixationSet, sigma: float, normalize: bool = True) -> np.ndarray:
    """Sum of unit-mass Gaussians at the fixations, cut off beyond 3 sigma."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if len(fix) == 0:
        raise ValueError("empty fixation set")
    h, w = fix.map_shape
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.zeros((h, w))
    norm = 1.0 / (2 * np.pi * sigma**2)
    for r, c in fix.points:
        d2 = (yy - r) ** 2 + (xx - c) ** 2
        out += np.where(d2 <= (3 * sigma) ** 2, norm * np.exp(-d2 / (2 * sigma**2)), 0.0)
    return minmax(out) if normalize else out


def minmax(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def default_sigma(h: int) -> float:
    return h / 10.0


# ---------------------------------------------------------------- synthetic fixtures


@dataclass
class Sample:
    id: str
    image: np.ndarray  # 3 x H x W
    gt: np.ndarray  # H x W
    fixations: FixationSet


def synth_sample(rng: np.random.Generator, hw: tuple[int, int], sigma: float | None = None, id: str = "") -> Sample:
    h, w = hw
    sigma = sigma if sigma is not None else default_sigma(h)
    n_blobs = int(rng.integers(1, 6))
    margin = max(2, h // 8)
    centers = set()
    while len(centers) < n_blobs:
        centers.add((int(rng.integers(margin, h - margin)), int(rng.integers(margin, w - margin))))
    centers = sorted(centers)
    yy, xx = np.mgrid[0:h, 0:w]
    image = 0.15 * rng.random((3, h, w)) + 0.1
    for r, c in centers:
        radius = rng.uniform(1.0, 2.5) * h / 32
        color = rng.uniform(0.5, 1.0, size=3)
        blob = np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2 * radius**2))
        image += color[:, None, None] * blob
    image = np.clip(image, 0.0, 1.0)
    fix = FixationSet(tuple(centers), (h, w))
    return Sample(id, image, fixations_to_saliency(fix, sigma), fix)


def make_fixtures(out_dir, n_images: int, hw, seed: int, sigma: float | None = None) -> list[str]:
    """Write ``n_images`` synthetic scenes with fixations and blurred ground truth.

    Layout: ``images/<id>.{r,g,b}.smap``, ``maps/<id>.smap``,
    ``fixations/<id>.csv``.
    """
    hw = (hw, hw) if isinstance(hw, int) else tuple(hw)
    if hw[0] % 16 or hw[1] % 16:
        raise ValueError(f"fixture size must be divisible by 16, got {hw}")
    out = Path(out_dir)
    for sub in ("images", "maps", "fixations"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ids = []
    for i in range(n_images):
        s = synth_sample(rng, hw, sigma, id=f"img{i:04d}")
        for ch, plane in zip("rgb", s.image):
            write_map(plane, out / "images" / f"{s.id}.{ch}.smap")
        write_map(s.gt, out / "maps" / f"{s.id}.smap")
        write_fixations(s.fixations, out / "fixations" / f"{s.id}.csv")
        ids.append(s.id)
    return ids


def read_image(image_dir, image_id: str) -> np.ndarray:
    planes = [load_unit_map(Path(image_dir) / f"{image_id}.{ch}.smap") for ch in "rgb"]
    return np.stack(planes)


def image_ids(image_dir) -> list[str]:
    return sorted({p.name.split(".")[0] for p in Path(image_dir).glob("*.r.smap")})


def load_dataset(root) -> list[Sample]:
    root = Path(root)
    samples = []
    for image_id in image_ids(root / "images"):
        gt = load_unit_map(root / "maps" / f"{image_id}.smap")
        fix = read_fixations(root / "fixations" / f"{image_id}.csv", gt.shape)
        samples.append(Sample(image_id, read_image(root / "images", image_id), gt, fix))
    if not samples:
        raise FileNotFoundError(f"no images found under {root / 'images'}")
    return samples


# ---------------------------------------------------------------- run configuration


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


@dataclass
class OptimizerConfig:
    lr: float = 4e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 10
    lr_decay: float = 0.9
    clip_norm: float = 5.0  # 0 disables


@dataclass
class RunConfig:
    net: dict = field(default_factory=dict)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss: dict = field(default_factory=dict)
    seed: int = 0
    data: str = ""

    def net_config(self):
        from .network import FeedbackNetConfig

        return FeedbackNetConfig(**self.net)

    def loss_weights(self):
        from .losses import LossWeights

        return LossWeights(**self.loss)


_NET_KEYS = {
    "block_channels": list,
    "block_layers": int,
    "input_channels": int,
    "head_mid_channels": int,
    "smoothing_kernel": int,
    "fixed_width": (int, type(None)),
    "dropout_p": float,
    "feedback_enabled": bool,
    "feedback_mode": str,
    "upsample_mode": str,
    "smoothing_sigma": float,
    "standardize_input": bool,
}
_LOSS_KEYS = ("alpha", "beta", "gamma", "delta", "eta", "lambda1", "lambda2")
_TOP_KEYS = ("net", "optimizer", "loss", "seed", "data")


def _number(value, path: str, integer: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if integer and not float(value).is_integer():
        raise ConfigError(path, f"expected an integer, got {value!r}")
    return int(value) if integer else float(value)


def _no_unknown(section: dict, allowed: Iterable[str], prefix: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(prefix or "<root>", "expected an object")
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{prefix}.{key}" if prefix else key, "unknown key")


def parse_config(doc: dict) -> RunConfig:
    """Validate a config document; any problem raises ConfigError naming the field."""
    _no_unknown(doc, _TOP_KEYS, "")
    net = {}
    raw_net = doc.get("net", {})
    _no_unknown(raw_net, _NET_KEYS, "net")
    for key, value in raw_net.items():
        path = f"net.{key}"
        if key == "block_channels":
            if not isinstance(value, list) or len(value) != 5:
                raise ConfigError(path, "expected a list of 5 positive integers")
            value = [_number(v, f"{path}[{i}]", integer=True) for i, v in enumerate(value)]
            if any(v < 1 for v in value):
                raise ConfigError(path, "widths must be positive")
        elif key in ("feedback_enabled", "standardize_input"):
            if not isinstance(value, bool):
                raise ConfigError(path, "expected true or false")
        elif key in ("feedback_mode", "upsample_mode"):
            allowed = ("replace", "add") if key == "feedback_mode" else ("nearest", "bilinear")
            if value not in allowed:
                raise ConfigError(path, f"expected one of {allowed}")
        elif key == "fixed_width":
            if value is not None:
                value = _number(value, path, integer=True)
                if value < 1:
                    raise ConfigError(path, "must be positive")
        elif key == "smoothing_sigma":
            value = _number(value, path)
            if value <= 0:
                raise ConfigError(path, "must be positive")
        elif key == "dropout_p":
            value = _number(value, path)
            if not 0 <= value < 1:
                raise ConfigError(path, "must be in [0, 1)")
        else:
            value = _number(value, path, integer=True)
            if value < 1:
                raise ConfigError(path, "must be positive")
            if key == "smoothing_kernel" and value % 2 == 0:
                raise ConfigError(path, "must be odd")
        net[key] = value

    opt = OptimizerConfig()
    raw_opt = doc.get("optimizer", {})
    _no_unknown(raw_opt, [f.name for f in fields(OptimizerConfig)], "optimizer")
    for key, value in raw_opt.items():
        path = f"optimizer.{key}"
        value = _number(value, path, integer=key == "batch_size")
        if key in ("lr", "batch_size") and value <= 0:
            raise ConfigError(path, "must be positive")
        if key in ("momentum", "lr_decay") and not 0 <= value <= 1:
            raise ConfigError(path, "must be in [0, 1]")
        if key in ("weight_decay", "clip_norm") and value < 0:
            raise ConfigError(path, "must be nonnegative")
        setattr(opt, key, value)

    loss = {}
    raw_loss = doc.get("loss", {})
    _no_unknown(raw_loss, _LOSS_KEYS, "loss")
    for key, value in raw_loss.items():
        value = _number(value, f"loss.{key}")
        if value < 0:
            raise ConfigError(f"loss.{key}", "must be nonnegative")
        loss[key] = value

    cfg = RunConfig(net=net, optimizer=opt, loss=loss)
    if "seed" in doc:
        cfg.seed = _number(doc["seed"], "seed", integer=True)
        if cfg.seed < 0:
            raise ConfigError("seed", "must be nonnegative")
    if "data" in doc:
        if not isinstance(doc["data"], str):
            raise ConfigError("data", "expected a path string")
        cfg.data = doc["data"]
    try:
        cfg.net_config()
    except ValueError as exc:
        raise ConfigError("net", str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from None
    cfg = parse_config(doc)
    if cfg.data and not Path(cfg.data).is_absolute():
        cfg.data = str((Path(path).parent / cfg.data).resolve())
    return cfg
