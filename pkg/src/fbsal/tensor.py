"""Dense tensors with reverse-mode autodiff and an SGD-with-momentum optimizer.

Every value in the network and the losses is a :class:`Tensor` wrapping a
numpy array.  Operations executed while gradient recording is enabled link
their output to their inputs; :func:`backward` walks that graph in reverse
topological order (the :class:`Tape`) and accumulates ``.grad`` on every
tensor that requires it.
"""

from __future__ import annotations

import contextlib
import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import fftconvolve

DTYPE = np.float64

# kernels with at least this many taps go through the FFT convolution path
FFT_MIN_TAPS = 121

_grad_enabled = True
_kink_log: list | None = None


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the active set of every relu/minimum evaluated inside the block.

    Two evaluations whose logs differ lie on opposite sides of a kink, so a
    finite difference between them does not estimate a derivative.
    """
    global _kink_log
    prev = _kink_log
    _kink_log = log = []
    try:
        yield log
    finally:
        _kink_log = prev


def _note_kink(mask: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(np.packbits(mask))


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=DTYPE):
        self.data = np.array(data, dtype=dtype) if not isinstance(data, np.ndarray) or data.dtype != dtype else data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf tensor with its momentum buffer."""

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True)
        self.name = name
        self.momentum_buffer = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _make(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
        "pow",
    )


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    _note_kink(mask)
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def minimum(a, b) -> Tensor:
    """Elementwise min; at ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    _note_kink(take_a)
    return _make(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
        "minimum",
    )


# ---------------------------------------------------------------- reductions / shape


def tsum(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    n = a.size
    return _make(
        np.asarray(a.data.mean()),
        (a,),
        lambda g: (np.broadcast_to(g / n, a.shape).copy(),),
        "mean",
    )


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for i, t in enumerate(tensors[1:], 1):
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise ShapeError(f"concat: tensor {i} has shape {t.shape}, incompatible with {ref} off axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def stack_scalars(values: Sequence[Tensor]) -> Tensor:
    return concat([reshape(as_tensor(v), (1,)) for v in values], axis=0)


# ---------------------------------------------------------------- network ops


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    a = as_tensor(a)
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit generator")
    mask = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


def zscore(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Standardize over all cells with the population std; constant input maps to zeros."""
    a = as_tensor(a)
    if a.size == 0:
        raise ValueError("zscore of an empty tensor")
    centered = a - mean(a)
    std = sqrt(mean(centered * centered))
    if std.data < eps:
        return centered * 0.0
    return centered / std


@functools.lru_cache(maxsize=64)
def _interp_matrix(n_out: int, n_in: int, mode: str) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    if mode == "nearest":
        src = (np.arange(n_out) * n_in) // n_out
        m[np.arange(n_out), src] = 1.0
    elif mode == "bilinear":
        # half-pixel centres, edge clamped
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
        np.add.at(m, (np.arange(n_out), hi), frac)
    else:
        raise ValueError(f"unknown upsampling mode {mode!r}")
    m.flags.writeable = False
    return m


def upsample(a: Tensor, out_h: int, out_w: int, mode: str = "nearest") -> Tensor:
    """Upsample the last two axes of an N×C×H×W tensor.

    Nearest mode maps output cell (y, x) to input cell
    (floor(y*H/out_h), floor(x*W/out_w)).
    """
    a = as_tensor(a)
    h, w = a.shape[-2:]
    if out_h < h or out_w < w:
        raise ShapeError(f"upsample cannot shrink {h}x{w} to {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return a
    rows = _interp_matrix(out_h, h, mode)
    cols = _interp_matrix(out_w, w, mode)
    out = rows @ a.data @ cols.T
    return _make(out, (a,), lambda g: (rows.T @ g @ cols,), f"upsample_{mode}")


def upsample_nearest(a: Tensor, out_h: int, out_w: int) -> Tensor:
    return upsample(a, out_h, out_w, "nearest")


def _conv_shapes(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> tuple[int, int]:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, wc, kh, kw = w.shape
    if wc != c:
        raise ShapeError(f"conv2d: weight expects {wc} input channels, input has {c}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}"
        )
    return (h + 2 * padding - kh) // stride + 1, (wd + 2 * padding - kw) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of an N×C×H×W input with an F×C×kh×kw weight."""
    x, weight = as_tensor(x), as_tensor(weight)
    ho, wo = _conv_shapes(x.data, weight.data, stride, padding)
    f, c, kh, kw = weight.shape
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (f,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {f} filters")
    p = padding
    if p:
        # np.pad is slow for small arrays; this runs in every conv
        xpad = np.zeros(x.shape[:2] + (x.shape[2] + 2 * p, x.shape[3] + 2 * p))
        xpad[:, :, p : p + x.shape[2], p : p + x.shape[3]] = x.data
    else:
        xpad = x.data
    use_fft = stride == 1 and kh * kw >= FFT_MIN_TAPS

    if use_fft:
        # out[n,f] = sum_c corr(xpad[n,c], w[f,c])
        wflip = weight.data[:, :, ::-1, ::-1]
        out = fftconvolve(xpad[:, None], wflip[None], mode="valid", axes=(-2, -1)).sum(axis=2)
    else:
        n = xpad.shape[0]
        windows = sliding_window_view(xpad, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        # im2col as N x (C*kh*kw) x (Ho*Wo), so the product lands in N x F x Ho*Wo order
        cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
        wmat = weight.data.reshape(f, c * kh * kw)
        out = (wmat @ cols).reshape(n, f, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if use_fft:
            gw = fftconvolve(xpad[:, None], g[:, :, None, ::-1, ::-1], mode="valid", axes=(-2, -1)).sum(axis=0)
            gxpad = fftconvolve(g[:, :, None], weight.data[None], mode="full", axes=(-2, -1)).sum(axis=1)
        else:
            gmat = g.reshape(g.shape[0], f, ho * wo)
            gw = np.einsum("nfp,nkp->fk", gmat, cols).reshape(weight.shape)
            gcols = (wmat.T @ gmat).reshape(g.shape[0], c, kh, kw, ho, wo)
            gxpad = np.zeros_like(xpad)
            for i in range(kh):
                for j in range(kw):
                    gxpad[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
        gx = gxpad[:, :, p : p + x.shape[2], p : p + x.shape[3]] if p else gxpad
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward, "conv2d")


# ---------------------------------------------------------------- autodiff


@dataclass
class Tape:
    """Tensors of one graph in topological order (inputs before outputs)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor) -> Tape:
    """Accumulate d(root)/d(t) into ``t.grad`` for every tensor reachable from root."""
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root does not depend on any tensor requiring grad")
    tape = Tape.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return tape


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """v <- momentum*v + (g + wd*w); w <- w - lr*v; then clear grads."""
    for p in params:
        g = p.grad if p.grad is not None else 0.0
        p.momentum_buffer *= momentum
        p.momentum_buffer += g + weight_decay * p.data
        p.data -= lr * p.momentum_buffer
        p.grad = None


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Rescale grads so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    params = [p for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if max_norm > 0 and norm > max_norm:
        for p in params:
            p.grad = p.grad * (max_norm / norm)
    return norm


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float
    coordinates: dict[str, int]
    skipped: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    def failures(self) -> list[str]:
        return [n for n, e in self.errors.items() if not e < self.tolerance]


class NonDeterministicError(RuntimeError):
    pass


def _same_side(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    tol: float = 1e-4,
    samples: int = 64,
    rng: np.random.Generator | None = None,
    corrupt: dict[str, float] | None = None,
    floor: float | None = None,
    skip_kinks: bool = True,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` with central differences.

    ``samples`` coordinates per tensor are checked (all of them when the
    tensor is smaller).  With ``skip_kinks`` a coordinate whose +h and -h
    evaluations switch any relu/minimum branch is discarded and another
    one drawn; the discards are counted in ``report.skipped``.
    ``corrupt`` scales the analytic gradient of named parameters, which is
    only useful to test the checker itself.

    The relative error is ``|a - n| / max(|a|, |n|, floor)``.  Roundoff
    alone puts about ``eps * |f| / h`` of noise into a central difference,
    so by default ``floor`` is 1e4 times that: smaller gradients are
    compared at the resolution a difference quotient can actually reach.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    with no_grad():
        first, second = f().item(), f().item()
    if first != second:
        raise NonDeterministicError(f"objective differs between two evaluations: {first!r} vs {second!r}")
    if floor is None:
        floor = 1e4 * np.finfo(np.float64).eps * max(abs(first), 1.0) / h

    zero_grad(params)
    backward(f())
    analytic = {}
    for i, p in enumerate(params):
        name = p.name or f"param{i}"
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        analytic[name] = g * (corrupt or {}).get(name, 1.0)
    zero_grad(params)

    errors, counts, skipped = {}, {}, {}
    with no_grad():
        for i, p in enumerate(params):
            name = p.name or f"param{i}"
            flat = p.data.reshape(-1)
            a_flat = analytic[name].reshape(-1)
            worst, checked, dropped = 0.0, 0, 0
            for idx in rng.permutation(flat.size):
                if checked == samples:
                    break
                orig = flat[idx]
                flat[idx] = orig + h
                with record_kinks() as side_p:
                    fp = f().item()
                flat[idx] = orig - h
                with record_kinks() as side_m:
                    fm = f().item()
                flat[idx] = orig
                if skip_kinks and not _same_side(side_p, side_m):
                    dropped += 1
                    continue
                numeric = (fp - fm) / (2 * h)
                a = a_flat[idx]
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
                checked += 1
            errors[name] = worst
            counts[name] = checked
            skipped[name] = dropped
    return GradCheckReport(errors, tol, counts, skipped)


def kaiming_uniform(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)
