"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every real-valued quantity in the package (features, logits, losses) lives
in a Tensor: a contiguous row-major float64 buffer plus an optional
gradient buffer of the same shape. Operations executed while a Tape is
active record a local backward rule; calling backward() on a scalar result
replays the tape in reverse creation order (which is a topological order by
construction). A tape is single-use and rebuilt each training step.

There is no broadcasting beyond multiplication by a Python scalar: at the
scales this package runs at, explicit reshapes are cheap and remove a whole
class of silent shape bugs.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "DomainError",
    "TapeError",
    "Tensor",
    "Tape",
    "as_tensor",
    "constant",
    "parameter",
    "apply_elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "log",
    "softplus",
    "matmul",
    "affine",
    "transpose2d",
    "reshape",
    "concat",
    "take",
    "sum_all",
    "mean_all",
    "pad_chw",
    "zero_interleave_chw",
    "avg_pool_chw",
    "resize_bilinear",
    "backward",
    "grad_check",
    "zero_grads",
    "set_debug_checks",
]


class AutodiffError(Exception):
    """Base class for tensor/tape contract violations."""


class ShapeError(AutodiffError):
    pass


class DomainError(AutodiffError):
    """Raised when an op receives values outside its mathematical domain."""


class TapeError(AutodiffError):
    pass


_tls = threading.local()

# When True, every op output is scanned for NaN/Inf. Off by default; the
# property-test suite switches it on.
_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations for one reverse-mode pass.

    Entries are appended in execution order, so every operand of entry k was
    produced by an earlier entry or is a leaf. One backward pass per tape;
    reset() clears the record so the object can be reused.
    """

    def __init__(self) -> None:
        self._entries: list[tuple[Tensor, Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def reset(self) -> None:
        self._entries.clear()
        self._consumed = False


@contextmanager
def _suspend_tapes():
    """Run a block with no active tape (used for finite-difference evals)."""
    stack = _tape_stack()
    saved, stack[:] = stack[:], []
    try:
        yield
    finally:
        stack[:] = saved


class Tensor:
    """Row-major float64 array with optional derivative tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def grad_array(self) -> np.ndarray:
        """Gradient buffer, treating never-touched as zeros."""
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _make(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    """Wrap an op result, recording `rule` on the active tape if needed.

    `rule(out_grad)` must return an iterable of (input_tensor, grad_array)
    pairs; grads are accumulated only into inputs that require them.
    """
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise DomainError("non-finite values in op output")
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape = _active_tape()
        if tape is not None:
            tape._entries.append((out, rule))
            out._tape = tape
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g is None or not t.requires_grad:
        return
    # rebind instead of += : adopted arrays may be shared between rules,
    # and rebinding keeps accumulation alias-safe without zero-fill
    t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad ancestor of a scalar loss.

    A loss with no recorded tape (a constant chain) is a valid no-op: all
    gradients are identically zero. Replaying an already-consumed tape is an
    error.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        return
    if tape._consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    for out, rule in reversed(tape._entries):
        if out.grad is None:
            continue
        for t, g in rule(out.grad):
            _accumulate(t, g)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{name}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: ((a, g), (b, g)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: ((a, g), (b, -g)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: ((a, g * bd), (b, g * ad)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: ((a, g * c),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0.0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: ((a, g * pos),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(s, (a,), lambda g: ((a, g * s * (1.0 - s)),))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: ((a, g / a.data),))


def softplus(a) -> Tensor:
    """log(1 + e^x), computed in the overflow-free form."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(out, (a,), lambda g: ((a, g * s),))


_ELEMENTWISE = {
    "add": lambda a, b=None, c=None: add(a, b),
    "sub": lambda a, b=None, c=None: sub(a, b),
    "mul": lambda a, b=None, c=None: mul(a, b),
    "relu": lambda a, b=None, c=None: relu(a),
    "sigmoid": lambda a, b=None, c=None: sigmoid(a),
    "log": lambda a, b=None, c=None: log(a),
    "softplus": lambda a, b=None, c=None: softplus(a),
    "scale": lambda a, b=None, c=None: scale(a, c),
}


def apply_elementwise(kind: str, a, b=None, c: float | None = None) -> Tensor:
    """Dispatch an elementwise op by name (binary ops need equal shapes)."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(a, b, c)


# ---------------------------------------------------------------------------
# Linear algebra and structure ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul needs 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b),
                 lambda g: ((a, g @ bd.T), (b, ad.T @ g)))


def affine(x, w, b) -> Tensor:
    """x @ w + b with the (1, out) bias broadcast over rows; the one
    composite op the tape carries, because linear layers dominate op count."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.shape != (1, w.data.shape[1]):
        raise ShapeError(f"affine: {x.data.shape} @ {w.data.shape} + {b.data.shape}")
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"affine: inner dims {x.data.shape} x {w.data.shape}")
    xd, wd = x.data, w.data
    return _make(xd @ wd + b.data, (x, w, b),
                 lambda g: ((x, g @ wd.T), (w, xd.T @ g),
                            (b, g.sum(axis=0, keepdims=True))))


def transpose2d(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose2d needs a 2-D operand")
    return _make(np.ascontiguousarray(a.data.T), (a,),
                 lambda g: ((a, np.ascontiguousarray(g.T)),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape {a.data.shape} -> {shape}")
    src_shape = a.data.shape
    return _make(a.data.reshape(shape), (a,),
                 lambda g: ((a, g.reshape(src_shape)),))


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        out = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append((p, np.ascontiguousarray(g[tuple(idx)])))
        return out

    return _make(data, parts, rule)


def take(a, indices) -> Tensor:
    """Gather a.flat[indices]; the result has the index array's shape."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    data = a.data.reshape(-1)[idx]
    flat_idx = idx.reshape(-1)

    def rule(g):
        # bincount is the vectorized scatter-add
        ga = np.bincount(flat_idx, weights=g.reshape(-1), minlength=a.data.size)
        return ((a, ga.reshape(a.data.shape)),)

    return _make(data, (a,), rule)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.array([a.data.sum()]), (a,),
                 lambda g: ((a, np.full_like(a.data, g.reshape(-1)[0])),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _make(np.array([a.data.mean()]), (a,),
                 lambda g: ((a, np.full_like(a.data, g.reshape(-1)[0] / n)),))


# ---------------------------------------------------------------------------
# Spatial ops on (C, H, W) maps
# ---------------------------------------------------------------------------


def _check_chw(a: Tensor, name: str) -> None:
    if a.data.ndim != 3:
        raise ShapeError(f"{name} needs a (C, H, W) operand, got {a.data.shape}")


def pad_chw(a, pad_h: int, pad_w: int) -> Tensor:
    a = as_tensor(a)
    _check_chw(a, "pad_chw")
    data = np.pad(a.data, ((0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    h, w = a.data.shape[1:]

    def rule(g):
        return ((a, np.ascontiguousarray(g[:, pad_h:pad_h + h, pad_w:pad_w + w])),)

    return _make(data, (a,), rule)


def zero_interleave_chw(a, stride: int) -> Tensor:
    """Place x[c, i, j] at out[c, stride*i, stride*j] in a zero canvas of
    (C, stride*H, stride*W); the adjoint of strided subsampling."""
    a = as_tensor(a)
    _check_chw(a, "zero_interleave_chw")
    c, h, w = a.data.shape
    s = int(stride)
    data = np.zeros((c, s * h, s * w), dtype=np.float64)
    data[:, ::s, ::s] = a.data

    def rule(g):
        return ((a, np.ascontiguousarray(g[:, ::s, ::s])),)

    return _make(data, (a,), rule)


def avg_pool_chw(a, k: int) -> Tensor:
    a = as_tensor(a)
    _check_chw(a, "avg_pool_chw")
    c, h, w = a.data.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool_chw: {h}x{w} not divisible by {k}")
    data = a.data.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))

    def rule(g):
        up = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / float(k * k)
        return ((a, up),)

    return _make(data, (a,), rule)


_RESIZE_PLANS: dict[tuple[int, int, int, int], tuple] = {}


def _axis_plan(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corner-aligned source indices/weights for one axis."""
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(src).astype(np.intp), max(n_in - 2, 0))
    t = src - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, t


def _resize_plan(h: int, w: int, oh: int, ow: int):
    key = (h, w, oh, ow)
    plan = _RESIZE_PLANS.get(key)
    if plan is None:
        y0, y1, ty = _axis_plan(h, oh)
        x0, x1, tx = _axis_plan(w, ow)
        idx = [
            (y0[:, None] * w + x0[None, :]).reshape(-1),
            (y0[:, None] * w + x1[None, :]).reshape(-1),
            (y1[:, None] * w + x0[None, :]).reshape(-1),
            (y1[:, None] * w + x1[None, :]).reshape(-1),
        ]
        wts = [
            ((1 - ty)[:, None] * (1 - tx)[None, :]).reshape(-1),
            ((1 - ty)[:, None] * tx[None, :]).reshape(-1),
            (ty[:, None] * (1 - tx)[None, :]).reshape(-1),
            (ty[:, None] * tx[None, :]).reshape(-1),
        ]
        plan = (idx, wts)
        _RESIZE_PLANS[key] = plan
    return plan


def bilinear_resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-array bilinear resize; shares the plan with the tape op."""
    c, h, w = arr.shape
    idx, wts = _resize_plan(h, w, out_h, out_w)
    flat = arr.reshape(c, h * w)
    out = np.zeros((c, out_h * out_w), dtype=np.float64)
    for i, wt in zip(idx, wts):
        out += flat[:, i] * wt[None, :]
    return out.reshape(c, out_h, out_w)


def resize_bilinear(a, out_h: int, out_w: int) -> Tensor:
    """Differentiable corner-aligned bilinear resize of a (C, H, W) map."""
    a = as_tensor(a)
    _check_chw(a, "resize_bilinear")
    if out_h < 1 or out_w < 1:
        raise ShapeError("resize_bilinear: zero-sized output")
    c, h, w = a.data.shape
    idx, wts = _resize_plan(h, w, out_h, out_w)
    data = bilinear_resize_array(a.data, out_h, out_w)

    def rule(g):
        g2 = g.reshape(c, out_h * out_w)
        ga = np.zeros((c, h * w), dtype=np.float64)
        for i, wt in zip(idx, wts):
            contrib = g2 * wt[None, :]
            for ch in range(c):
                ga[ch] += np.bincount(i, weights=contrib[ch], minlength=h * w)
        return ((a, ga.reshape(c, h, w)),)

    return _make(data, (a,), rule)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |cd|).

    `f` must be scalar-valued and re-evaluable; x.data is perturbed in place
    during the finite-difference sweep and restored afterwards, so closures
    that read `x` (or hold it as a model parameter) are both fine.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    x.grad = None
    with Tape():
        y = f(x)
        if y.data.size != 1:
            raise ShapeError("grad_check: f returned a non-scalar")
        backward(y)
    analytic = x.grad_array().reshape(-1).copy()
    x.grad = None

    flat = x.data.reshape(-1)
    worst = 0.0
    with _suspend_tapes():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(x).item()
            flat[i] = orig - eps
            down = f(x).item()
            flat[i] = orig
            cd = (up - down) / (2.0 * eps)
            err = abs(analytic[i] - cd) / max(1.0, abs(cd))
            if err > worst:
                worst = err
    return worst
