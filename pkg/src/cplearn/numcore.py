"""Dense float64 tensors with taped reverse-mode gradients.

Design notes:

* Values are immutable: the wrapped numpy buffer is frozen on construction,
  so a recorded tape can never be invalidated by in-place edits.
* Every operation validates that its output is finite and raises
  ``NumericError`` otherwise; training steps fail loudly instead of
  propagating NaNs.
* The tape is implicit: each result keeps references to its parents plus a
  closure that scatters the upstream gradient into them.  ``backward()`` on
  a scalar root walks the graph in reverse topological order.
* Internal precision is float64 regardless of what files store; gradient
  checking needs the headroom.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, NumericError

Array = np.ndarray

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _check_finite(arr: Array, op: str) -> None:
    # any NaN/Inf poisons the sum; one reduction beats an isfinite pass and
    # desk-scale magnitudes cannot overflow a float64 accumulator
    if not np.isfinite(arr.sum()):
        raise NumericError(f"non-finite values produced by '{op}'")


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Immutable dense value, optionally tracked for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)  # always copy caller data
        _check_finite(arr, "tensor")
        arr.flags.writeable = False
        self.data = arr
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, data: Array, parents: tuple["Tensor", ...], op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        arr = np.asarray(data, dtype=np.float64)
        if arr.base is not None:  # own the buffer before freezing it
            arr = arr.copy()
        arr.flags.writeable = False
        out.data = arr
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents if out.requires_grad else ()
        out._backward = None
        out._op = op
        return out

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    # -- gradient plumbing ---------------------------------------------

    def _accumulate(self, grad: Array) -> None:
        _check_finite(grad, f"grad[{self._op}]")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + grad

    def clear_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Propagate gradients from this scalar to every tracked ancestor."""
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar root")
        if not self.requires_grad:
            raise ContractError("backward() on an untracked tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data, rng: np.random.Generator | None = None) -> Tensor:
    """Leaf tensor marked trainable."""
    return Tensor(data, requires_grad=True)


def uniform_fan_in(shape: Sequence[int], rng: np.random.Generator) -> Tensor:
    """Symmetric uniform init with bound 1/sqrt(fan_in); fan_in = first extent."""
    bound = 1.0 / math.sqrt(shape[0])
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True)


# -- elementwise arithmetic (numpy broadcasting rules) -------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._from_op(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw(g: Array) -> None:
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))
        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._from_op(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _bw(g: Array) -> None:
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._from_op(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw(g: Array) -> None:
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))
        out._backward = _bw
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(all="ignore"):  # _from_op raises on non-finite results
        quotient = a.data / b.data
    out = Tensor._from_op(quotient, (a, b), "div")
    if out.requires_grad:
        def _bw(g: Array) -> None:
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        out._backward = _bw
    return out


# -- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    out = Tensor._from_op(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _bw(g: Array) -> None:
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        out._backward = _bw
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D operand, got {a.shape}")
    out = Tensor._from_op(a.data.T, (a,), "transpose")
    if out.requires_grad:
        def _bw(g: Array) -> None:
            a._accumulate(g.T)
        out._backward = _bw
    return out


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = Tensor._from_op(a.data.reshape(tuple(shape)), (a,), "reshape")
    if out.requires_grad:
        def _bw(g: Array) -> None:
            a._accumulate(g.reshape(a.shape))
        out._backward = _bw
    return out


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DegenerateInputError("concat of zero tensors")
    out = Tensor._from_op(np.concatenate([p.data for p in parts], axis=axis),
                          tuple(parts), "concat")
    if out.requires_grad:
        sizes = [p.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        def _bw(g: Array) -> None:
            for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if part.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    part._accumulate(g[tuple(idx)])
        out._backward = _bw
    return out


# -- reductions ------------------------------------------------------------


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def _bw(g: Array) -> None:
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape).copy())
            else:
                expanded = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(expanded, a.shape).copy())
        out._backward = _bw
    return out


def tmean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- nonlinearities ----------------------------------------------------------


def texp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor._from_op(np.exp(a.data), (a,), "exp")
    if out.requires_grad:
        def _bw(g: Array) -> None:
            a._accumulate(g * out.data)
        out._backward = _bw
    return out


def tlog(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(all="ignore"):
        logged = np.log(a.data)
    out = Tensor._from_op(logged, (a,), "log")
    if out.requires_grad:
        def _bw(g: Array) -> None:
            a._accumulate(g / a.data)
        out._backward = _bw
    return out


def tsqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(all="ignore"):
        rooted = np.sqrt(a.data)
    out = Tensor._from_op(rooted, (a,), "sqrt")
    if out.requires_grad:
        def _bw(g: Array) -> None:
            a._accumulate(g * 0.5 / out.data)
        out._backward = _bw
    return out


def gelu(a) -> Tensor:
    """tanh-approximation GELU; smooth everywhere, so finite differences agree."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out = Tensor._from_op(0.5 * x * (1.0 + t), (a,), "gelu")
    if out.requires_grad:
        def _bw(g: Array) -> None:
            d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
            deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
            a._accumulate(g * deriv)
        out._backward = _bw
    return out


# -- normalizations -----------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``; rows sum to one."""
    a = as_tensor(a)
    if a.data.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._from_op(p, (a,), "softmax")
    if out.requires_grad:
        def _bw(g: Array) -> None:
            inner = (g * p).sum(axis=axis, keepdims=True)
            a._accumulate(p * (g - inner))
        out._backward = _bw
    return out


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError("logsumexp over an empty axis")
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_data = np.squeeze(m + np.log(s), axis=axis)
    out = Tensor._from_op(out_data, (a,), "logsumexp")
    if out.requires_grad:
        soft = e / s
        def _bw(g: Array) -> None:
            a._accumulate(np.expand_dims(g, axis) * soft)
        out._backward = _bw
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm dims disagree: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor._from_op(y * gain.data + bias.data, (x, gain, bias), "layer_norm")
    if out.requires_grad:
        def _bw(g: Array) -> None:
            if bias.requires_grad:
                bias._accumulate(_unbroadcast(g, bias.shape))
            if gain.requires_grad:
                gain._accumulate(_unbroadcast(g * y, gain.shape))
            if x.requires_grad:
                u = g * gain.data
                term = u - u.mean(axis=-1, keepdims=True) \
                    - y * (u * y).mean(axis=-1, keepdims=True)
                x._accumulate(term * inv)
        out._backward = _bw
    return out


def l2_normalize(x) -> Tensor:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    x = as_tensor(x)
    sq = tsum(mul(x, x), axis=-1, keepdims=True) if x.data.ndim > 1 \
        else tsum(mul(x, x))
    if np.any(sq.data <= 0.0):
        raise DegenerateInputError("l2_normalize of a zero vector")
    return div(x, tsqrt(sq))


def dot(a, b) -> Tensor:
    """Inner product of two equal-length vectors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.data.ndim != 1:
        raise DimensionError(f"dot needs equal-length vectors, got {a.shape}, {b.shape}")
    return tsum(mul(a, b))


def identity(n: int) -> Tensor:
    return Tensor(np.eye(n))


# -- gradient checking ---------------------------------------------------------


class GradCheckReport:
    """Max relative error between analytic and central-difference gradients."""

    def __init__(self, per_block: dict[str, float], step: float):
        self.per_block = per_block
        self.step = step
        self.max_rel_err = max(per_block.values()) if per_block else 0.0

    def ok(self, tolerance: float) -> bool:
        return self.max_rel_err <= tolerance

    def __repr__(self) -> str:  # pragma: no cover
        worst = max(self.per_block, key=self.per_block.get) if self.per_block else "-"
        return f"GradCheckReport(max={self.max_rel_err:.3e} at {worst!r})"


def grad_check(f: Callable[..., Tensor], params: Sequence[Tensor] | dict[str, Tensor],
               step: float = 1e-5, abs_floor: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients of ``f(*params)`` against central differences.

    ``f`` must return a scalar Tensor.  Relative error per entry is
    ``|a - n| / max(|a|, |n|, abs_floor)``; the floor keeps round-off noise on
    near-zero gradients from being reported as large relative errors.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ContractError(f"step {step} outside [1e-6, 1e-3]")
    if isinstance(params, dict):
        names = list(params.keys())
        blocks = [params[n] for n in names]
    else:
        blocks = list(params)
        names = [f"param{i}" for i in range(len(blocks))]

    out = f(*blocks)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractError("grad_check target must return a scalar Tensor")
    for block in blocks:
        block.clear_grad()
    out.backward()
    analytic = [np.zeros_like(b.data) if b.grad is None else b.grad.copy()
                for b in blocks]

    def eval_at(full: list[Array]) -> float:
        fresh = [Tensor(arr) for arr in full]
        return f(*fresh).item()

    report: dict[str, float] = {}
    base = [b.data.copy() for b in blocks]
    for bi, name in enumerate(names):
        worst = 0.0
        flat = base[bi].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            work = base[bi].copy().reshape(-1)
            work[j] = orig + step
            plus = eval_at(base[:bi] + [work.reshape(base[bi].shape)] + base[bi + 1:])
            work[j] = orig - step
            minus = eval_at(base[:bi] + [work.reshape(base[bi].shape)] + base[bi + 1:])
            numeric = (plus - minus) / (2.0 * step)
            a = analytic[bi].reshape(-1)[j]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            worst = max(worst, rel)
        report[name] = worst
    return GradCheckReport(report, step)
