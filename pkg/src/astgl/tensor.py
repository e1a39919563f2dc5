"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation produces a new immutable :class:`Tensor`. When any input
requires gradients, the output carries a :class:`Node` holding the forward
function (so the graph can be replayed) and the vector-Jacobian product.
Broadcasting is deliberately absent: binary operations accept equal shapes or
a scalar operand, and anything else goes through :func:`expand`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "ComputationRecord",
    "NonFiniteError",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "abs_",
    "exp",
    "log",
    "relu",
    "sigmoid",
    "power",
    "clamp_min",
    "elementwise",
    "matmul",
    "einsum",
    "softmax",
    "softmax_rows",
    "reduce",
    "sum_",
    "mean",
    "frobenius_sq",
    "reshape",
    "transpose",
    "expand",
    "stack",
    "conv1d_time",
    "lambda_max",
    "backward",
    "record",
    "finite_diff_check",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf from its inputs."""


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., tuple]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None):
        return sum_(self, axis)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _apply(op: str, inputs: Sequence[Tensor], fwd, vjp) -> Tensor:
    arrays = [t.data for t in inputs]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = fwd(*arrays)
    _check_finite(op, out)
    result = Tensor(out)
    if any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = Node(op, tuple(inputs), fwd, vjp)
    return result


def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    # only scalar operands are ever broadcast
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _binary_shapes("add", a, b)
    return _apply(
        "add", (a, b), np.add,
        lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _binary_shapes("sub", a, b)
    return _apply(
        "sub", (a, b), np.subtract,
        lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _binary_shapes("mul", a, b)
    return _apply(
        "mul", (a, b), np.multiply,
        lambda g, out, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
    )


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _binary_shapes("div", a, b)
    return _apply(
        "div", (a, b), np.divide,
        lambda g, out, x, y: (
            _unbroadcast(g / y, x.shape),
            _unbroadcast(-g * x / (y * y), y.shape),
        ),
    )


def neg(a) -> Tensor:
    return _apply("neg", (constant(a),), np.negative, lambda g, out, x: (-g,))


def abs_(a) -> Tensor:
    # d|x|/dx at 0 is taken as 0
    return _apply("abs", (constant(a),), np.abs, lambda g, out, x: (g * np.sign(x),))


def exp(a) -> Tensor:
    return _apply("exp", (constant(a),), np.exp, lambda g, out, x: (g * out,))


def log(a) -> Tensor:
    return _apply("log", (constant(a),), np.log, lambda g, out, x: (g / x,))


def relu(a) -> Tensor:
    # relu'(0) = 0
    return _apply(
        "relu", (constant(a),), lambda x: np.maximum(x, 0.0),
        lambda g, out, x: (g * (x > 0.0),),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    return _apply(
        "sigmoid", (constant(a),), _sigmoid,
        lambda g, out, x: (g * out * (1.0 - out),),
    )


def power(a, p: float) -> Tensor:
    p = float(p)
    return _apply(
        "power", (constant(a),), lambda x: np.power(x, p),
        lambda g, out, x: (g * p * np.power(x, p - 1.0),),
    )


def clamp_min(a, floor: float) -> Tensor:
    floor = float(floor)
    return _apply(
        "clamp_min", (constant(a),), lambda x: np.maximum(x, floor),
        lambda g, out, x: (g * (x > floor),),
    )


_UNARY = {"abs": abs_, "exp": exp, "relu": relu, "sigmoid": sigmoid, "log": log, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} takes one operand")
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes must agree."""
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _apply(
        "matmul", (a, b), np.matmul,
        lambda g, out, x, y: (g @ np.swapaxes(y, -1, -2), np.swapaxes(x, -1, -2) @ g),
    )


def _parse_einsum(spec: str, n: int) -> tuple[list[str], str]:
    spec = spec.replace(" ", "")
    if "->" not in spec or "." in spec:
        raise ValueError("einsum spec must be explicit ('ab,bc->ac') without ellipsis")
    lhs, out = spec.split("->")
    subs = lhs.split(",")
    if len(subs) != n:
        raise ValueError(f"einsum spec has {len(subs)} operands, got {n}")
    for s in subs + [out]:
        if len(set(s)) != len(s):
            raise ValueError(f"repeated index within operand {s!r} is not supported")
    return subs, out


def einsum(spec: str, *operands) -> Tensor:
    """Explicit-output Einstein summation with gradients for every operand."""
    ops = tuple(constant(o) for o in operands)
    subs, out_sub = _parse_einsum(spec, len(ops))
    sizes: dict[str, int] = {}
    for s, t in zip(subs, ops):
        if len(s) != t.ndim:
            raise ValueError(f"einsum operand {s!r} does not match shape {t.shape}")
        for ch, n in zip(s, t.shape):
            if sizes.setdefault(ch, n) != n:
                raise ValueError(f"einsum index {ch!r} has conflicting extents")
    canonical = ",".join(subs) + "->" + out_sub

    def fwd(*arrs):
        return np.einsum(canonical, *arrs, optimize=True)

    def vjp(g, out, *arrs):
        grads = []
        for i, s in enumerate(subs):
            others = [subs[j] for j in range(len(subs)) if j != i]
            available = set(out_sub).union(*others) if others else set(out_sub)
            kept = "".join(ch for ch in s if ch in available)
            spec_i = ",".join([out_sub] + others) + "->" + kept
            gi = np.einsum(spec_i, g, *[arrs[j] for j in range(len(arrs)) if j != i],
                           optimize=True)
            if kept != s:
                # indices summed only inside operand i: gradient is constant along them
                shape = [sizes[ch] if ch in kept else 1 for ch in s]
                gi = np.broadcast_to(gi.reshape(shape), tuple(sizes[ch] for ch in s))
            grads.append(np.ascontiguousarray(gi))
        return tuple(grads)

    return _apply("einsum", ops, fwd, vjp)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    return _apply(
        "softmax", (constant(a),), _softmax_np,
        lambda g, out, x: (out * (g - (g * out).sum(axis=-1, keepdims=True)),),
    )


def softmax_rows(z) -> Tensor:
    z = constant(z)
    if z.ndim < 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {z.shape}")
    return softmax(z)


# ---------------------------------------------------------------- reductions and shape


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axis in {axis}")
    return tuple(sorted(out))


def _expand_back(g: np.ndarray, shape: tuple, axes: tuple[int, ...]) -> np.ndarray:
    kept = [1 if i in axes else n for i, n in enumerate(shape)]
    return np.broadcast_to(g.reshape(kept), shape)


def sum_(a, axis=None) -> Tensor:
    a = constant(a)
    axes = _norm_axes(axis, a.ndim)
    return _apply(
        "sum", (a,), lambda x: np.sum(x, axis=axes),
        lambda g, out, x: (np.array(_expand_back(g, x.shape, axes)),),
    )


def mean(a, axis=None) -> Tensor:
    a = constant(a)
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[i] for i in axes)
    return _apply(
        "mean", (a,), lambda x: np.sum(x, axis=axes) / count,
        lambda g, out, x: (np.array(_expand_back(g, x.shape, axes)) / count,),
    )


def frobenius_sq(a, axis=None) -> Tensor:
    a = constant(a)
    axes = _norm_axes(axis, a.ndim)
    return _apply(
        "frobenius_sq", (a,), lambda x: np.sum(x * x, axis=axes),
        lambda g, out, x: (2.0 * x * _expand_back(g, x.shape, axes),),
    )


_REDUCE = {"sum": sum_, "mean": mean, "frobenius_sq": frobenius_sq}


def reduce(op: str, a, axes=None) -> Tensor:
    if op not in _REDUCE:
        raise ValueError(f"unknown reduction {op!r}")
    return _REDUCE[op](a, axes)


def reshape(a, shape) -> Tensor:
    a = constant(a)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise ValueError(f"cannot reshape {a.shape} to {shape}")
    return _apply(
        "reshape", (a,), lambda x: x.reshape(shape),
        lambda g, out, x: (g.reshape(x.shape),),
    )


def transpose(a, axes=None) -> Tensor:
    a = constant(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _apply(
        "transpose", (a,), lambda x: np.transpose(x, axes),
        lambda g, out, x: (np.transpose(g, inv),),
    )


def expand(a, shape) -> Tensor:
    """Explicit broadcast: size-1 axes (or missing leading axes) are repeated."""
    a = constant(a)
    shape = tuple(int(s) for s in shape)
    try:
        np.broadcast_shapes(a.shape, shape)
    except ValueError:
        raise ValueError(f"cannot expand {a.shape} to {shape}") from None
    if np.broadcast_shapes(a.shape, shape) != shape:
        raise ValueError(f"cannot expand {a.shape} to {shape}")
    lead = len(shape) - a.ndim

    def vjp(g, out, x):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _apply("expand", (a,), lambda x: np.array(np.broadcast_to(x, shape)), vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(constant(t) for t in tensors)
    if not ts:
        raise ValueError("stack of nothing")
    if len({t.shape for t in ts}) != 1:
        raise ValueError(f"stack: shapes differ {[t.shape for t in ts]}")
    nd = ts[0].ndim + 1
    ax = axis % nd

    def vjp(g, out, *xs):
        return tuple(np.take(g, i, axis=ax) for i in range(len(xs)))

    return _apply("stack", ts, lambda *xs: np.stack(xs, axis=ax), vjp)


# ---------------------------------------------------------------- temporal convolution


def _pad_amounts(kt: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        total = kt - 1
        return total // 2, total - total // 2
    raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")


def conv1d_time(x, kernel, padding: str = "valid", axis: int = 0) -> Tensor:
    """Cross-correlation along a time axis with channels on the last axis.

    ``x`` has shape ``(..., L, ..., C_in)`` with time at ``axis``; ``kernel``
    is ``(K_t, C_in, C_out)``. ``same`` pads ``K_t - 1`` zeros, the odd one
    at the end.
    """
    x, kernel = constant(x), constant(kernel)
    if x.ndim < 2 or kernel.ndim != 3:
        raise ValueError(f"conv1d_time: bad ranks {x.shape}, {kernel.shape}")
    tax = axis % x.ndim
    if tax == x.ndim - 1:
        raise ValueError("time axis cannot be the channel axis")
    kt, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv1d_time: {x.shape[-1]} input channels, kernel expects {cin}")
    length = x.shape[tax]
    before, after = _pad_amounts(kt, padding)
    if length + before + after < kt:
        raise ValueError(f"kernel length {kt} exceeds sequence length {length}")
    out_len = length + before + after - kt + 1

    def padded(xa):
        xt = np.moveaxis(xa, tax, 0)
        if before or after:
            widths = [(before, after)] + [(0, 0)] * (xt.ndim - 1)
            xt = np.pad(xt, widths)
        return xt

    def fwd(xa, ka):
        xp = padded(xa)
        out = np.zeros((out_len,) + xp.shape[1:-1] + (cout,))
        for k in range(kt):
            out += xp[k:k + out_len] @ ka[k]
        return np.moveaxis(out, 0, tax)

    def vjp(g, out, xa, ka):
        xp = padded(xa)
        gt = np.moveaxis(g, tax, 0)
        gxp = np.zeros_like(xp)
        gk = np.empty_like(ka)
        flat_g = gt.reshape(-1, cout)
        for k in range(kt):
            gxp[k:k + out_len] += gt @ ka[k].T
            gk[k] = xp[k:k + out_len].reshape(-1, cin).T @ flat_g
        gx = gxp[before:before + length]
        return np.moveaxis(gx, 0, tax), gk

    return _apply("conv1d_time", (x, kernel), fwd, vjp)


# ---------------------------------------------------------------- spectral radius


POWER_MAX_ITER = 200
POWER_TOL = 1e-9
LAMBDA_FALLBACK = 2.0
_START = np.random.default_rng(20240607).standard_normal(4096)


def _power_iteration(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched power iteration on symmetric matrices ``(B, N, N)``.

    Convergence is declared when the eigen-residual ``||Mv - lam v||`` drops
    below ``POWER_TOL``; unconverged entries fall back to ``LAMBDA_FALLBACK``.
    The start vector is built from the matrix rows, so relabeling the rows
    and columns relabels every iterate and the result is permutation
    equivariant. If that vector is trapped in a non-dominant eigenspace
    (null vector, or a converged value below the largest diagonal entry,
    which bounds the top eigenvalue from below) the run restarts from a fixed
    pseudo-random vector. Returns ``(lam, v, converged)``.
    """
    b, n, _ = m.shape
    diag = np.einsum("bii->bi", m)
    v0 = 1.0 + np.abs(diag) + np.einsum("bij,bij->bi", m, m)
    lam, v, done, dead = _power_run(m, v0)
    retry = dead | (done & (lam < diag.max(axis=1) - 1e-9))
    if retry.any():
        fixed = np.broadcast_to(_START[:n], (int(retry.sum()), n))
        lam[retry], v[retry], done[retry], _ = _power_run(m[retry], fixed)
    return lam, v, done


def _power_run(m, v0):
    b, n, _ = m.shape
    v = v0 / np.linalg.norm(v0, axis=1, keepdims=True)
    lam = np.full(b, LAMBDA_FALLBACK)
    done = np.zeros(b, dtype=bool)
    dead_all = np.zeros(b, dtype=bool)
    active = np.arange(b)
    for _ in range(POWER_MAX_ITER):
        w = np.einsum("bij,bj->bi", m[active], v[active])
        norm = np.linalg.norm(w, axis=1)
        dead = norm < 1e-300
        dead_all[active[dead]] = True
        w = w / np.where(dead, 1.0, norm)[:, None]
        mw = np.einsum("bij,bj->bi", m[active], w)
        rq = np.einsum("bi,bi->b", w, mw)
        resid = np.linalg.norm(mw - rq[:, None] * w, axis=1)
        v[active] = w
        conv = (resid <= POWER_TOL) & ~dead
        lam[active[conv]] = rq[conv]
        done[active[conv]] = True
        active = active[~conv & ~dead]
        if active.size == 0:
            break
    return lam, v, done, dead_all


def lambda_max(j) -> Tensor:
    """Largest eigenvalue of a symmetric matrix (or batch) by power iteration.

    Differentiable through ``d lam = v^T dJ v`` where it converged; the
    fallback value is a constant.
    """
    j = constant(j)
    if j.ndim not in (2, 3) or j.shape[-1] != j.shape[-2]:
        raise ValueError(f"lambda_max expects square matrices, got {j.shape}")
    single = j.ndim == 2
    cache: dict = {}

    def run(ja):
        if cache.get("input") is not ja:
            cache["input"] = ja
            cache["result"] = _power_iteration(ja[None] if single else ja)
        return cache["result"]

    def fwd(ja):
        lam, _, _ = run(ja)
        return lam[0] if single else lam

    def vjp(g, out, ja):
        _, v, done = run(ja)
        outer = np.einsum("bi,bj->bij", v, v) * done[:, None, None]
        gb = np.reshape(g, (-1,))
        grad = outer * gb[:, None, None]
        return (grad[0] if single else grad,)

    return _apply("lambda_max", (j,), fwd, vjp)


# ---------------------------------------------------------------- differentiation


@dataclass
class ComputationRecord:
    """Topologically ordered tape of the nodes that produced ``output``."""

    output: Tensor
    order: list[Tensor] = field(default_factory=list)

    @property
    def nodes(self) -> list[Node]:
        return [t.node for t in self.order if t.node is not None]

    @property
    def leaves(self) -> list[Tensor]:
        return [t for t in self.order if t.node is None and t.requires_grad]

    def replay(self) -> dict[int, np.ndarray]:
        """Recompute every node output from the leaves; keyed by ``id(tensor)``."""
        values: dict[int, np.ndarray] = {}
        for t in self.order:
            if t.node is None:
                values[id(t)] = t.data
            else:
                args = [values[id(p)] if id(p) in values else p.data for p in t.node.inputs]
                with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                    values[id(t)] = t.node.forward(*args)
        return values


def record(output: Tensor) -> ComputationRecord:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(output, False)]
    while stack_:
        t, expanded = stack_.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack_.append((t, True))
        if t.node is not None:
            for p in reversed(t.node.inputs):
                if p.requires_grad and id(p) not in seen:
                    stack_.append((p, False))
    return ComputationRecord(output, order)


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> list[np.ndarray]:
    """Accumulate d loss / d leaf for every reachable leaf.

    Sets ``.grad`` on reached leaves. Returns gradients for ``wrt`` (zeros for
    leaves the loss does not depend on), or for all reached leaves if ``wrt``
    is None.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached from every tracked leaf")
    rec = record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(rec.order):
        g = grads.pop(id(t), None) if t.node is not None else grads.get(id(t))
        if t.node is None or g is None:
            continue
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            in_grads = t.node.vjp(g, t.data, *[p.data for p in t.node.inputs])
        for p, gp in zip(t.node.inputs, in_grads):
            if not p.requires_grad or gp is None:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = np.asarray(gp, dtype=np.float64)
    for leaf in rec.leaves:
        g = grads.get(id(leaf), np.zeros_like(leaf.data))
        _check_finite(f"gradient of {leaf.name or 'leaf'}", g)
        leaf.grad = g
    if wrt is None:
        return [leaf.grad for leaf in rec.leaves]
    return [grads.get(id(w), np.zeros_like(w.data)) for w in wrt]


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is re-evaluated with each parameter coordinate nudged by ``+-h``;
    the relative error uses ``max(1, |analytic|)`` as denominator. With
    ``max_coords`` set, each parameter is probed at that many seeded
    coordinates instead of all of them.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    analytic = backward(f(), params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        base = p.data
        coords = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            coords = np.sort(rng.choice(base.size, size=max_coords, replace=False))
        flat = base.reshape(-1)
        for c in coords:
            vals = []
            for step in (h, -h):
                bumped = flat.copy()
                bumped[c] += step
                p.data = bumped.reshape(base.shape)
                p.data.setflags(write=False)
                fv = f().item()
                if not math.isfinite(fv):
                    p.data = base
                    raise NonFiniteError("objective is non-finite under perturbation")
                vals.append(fv)
            p.data = base
            numeric = (vals[0] - vals[1]) / (2.0 * h)
            a = float(ga.reshape(-1)[c])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
