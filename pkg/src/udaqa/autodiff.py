"""Dense tensors with a record-on-forward graph and reverse-mode gradients.

Every op returns a new :class:`Tensor` that remembers its inputs and a
vector-Jacobian product. ``backward(loss)`` walks the graph in reverse
topological order. All values are float64.

Ops support numpy broadcasting for the elementwise family (``add``, ``sub``,
``elemwise_mul``) and batched ``matmul``; gradients are summed back to the
input shape.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

OP_KINDS = (
    "matmul", "add", "sub", "elemwise_mul", "relu", "softmax_over_axis",
    "exp", "log", "square", "sum", "mean", "concat", "l2_norm",
    "scale_by_scalar", "transpose", "reshape", "slice", "clip",
)


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class DomainError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "inputs", "_vjp", "kink")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op: str | None = None
        self.inputs: tuple[Tensor, ...] = ()
        self._vjp = None
        # Integer pattern marking which side of a nondifferentiable locus each
        # entry sits on; used by finite_diff_check to skip kinks.
        self.kink: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = self.name or self.op or "leaf"
        return f"Tensor({tag}, shape={self.shape})"

    def __add__(self, other):
        return apply("add", self, other)

    def __radd__(self, other):
        return apply("add", other, self)

    def __sub__(self, other):
        return apply("sub", self, other)

    def __rsub__(self, other):
        return apply("sub", other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply("scale_by_scalar", self, scalar=float(other))
        return apply("elemwise_mul", self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return apply("scale_by_scalar", self, scalar=-1.0)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    @property
    def T(self):
        return apply("transpose", self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _norm_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for {ndim}-d input")
    return axis % ndim


# Each forward returns (value, vjp, kink). vjp maps the output gradient to a
# tuple of input gradients (None where an input needs none).

def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a, b)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, vjp, None


def _add(a, b):
    _broadcast_shape("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), None


def _sub(a, b):
    _broadcast_shape("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), None


def _mul(a, b):
    _broadcast_shape("elemwise_mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)), None


def _relu(x):
    mask = x > 0
    # subgradient 0 at exactly 0
    return np.where(mask, x, 0.0), lambda g: (g * mask,), mask.astype(np.int8)


def _softmax(x, *, axis):
    axis = _norm_axis(axis, x.ndim, "softmax_over_axis")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return s, vjp, None


def _exp(x):
    out = np.exp(x)
    return out, lambda g: (g * out,), None


def _log(x):
    if np.any(x <= 0):
        raise DomainError(f"log: nonpositive input (min {x.min():.6g}) with shape {x.shape}")
    return np.log(x), lambda g: (g / x,), None


def _square(x):
    return x * x, lambda g: (2.0 * x * g,), None


def _sum(x, *, axis=None, keepdims=False):
    out = x.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return out, vjp, None


def _mean(x, *, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = x.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return out, vjp, None


def _concat(*xs, axis=-1):
    if not xs:
        raise ShapeError("concat: no inputs")
    ndim = xs[0].ndim
    ax = _norm_axis(axis, ndim, "concat")
    for x in xs[1:]:
        if x.ndim != ndim or any(x.shape[i] != xs[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {xs[0].shape} and {x.shape} on axis {axis}")
    out = np.concatenate(xs, axis=ax)
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return out, vjp, None


def _l2_norm(x, *, axis=-1, keepdims=True):
    axis = _norm_axis(axis, x.ndim, "l2_norm")
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, x / safe, 0.0) * g,)

    out = n if keepdims else n.squeeze(axis)
    return out, vjp, np.sign(x).astype(np.int8)


def _scale(x, *, scalar):
    return x * scalar, lambda g: (g * scalar,), None


def _transpose(x):
    if x.ndim < 2:
        raise ShapeError(f"transpose: needs at least 2 dims, got shape {x.shape}")
    return np.swapaxes(x, -1, -2), lambda g: (np.swapaxes(g, -1, -2),), None


def _reshape(x, *, shape):
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return out, lambda g: (g.reshape(x.shape),), None


def _slice(x, *, start, stop, axis=-1):
    ax = _norm_axis(axis, x.ndim, "slice")
    if not 0 <= start < stop <= x.shape[ax]:
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for shape {x.shape} axis {axis}")
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def vjp(g):
        full = np.zeros_like(x)
        full[index] = g
        return (full,)

    return x[index], vjp, None


def _clip(x, *, lo, hi):
    inside = (x > lo) & (x < hi)
    side = np.where(x <= lo, -1, np.where(x >= hi, 1, 0)).astype(np.int8)
    return np.clip(x, lo, hi), lambda g: (g * inside,), side


_FORWARD: dict[str, Callable] = {
    "matmul": _matmul,
    "add": _add,
    "sub": _sub,
    "elemwise_mul": _mul,
    "relu": _relu,
    "softmax_over_axis": _softmax,
    "exp": _exp,
    "log": _log,
    "square": _square,
    "sum": _sum,
    "mean": _mean,
    "concat": _concat,
    "l2_norm": _l2_norm,
    "scale_by_scalar": _scale,
    "transpose": _transpose,
    "reshape": _reshape,
    "slice": _slice,
    "clip": _clip,
}


def apply(op_kind: str, *inputs, **attrs) -> Tensor:
    """Evaluate ``op_kind`` on ``inputs`` and record the node.

    ``softmax_over_axis`` needs an explicit ``axis``; ``scale_by_scalar``
    needs ``scalar``; ``slice`` needs ``start`` and ``stop``; ``clip`` needs
    ``lo`` and ``hi``.
    """
    try:
        forward = _FORWARD[op_kind]
    except KeyError:
        raise AutodiffError(f"unknown op kind {op_kind!r}") from None
    if op_kind == "softmax_over_axis" and "axis" not in attrs:
        raise AutodiffError("softmax_over_axis requires an explicit axis")
    tensors = tuple(as_tensor(x) for x in inputs)
    arrays = [t.data for t in tensors]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        value, vjp, kink = forward(*arrays, **attrs)
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)) and all(np.all(np.isfinite(a)) for a in arrays):
        raise NonFiniteError(f"{op_kind}: non-finite output from finite inputs of shapes "
                             f"{[a.shape for a in arrays]}")
    out = Tensor(value)
    out.kink = kink
    out.op = op_kind
    if any(t.requires_grad for t in tensors):
        out.requires_grad = True
        out.inputs = tensors
        out._vjp = vjp
    else:
        out.inputs = tensors
    return out


# Thin named wrappers so model code reads like math.

def matmul(a, b):
    return apply("matmul", a, b)


def relu(x):
    return apply("relu", x)


def softmax(x, axis):
    return apply("softmax_over_axis", x, axis=axis)


def exp(x):
    return apply("exp", x)


def log(x):
    return apply("log", x)


def square(x):
    return apply("square", x)


def tsum(x, axis=None, keepdims=False):
    return apply("sum", x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return apply("mean", x, axis=axis, keepdims=keepdims)


def concat(xs: Sequence, axis=-1):
    return apply("concat", *xs, axis=axis)


def l2_norm(x, axis=-1, keepdims=True):
    return apply("l2_norm", x, axis=axis, keepdims=keepdims)


def scale(x, c: float):
    return apply("scale_by_scalar", x, scalar=float(c))


def slice_(x, start: int, stop: int, axis=-1):
    return apply("slice", x, start=start, stop=stop, axis=axis)


def clip(x, lo: float, hi: float):
    return apply("clip", x, lo=lo, hi=hi)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, every input before its consumer."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.inputs):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Returns a map from leaf tensor to gradient. Leaves passed in ``leaves``
    that the loss does not depend on get a zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node.is_leaf:
            node.grad = g
            result[node] = g
            continue
        for parent, pg in zip(node.inputs, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    for leaf in leaves or ():
        if leaf not in result:
            leaf.grad = np.zeros_like(leaf.data)
            result[leaf] = leaf.grad
    return result


def kink_signature(root: Tensor) -> list[np.ndarray]:
    return [n.kink for n in topological_order(root) if n.kink is not None]


class GradCheckResult(NamedTuple):
    max_rel_error: float
    checked: int
    excluded: int


def finite_diff_check(
    fn: Callable[..., Tensor],
    point: np.ndarray | Mapping[str, np.ndarray],
    step: float = 1e-5,
) -> GradCheckResult:
    """Compare reverse-mode gradients of ``fn`` with central differences.

    ``fn`` receives one Tensor (or keyword Tensors when ``point`` is a
    mapping) and returns a scalar Tensor. Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``. A coordinate is skipped
    when the +step and -step evaluations land on different sides of any
    relu, clip, or norm kink.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    named = isinstance(point, Mapping)
    base = {k: np.array(v, dtype=np.float64) for k, v in point.items()} if named \
        else {"x": np.array(point, dtype=np.float64)}

    def run(values: dict[str, np.ndarray], grad: bool = False):
        leaves = {k: Tensor(v, requires_grad=grad, name=k) for k, v in values.items()}
        out = fn(**leaves) if named else fn(leaves["x"])
        if out.data.size != 1:
            raise ShapeError(f"finite_diff_check: function must be scalar, got {out.shape}")
        if not np.isfinite(out.data).all():
            bad = next((n for n in topological_order(out) if not np.isfinite(n.data).all()), out)
            raise NonFiniteError(f"finite_diff_check: non-finite value at node {bad!r}")
        return out, leaves

    out, leaves = run(base, grad=True)
    backward(out, leaves.values())
    analytic = {k: leaves[k].grad for k in base}

    worst, checked, excluded = 0.0, 0, 0
    for key, arr in base.items():
        for idx in np.ndindex(arr.shape):
            plus = {k: v.copy() for k, v in base.items()}
            minus = {k: v.copy() for k, v in base.items()}
            plus[key][idx] += step
            minus[key][idx] -= step
            fp, _ = run(plus)
            fm, _ = run(minus)
            sig_p, sig_m = kink_signature(fp), kink_signature(fm)
            if any(not np.array_equal(a, b) for a, b in zip(sig_p, sig_m)):
                excluded += 1
                continue
            numeric = (fp.item() - fm.item()) / (2 * step)
            a = float(analytic[key][idx])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
            checked += 1
    if excluded:
        logger.debug("finite_diff_check skipped %d coordinates at kinks", excluded)
    return GradCheckResult(worst, checked, excluded)
