"""Dense float64 arrays with reverse-mode differentiation.

Every tensor wraps an immutable numpy array and remembers the operation
that produced it, so the computation graph doubles as the gradient tape.
``grad`` replays that tape once, in reverse creation order (a reverse
topological order, since inputs always exist before their outputs).

Tensors are safe to share across threads; a graph under construction is
confined to the thread building it.  Reductions use numpy's fixed
pairwise order, so identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractViolationError, NumericFailureError

_NODE_IDS = itertools.count()


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A node on the tape: an immutable float64 array plus provenance.

    Construct leaves with ``Tensor(array)``; everything else is produced
    by the operations below.  NaN/Inf in any result raises
    ``NumericFailureError`` immediately - non-finite values never flow.
    """

    __slots__ = ("data", "_parents", "_vjps", "_op", "_nid")

    def __init__(self, value, _parents=(), _vjps=(), _op="leaf"):
        arr = _as_array(value)
        if _op == "leaf":
            arr = arr.copy()
        arr.flags.writeable = False
        self.data = arr
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = tuple(_vjps)
        self._op = _op
        self._nid = next(_NODE_IDS)
        if not np.all(np.isfinite(arr)):
            raise NumericFailureError(
                f"non-finite values in node {self._nid} ({self._op})"
            )

    # -- properties -------------------------------------------------------

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
        if self.data.size != 1:
            raise ContractViolationError(
                f"item() on tensor of shape {self.shape}"
            )
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self._op!r}, shape={self.shape})"

    def detach(self) -> "Tensor":
        """A constant copy that stops gradient flow."""
        return Tensor(self.data, _op="leaf")

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        sa, sb = self.shape, other.shape
        return Tensor(
            self.data + other.data,
            (self, other),
            (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)),
            "add",
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, (self,), (lambda g: -g,), "neg")

    def __sub__(self, other):
        other = as_tensor(other)
        sa, sb = self.shape, other.shape
        return Tensor(
            self.data - other.data,
            (self, other),
            (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(-g, sb)),
            "sub",
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        sa, sb = self.shape, other.shape
        return Tensor(
            a * b,
            (self, other),
            (
                lambda g: _unbroadcast(g * b, sa),
                lambda g: _unbroadcast(g * a, sb),
            ),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        sa, sb = self.shape, other.shape
        return Tensor(
            a / b,
            (self, other),
            (
                lambda g: _unbroadcast(g / b, sa),
                lambda g: _unbroadcast(-g * a / (b * b), sb),
            ),
            "div",
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ContractViolationError("pow exponent must be a python scalar")
        p = float(exponent)
        a = self.data
        return Tensor(
            a ** p,
            (self,),
            (lambda g: g * p * a ** (p - 1.0),),
            f"pow{p}",
        )

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.ndim != 2 or other.ndim != 2:
            raise ContractViolationError(
                f"matmul needs 2-d operands, got {self.shape} @ {other.shape}"
            )
        a, b = self.data, other.data
        return Tensor(
            a @ b,
            (self, other),
            (lambda g: g @ b.T, lambda g: a.T @ g),
            "matmul",
        )

    # -- elementwise functions ---------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, (self,), (lambda g: g * out,), "exp")

    def log(self):
        a = self.data
        return Tensor(np.log(a), (self,), (lambda g: g / a,), "log")

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor(out, (self,), (lambda g: g * 0.5 / out,), "sqrt")

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor(out, (self,), (lambda g: g * (1.0 - out * out),), "tanh")

    def softplus(self):
        a = self.data
        out = np.logaddexp(0.0, a)
        sig = 1.0 / (1.0 + np.exp(-a))
        return Tensor(out, (self,), (lambda g: g * sig,), "softplus")

    def arccos(self):
        a = self.data
        return Tensor(
            np.arccos(a),
            (self,),
            (lambda g: -g / np.sqrt(1.0 - a * a),),
            "arccos",
        )

    def clip(self, lo: float, hi: float):
        a = self.data
        inside = ((a >= lo) & (a <= hi)).astype(np.float64)
        return Tensor(
            np.clip(a, lo, hi), (self,), (lambda g: g * inside,), "clip"
        )

    # -- shape manipulation -------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor(
            self.data.reshape(shape),
            (self,),
            (lambda g: g.reshape(old),),
            "reshape",
        )

    def transpose(self, axes: Sequence[int]):
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        return Tensor(
            self.data.transpose(axes),
            (self,),
            (lambda g: g.transpose(inverse),),
            "transpose",
        )

    @property
    def T(self):
        if self.ndim != 2:
            raise ContractViolationError(".T needs a 2-d tensor")
        return self.transpose((1, 0))

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g: np.ndarray) -> np.ndarray:
            if axis is None:
                return np.broadcast_to(g, shape).copy()
            if not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return Tensor(
            self.data.sum(axis=axis, keepdims=keepdims),
            (self,),
            (backward,),
            "sum",
        )

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        elif isinstance(axis, tuple):
            count = int(np.prod([self.shape[a] for a in axis]))
        else:
            count = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def as_tensor(value) -> Tensor:
    """Wrap scalars/arrays as constant leaves; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# -- multi-input operations ---------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractViolationError("concat of zero tensors")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def make_vjp(i: int):
        return lambda g: np.split(g, bounds, axis=axis)[i]

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        tuple(make_vjp(i) for i in range(len(tensors))),
        "concat",
    )


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractViolationError("stack of zero tensors")

    def make_vjp(i: int):
        return lambda g: g[i]

    return Tensor(
        np.stack([t.data for t in tensors]),
        tuple(tensors),
        tuple(make_vjp(i) for i in range(len(tensors))),
        "stack",
    )


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-d table by integer index (embedding lookup)."""
    table = as_tensor(table)
    if table.ndim != 2:
        raise ContractViolationError("take_rows needs a 2-d table")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractViolationError(
            f"row index out of range [0, {table.shape[0]})"
        )
    tshape = table.shape

    def backward(g: np.ndarray) -> np.ndarray:
        out = np.zeros(tshape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, tshape[1]))
        return out

    return Tensor(table.data[ids], (table,), (backward,), "take_rows")


# -- softmax family ------------------------------------------------------------


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    # subtracting the detached max is gradient-neutral and keeps exp in range
    shift = t - np.max(t.data, axis=axis, keepdims=True)
    return shift - shift.exp().sum(axis=axis, keepdims=True).log()


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    return log_softmax(t, axis=axis).exp()


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy for integer class labels.

    logits: (n, k); labels: n integers in [0, k).
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ContractViolationError("cross_entropy expects (n, k) logits")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ContractViolationError("labels must be one integer per row")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractViolationError(f"label out of range [0, {k})")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    return -(log_softmax(logits, axis=1) * onehot).sum() * (1.0 / n)


def binary_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean per-element sigmoid cross-entropy for {0,1} target matrices."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ContractViolationError("targets must match logits shape")
    # softplus(x) - t*x is the stable form of -t*log(s(x)) - (1-t)*log(1-s(x))
    per_element = logits.softplus() - logits * targets
    return per_element.sum() * (1.0 / logits.size)


# -- the backward pass --------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(loss: Tensor, leaves: Iterable[Tensor]) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar loss with respect to the given leaves.

    Visits every reachable node exactly once, in reverse topological
    order.  Leaves the loss never touched map to exact zero arrays.
    """
    leaves = list(leaves)
    if not isinstance(loss, Tensor):
        raise ContractViolationError("loss must be a recorded tensor")
    if loss.data.size != 1:
        raise ContractViolationError(
            f"loss must be scalar, got shape {loss.shape}"
        )
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = adjoint.get(id(node))
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericFailureError(
                f"non-finite gradient at node {node._nid} ({node._op})"
            )
        for parent, vjp in zip(node._parents, node._vjps):
            contribution = vjp(g)
            prev = adjoint.get(id(parent))
            if prev is None:
                adjoint[id(parent)] = contribution
            else:
                adjoint[id(parent)] = prev + contribution
    return {
        leaf: adjoint.get(id(leaf), np.zeros(leaf.shape)) for leaf in leaves
    }


# -- finite differences --------------------------------------------------------


def finite_diff_check(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must be deterministic and map a dict of named tensors to a
    scalar tensor.  The error at each coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise ContractViolationError("finite-difference step h must be > 0")
    base = {name: np.asarray(v, dtype=np.float64) for name, v in params.items()}
    leaves = {name: Tensor(v) for name, v in base.items()}
    loss = loss_fn(leaves)
    grads = grad(loss, leaves.values())
    analytic = {name: grads[leaves[name]] for name in leaves}

    def eval_at(values: dict[str, np.ndarray]) -> float:
        out = loss_fn({name: Tensor(v) for name, v in values.items()})
        val = out.item()
        if not np.isfinite(val):
            raise NumericFailureError("loss non-finite at perturbed point")
        return val

    worst = 0.0
    for name, value in base.items():
        flat = value.reshape(-1)
        for i in range(flat.size):
            bumped = dict(base)
            plus = value.copy().reshape(-1)
            plus[i] += h
            bumped[name] = plus.reshape(value.shape)
            up = eval_at(bumped)
            minus = value.copy().reshape(-1)
            minus[i] -= h
            bumped[name] = minus.reshape(value.shape)
            down = eval_at(bumped)
            numeric = (up - down) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a))
            worst = max(worst, err)
    return worst
