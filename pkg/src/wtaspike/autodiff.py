"""Minimal dense reverse-mode automatic differentiation on numpy arrays.

Every operation on a :class:`Tensor` that needs a gradient records a node
holding its parents and a backward rule. :func:`backward` orders the nodes
reachable from a scalar loss into a :class:`Tape` (inputs strictly before the
operations that consume them) and replays it in reverse, accumulating
gradients additively into every leaf with ``requires_grad``.

Custom-gradient operations (:func:`register_custom_grad`) pair an exact
forward with a user supplied backward rule. Each may also name a *smooth
twin*: the function its backward actually differentiates. Inside
:func:`smooth_twin` the twin replaces the forward, which turns a surrogate
graph into an ordinary differentiable one that finite differences can check.
"""
from __future__ import annotations

import contextlib
import warnings
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, EmptySelectionWarning, InputError

REAL = "real"
BINARY = "binary"
TERNARY = "ternary"
COUNT = "count"  # nonnegative integer tallies of spike coincidences

_state = {"grad": True, "twin": False}


def is_grad_enabled() -> bool:
    return _state["grad"]


def is_twin_mode() -> bool:
    return _state["twin"]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def smooth_twin():
    """Run custom-gradient ops with their smooth twin forwards."""
    prev = _state["twin"]
    _state["twin"] = True
    try:
        yield
    finally:
        _state["twin"] = prev


def nint_domain(d_max: int) -> str:
    """Domain tag for normalized-integer spikes ``{0, 1/D, ..., 1}``."""
    return f"nint:{int(d_max)}"


def is_spike_domain(domain: str) -> bool:
    return domain in (BINARY, TERNARY, COUNT) or domain.startswith("nint:")


def domain_levels(domain: str) -> int:
    """Number of unfolded sub-steps a spike value stands for (1 unless NI)."""
    if domain.startswith("nint:"):
        return int(domain.split(":", 1)[1])
    return 1


class Tensor:
    """A float64 array with an optional gradient and a graph link."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "domain")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, domain: str = REAL):
        arr = np.asarray(data)
        if arr.dtype != np.float64 and arr.dtype != np.float32:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"
        self.domain = domain

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, domain=self.domain)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}, domain={self.domain}{flag})"

    # arithmetic sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward_fn, op: str, domain: str = REAL) -> Tensor:
    out = Tensor(data, domain=domain)
    out.op = op
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(x, c: float) -> Tensor:
    """Multiply by a Python constant. ``scale(x, 1)`` returns the same values."""
    x = as_tensor(x)
    c = float(c)
    data = x.data if c == 1.0 else x.data * c
    return _make(data, (x,), lambda g: (g * c,), "scale")


def divide(x, c: float) -> Tensor:
    """Divide by a nonzero Python constant (correctly rounded, unlike ``scale(x, 1/c)``)."""
    x = as_tensor(x)
    c = float(c)
    if c == 0.0:
        raise InputError("divide by zero constant")
    return _make(x.data / c, (x,), lambda g: (g / c,), "divide")


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (0.5 -> 1, -0.5 -> -1)."""
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes inside the range, zero outside."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def round_ste(x) -> Tensor:
    """Round half away from zero with a straight-through backward."""
    x = as_tensor(x)
    return _make(round_half_away(x.data), (x,), lambda g: (g,), "round")


def quantize(x, lo: float, hi: float) -> Tensor:
    """``clip(round(x), lo, hi)`` with gradient 1 for ``lo <= x <= hi`` else 0.

    The smooth twin is ``clip(x, lo, hi)``.
    """
    x = as_tensor(x)
    if _state["twin"]:
        data = np.clip(x.data, lo, hi)
    else:
        data = np.clip(round_half_away(x.data), lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(data, (x,), lambda g: (g * inside,), "quantize")


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(np.size(out), 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(out, (x,), bw, "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape", x.domain)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose", x.domain)


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),),
                 "swapaxes", x.domain)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in parts)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), bw, "getitem", x.domain)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    domains = {t.domain for t in tensors}
    domain = domains.pop() if len(domains) == 1 else REAL

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack", domain)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; gradient scatters back into the table."""
    ids = np.asarray(ids)

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(weight.data[ids], (weight,), bw, "embedding")


# ---------------------------------------------------------------------------
# matrix product
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: leading axes of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# softmax (exact derivative)
# ---------------------------------------------------------------------------


def masked_softmax_values(x: np.ndarray, allowed: np.ndarray | None = None, tau: float = 1.0) -> np.ndarray:
    """Stable softmax over the last axis; disallowed entries get probability 0."""
    z = x / tau
    if allowed is None:
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        allowed = np.broadcast_to(allowed, z.shape)
        zmax = np.where(allowed, z, np.min(z, axis=-1, keepdims=True)).max(axis=-1, keepdims=True)
        e = np.exp(np.where(allowed, z - zmax, 0.0)) * allowed
    return e / e.sum(axis=-1, keepdims=True)


def softmax_jvp_t(p: np.ndarray, g: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """``J^T g`` for ``p = softmax(a / tau)``: ``p * (g - <p, g>) / tau``."""
    return p * (g - (p * g).sum(axis=-1, keepdims=True)) / tau


def softmax(x, allowed: np.ndarray | None = None, tau: float = 1.0) -> Tensor:
    x = as_tensor(x)
    p = masked_softmax_values(x.data, allowed, tau)
    return _make(p, (x,), lambda g: (softmax_jvp_t(p, g, tau),), "softmax")


# ---------------------------------------------------------------------------
# custom gradients
# ---------------------------------------------------------------------------


class CustomOp:
    """Handle returned by :func:`register_custom_grad`; call it like a function."""

    def __init__(self, forward: Callable, backward: Callable, twin: Callable | None = None,
                 name: str = "custom", domain: str | Callable = REAL):
        self.forward = forward
        self.backward = backward
        self.twin = twin
        self.name = name
        self.domain = domain

    def __call__(self, *inputs, **params) -> Tensor:
        tensors = tuple(as_tensor(t) for t in inputs)
        arrays = tuple(t.data for t in tensors)
        twin = _state["twin"] and self.twin is not None
        out = (self.twin if twin else self.forward)(*arrays, **params)
        domain = self.domain(**params) if callable(self.domain) else self.domain
        if twin:
            domain = REAL

        def bw(g):
            grads = self.backward(arrays, g, **params)
            if not isinstance(grads, tuple):
                grads = (grads,)
            return grads

        return _make(np.asarray(out, dtype=np.float64), tensors, bw, self.name, domain)


def register_custom_grad(forward: Callable, backward: Callable, twin: Callable | None = None,
                         name: str = "custom", domain: str | Callable = REAL) -> CustomOp:
    """Pair an exact ``forward`` with a registered ``backward`` rule.

    ``backward(inputs, upstream, **params)`` receives the saved input arrays and
    the upstream gradient and returns one gradient per input (``None`` for
    inputs that get none). ``twin``, when given, is the function the backward
    differentiates; it stands in for ``forward`` under :func:`smooth_twin`.
    """
    return CustomOp(forward, backward, twin, name, domain)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def cross_entropy_from_logits(logits, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``mask`` selects contributing positions. An empty selection returns a zero
    loss and emits :class:`EmptySelectionWarning`.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if not np.issubdtype(targets.dtype, np.integer):
        raise InputError("cross_entropy: targets must be integer token ids")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        bad = targets[(targets < 0) | (targets >= v)].reshape(-1)[0]
        raise InputError(f"cross_entropy: target id {int(bad)} outside [0, {v})")
    sel = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if sel.shape != targets.shape:
        raise DimensionError(f"cross_entropy: mask {sel.shape} vs targets {targets.shape}")
    count = int(sel.sum())
    if count == 0:
        warnings.warn("cross_entropy over an empty selection; loss defined as 0",
                      EmptySelectionWarning, stacklevel=2)
        return _make(np.float64(0.0), (logits,), lambda g: (np.zeros_like(logits.data),), "xent")

    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
    nll = lse - picked
    loss = float(np.sum(nll[sel]) / count)

    def bw(g):
        p = np.exp(shifted - lse[..., None])
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return ((p - onehot) * (sel[..., None] * (g / count)),)

    return _make(np.float64(loss), (logits,), bw, "xent")


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class Tape:
    """Operations reachable from an output, in topological order."""

    def __init__(self, ops: list):
        self.ops = ops

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        stack_ = [(out, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack_.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.ops)

    def replay(self, seed: np.ndarray) -> None:
        out = self.ops[-1]
        grads = {id(out): seed}
        for node in reversed(self.ops):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                g = np.asarray(g, dtype=node.data.dtype)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            if len(parent_grads) != len(node._parents):
                raise ContractError(
                    f"{node.op}: backward returned {len(parent_grads)} gradients "
                    f"for {len(node._parents)} inputs")
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg)
                if pg.shape != p.shape:
                    raise ContractError(
                        f"{node.op}: backward produced gradient of shape {pg.shape} "
                        f"for input of shape {p.shape}")
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg


def backward(loss: Tensor) -> None:
    """Accumulate ``dloss/dleaf`` into ``.grad`` of every reachable leaf."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        return
    Tape.from_output(loss).replay(np.ones_like(loss.data))


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad
