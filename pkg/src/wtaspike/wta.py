"""Winner-take-all layers: Hard WTA, Top-K WTA and Sparsemax.

All functions act on the last axis and accept an optional boolean ``allowed``
mask (broadcastable to the input). Disallowed entries never win and always
output 0. Ties go to the lowest index.

Hard and Top-K outputs are binary (spike compatible). Their training backward
is the softmax surrogate: ``J^T g`` for ``p = softmax(a / tau_sg)`` restricted
to the allowed entries.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, InputError


@dataclass(frozen=True)
class WTAKind:
    variant: str = "hard"  # "hard" | "topk" | "sparsemax"
    k: int = 1
    binarize_support: bool = False
    surrogate_temperature: float = 1.0

    def __post_init__(self):
        if self.variant not in ("hard", "topk", "sparsemax"):
            raise InputError(f"unknown WTA variant {self.variant!r}")
        if self.variant == "topk" and self.k < 1:
            raise InputError(f"top-k needs k >= 1, got {self.k}")
        if not self.surrogate_temperature > 0:
            raise InputError("surrogate temperature must be positive")

    @classmethod
    def parse(cls, text: str, surrogate_temperature: float = 1.0) -> "WTAKind":
        """Parse ``hard``, ``topk:K``, ``sparsemax`` or ``sparsemax-bin``."""
        text = text.strip().lower()
        if text == "hard":
            return cls("hard", surrogate_temperature=surrogate_temperature)
        if text.startswith("topk:"):
            try:
                k = int(text.split(":", 1)[1])
            except ValueError:
                raise InputError(f"bad top-k spec {text!r}") from None
            return cls("topk", k=k, surrogate_temperature=surrogate_temperature)
        if text == "sparsemax":
            return cls("sparsemax", surrogate_temperature=surrogate_temperature)
        if text == "sparsemax-bin":
            return cls("sparsemax", binarize_support=True, surrogate_temperature=surrogate_temperature)
        raise InputError(f"unknown WTA kind {text!r}")

    def __str__(self) -> str:
        if self.variant == "topk":
            return f"topk:{self.k}"
        if self.variant == "sparsemax" and self.binarize_support:
            return "sparsemax-bin"
        return self.variant

    @property
    def binary(self) -> bool:
        return self.variant in ("hard", "topk") or self.binarize_support


def _prepare(a, allowed):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise InputError("WTA input must be a non-empty vector")
    if allowed is None:
        return a, None
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), a.shape)
    if not np.all(allowed.any(axis=-1)):
        raise ContractError("WTA row with every entry masked has no candidate")
    return a, allowed


def _candidate_keys(a, allowed):
    """Masked entries sit strictly below every candidate; no infinities involved."""
    if allowed is None:
        return a
    floor = a.min(axis=-1, keepdims=True) - 1.0
    return np.where(allowed, a, floor)


def hard_wta(a, allowed=None) -> np.ndarray:
    """Binary one-hot at the (lowest-index) argmax of the candidates."""
    a, allowed = _prepare(a, allowed)
    key = _candidate_keys(a, allowed)
    win = np.argmax(key, axis=-1)
    out = np.zeros_like(a)
    np.put_along_axis(out, win[..., None], 1.0, axis=-1)
    return out


def topk_wta(a, k: int, allowed=None) -> np.ndarray:
    """Binary mask of the ``min(k, candidates)`` largest entries."""
    a, allowed = _prepare(a, allowed)
    n = a.shape[-1]
    if int(k) != k or not 1 <= k <= n:
        raise InputError(f"top-k needs 1 <= k <= {n}, got {k}")
    key = _candidate_keys(a, allowed)
    order = np.argsort(-key, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(n), order.shape), axis=-1)
    limit = k if allowed is None else np.minimum(k, allowed.sum(axis=-1, keepdims=True))
    return (rank < limit).astype(np.float64)


def _sparsemax_tau(a: np.ndarray) -> np.ndarray:
    n = a.shape[-1]
    z = -np.sort(-a, axis=-1)
    cs = np.cumsum(z, axis=-1)
    ks = np.arange(1, n + 1, dtype=np.float64)
    cond = 1.0 + ks * z > cs
    k = np.where(cond, ks, 0.0).max(axis=-1, keepdims=True)
    csk = np.take_along_axis(cs, k.astype(np.int64) - 1, axis=-1)
    return (csk - 1.0) / k


def _sparsemax_keys(a, allowed):
    if allowed is None:
        return a
    # two below the smallest value keeps padded entries under the threshold
    floor = a.min(axis=-1, keepdims=True) - 2.0
    return np.where(allowed, a, floor)


def sparsemax_threshold(a):
    """Threshold ``tau`` and support ``{i : a_i > tau}`` of a 1-D vector."""
    a, _ = _prepare(a, None)
    if a.ndim != 1:
        raise InputError("sparsemax_threshold takes one vector")
    tau = float(_sparsemax_tau(a)[0])
    support = frozenset(int(i) for i in np.flatnonzero(a > tau))
    return tau, support


def sparsemax(a, allowed=None) -> np.ndarray:
    """Euclidean projection onto the probability simplex, ``max(a - tau, 0)``."""
    a, allowed = _prepare(a, allowed)
    key = _sparsemax_keys(a, allowed)
    tau = _sparsemax_tau(key)
    out = np.maximum(key - tau, 0.0)
    if allowed is not None:
        out = out * allowed
    return out


def sparsemax_support(a, allowed=None) -> np.ndarray:
    """Binary indicator of the sparsemax support."""
    return (sparsemax(a, allowed) > 0).astype(np.float64)


def softmax_tau(a, tau: float = 1.0, allowed=None) -> np.ndarray:
    """Temperature softmax ``exp(a/tau) / sum exp(a/tau)``, stabilised by max."""
    if not tau > 0:
        raise InputError(f"temperature must be positive, got {tau}")
    a, allowed = _prepare(a, allowed)
    return ad.masked_softmax_values(a, allowed, tau)


def wta_backward(a, upstream, tau_sg: float = 1.0, allowed=None) -> np.ndarray:
    """Softmax surrogate: ``J^T upstream`` with ``J = d softmax(a / tau_sg) / da``."""
    a, allowed = _prepare(a, allowed)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != a.shape:
        raise InputError(f"upstream shape {upstream.shape} != input shape {a.shape}")
    p = ad.masked_softmax_values(a, allowed, tau_sg)
    return ad.softmax_jvp_t(p, upstream, tau_sg)


def sparsemax_backward(a, upstream, allowed=None) -> np.ndarray:
    """Exact sparsemax ``J^T g = s * (g - <s, g> / |S|)`` with ``s`` the support."""
    s = sparsemax_support(a, allowed)
    upstream = np.asarray(upstream, dtype=np.float64)
    return s * (upstream - (s * upstream).sum(axis=-1, keepdims=True) / s.sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# autodiff ops
# ---------------------------------------------------------------------------


def _surrogate_bw(inputs, g, allowed=None, tau_sg=1.0, **_):
    (a,) = inputs
    return (wta_backward(a, g, tau_sg, allowed),)


def _softmax_twin(a, allowed=None, tau_sg=1.0, **_):
    return softmax_tau(a, tau_sg, allowed)


hard_wta_op = ad.register_custom_grad(
    lambda a, allowed=None, tau_sg=1.0: hard_wta(a, allowed),
    _surrogate_bw, twin=_softmax_twin, name="hard_wta", domain=ad.BINARY)

topk_wta_op = ad.register_custom_grad(
    lambda a, k=1, allowed=None, tau_sg=1.0: topk_wta(a, k, allowed),
    _surrogate_bw, twin=_softmax_twin, name="topk_wta", domain=ad.BINARY)

sparsemax_support_op = ad.register_custom_grad(
    lambda a, allowed=None, tau_sg=1.0: sparsemax_support(a, allowed),
    _surrogate_bw, twin=_softmax_twin, name="sparsemax_support", domain=ad.BINARY)

sparsemax_op = ad.register_custom_grad(
    lambda a, allowed=None: sparsemax(a, allowed),
    lambda inputs, g, allowed=None: (sparsemax_backward(inputs[0], g, allowed),),
    twin=None, name="sparsemax")


def apply_wta(scores, kind: WTAKind, allowed=None) -> ad.Tensor:
    """Differentiable WTA over the last axis of ``scores``."""
    tau = kind.surrogate_temperature
    if kind.variant == "hard":
        return hard_wta_op(scores, allowed=allowed, tau_sg=tau)
    if kind.variant == "topk":
        n = np.shape(ad.as_tensor(scores).data)[-1]
        return topk_wta_op(scores, k=min(kind.k, n), allowed=allowed, tau_sg=tau)
    if kind.binarize_support:
        return sparsemax_support_op(scores, allowed=allowed, tau_sg=tau)
    return sparsemax_op(scores, allowed=allowed)
