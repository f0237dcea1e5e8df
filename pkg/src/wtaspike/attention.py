"""Spiking self-attention: WSSA, causal CWSSA, and the SSA / softmax-SSA baselines.

The WTA attention path for an input ``X`` of shape ``[T, B, N, d]``::

    X' = SN(X)
    Q, K, V = SN_q(Linear_q(X')), SN_k(Linear_k(X')), SN_v(Linear_v(X'))
    A = WTA(mask(Q @ K^T * s))             # per time step and head
    out = Linear_o(SN(A @ V))

With binary ``A`` the product ``A @ V`` only selects and adds rows of ``V``.
Spike-by-spike score products are computed as integer coincidence counts, so
with NI-LIF spikes ``{0..D}/D`` every score is exactly ``count * s / D**2``.
At inference the positive factor ``s / D**2`` is dropped for Hard/Top-K WTA,
since it cannot move an argmax.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import energy
from .autodiff import Tensor
from .errors import DimensionError, InputError
from .layers import Linear
from .neurons import NeuronSpec, SpikeLayer
from .rng import SplitMix64
from .wta import WTAKind, apply_wta

MECHANISMS = ("wta", "softmax", "ssa")


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int = 4
    head_dim: int = 16
    scale_s: float = 0.125
    wta: WTAKind = field(default_factory=WTAKind)
    causal: bool = False
    fold_scale_at_inference: bool = True
    mechanism: str = "wta"

    def __post_init__(self):
        if self.num_heads < 1 or self.head_dim < 1:
            raise InputError("attention needs at least one head of positive width")
        if not self.scale_s > 0:
            raise InputError(f"scale s must be positive, got {self.scale_s}")
        if self.mechanism not in MECHANISMS:
            raise InputError(f"unknown attention mechanism {self.mechanism!r}")

    @property
    def d(self) -> int:
        return self.num_heads * self.head_dim


def causal_allowed(n: int) -> np.ndarray:
    """``allowed[i, j]`` is true for keys ``j <= i``."""
    return np.tril(np.ones((n, n), dtype=bool))


# ---------------------------------------------------------------------------
# coincidence products
# ---------------------------------------------------------------------------


def _levels_of(domain: str, fallback: int) -> int:
    if domain.startswith("nint:"):
        return ad.domain_levels(domain)
    return fallback


def _coincidence_fwd(a, b, da=1, db=1, exact=True):
    if exact:
        return np.rint(a * da) @ np.rint(b * db)
    return (a @ b) * (da * db)


def _coincidence_twin(a, b, da=1, db=1, exact=True):
    return (a @ b) * (da * db)


def _coincidence_bw(inputs, g, da=1, db=1, exact=True):
    a, b = inputs
    c = da * db
    ga = ad._unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape) * c
    gb = ad._unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape) * c
    return ga, gb


coincidence_matmul = ad.register_custom_grad(
    _coincidence_fwd, _coincidence_bw, twin=_coincidence_twin, name="coincidence", domain=ad.COUNT)


def spike_product(a: Tensor, b: Tensor, da: int, db: int) -> Tensor:
    """``(a * da) @ (b * db)``: exact integer counts when both sides are NI/binary spikes."""
    spikes = ad.is_spike_domain(a.domain) and ad.is_spike_domain(b.domain)
    exact = spikes and not ad.is_twin_mode() and ad.TERNARY not in (a.domain, b.domain)
    out = coincidence_matmul(a, b, da=da, db=db, exact=exact)
    if not spikes:
        out.domain = ad.REAL
    return out


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


class SpikingSelfAttention:
    """Parameters and spiking layers of one attention sub-module."""

    def __init__(self, name: str, config: AttentionConfig, neuron: NeuronSpec, rng: SplitMix64,
                 gain: float = 1.0, bias_init: float = 0.0):
        d = config.d
        self.name = name
        self.config = config
        self.neuron = neuron
        self.sn_in = SpikeLayer(f"{name}.attn.sn_in", neuron)
        self.lin_q = Linear.init(f"{name}.attn.qkv.q", rng, d, d, gain, bias_init=bias_init)
        self.lin_k = Linear.init(f"{name}.attn.qkv.k", rng, d, d, gain, bias_init=bias_init)
        self.lin_v = Linear.init(f"{name}.attn.qkv.v", rng, d, d, gain, bias_init=bias_init)
        self.sn_q = SpikeLayer(f"{name}.attn.sn_q", neuron)
        self.sn_k = SpikeLayer(f"{name}.attn.sn_k", neuron)
        self.sn_v = SpikeLayer(f"{name}.attn.sn_v", neuron)
        self.sn_out = SpikeLayer(f"{name}.attn.sn_out", neuron)
        # no bias on the output projection
        self.lin_o = Linear.init(f"{name}.attn.out", rng, d, d, gain, bias=False)

    def linears(self):
        return (self.lin_q, self.lin_k, self.lin_v, self.lin_o)

    def spike_layers(self):
        return (self.sn_in, self.sn_q, self.sn_k, self.sn_v, self.sn_out)

    def parameters(self) -> dict:
        out = {}
        for lin in self.linears():
            out.update(lin.parameters())
        for sn in self.spike_layers():
            if sn.alpha is not None:
                out[f"{sn.name}.alpha"] = sn.alpha
        return out

    def __call__(self, x: Tensor) -> Tensor:
        spikes = self.sn_in(x)
        q, k, v = qkv_project(spikes, self)
        return attend(q, k, v, self)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def qkv_project(x: Tensor, attn: SpikingSelfAttention):
    """``Q, K, V = SN(Linear(x))`` for spike-valued ``x`` of shape ``[T, B, N, d]``."""
    if x.ndim != 4 or x.shape[-1] != attn.config.d:
        raise DimensionError(f"qkv_project: expected [T, B, N, {attn.config.d}], got {x.shape}")
    q = attn.sn_q(attn.lin_q(x))
    k = attn.sn_k(attn.lin_k(x))
    v = attn.sn_v(attn.lin_v(x))
    return q, k, v


def split_heads(x: Tensor, heads: int) -> Tensor:
    t, b, n, d = x.shape
    return x.reshape(t, b, n, heads, d // heads).transpose(0, 1, 3, 2, 4)


def merge_heads(x: Tensor) -> Tensor:
    t, b, h, n, hd = x.shape
    return x.transpose(0, 1, 3, 2, 4).reshape(t, b, n, h * hd)


def _fold_active(config: AttentionConfig) -> bool:
    return (config.fold_scale_at_inference and config.mechanism == "wta"
            and config.wta.variant in ("hard", "topk") and not ad.is_grad_enabled()
            and not ad.is_twin_mode())


def attention_scores(q: Tensor, k: Tensor, config: AttentionConfig, name: str = "attn",
                     levels: int = 1):
    """Pre-WTA score map ``Q K^T * s`` of shape ``[T, B, heads, N, N]`` and its key mask.

    Returns ``(scores, allowed)``; ``allowed`` is ``None`` without causal masking.
    ``levels`` is the NI-LIF ``D`` of the spike inputs (1 for binary).
    """
    if q.shape != k.shape:
        raise DimensionError(f"attention_scores: Q {q.shape} vs K {k.shape}")
    t, b, n, d = q.shape
    qh = split_heads(q, config.num_heads)
    kh = split_heads(k, config.num_heads)
    dq = _levels_of(q.domain, levels)
    dk = _levels_of(k.domain, levels)
    energy.record_product(f"{name}.attn.scores", q, k, m=d, n=n, T=t, tokens=b * n, acs_per_event=n)
    counts = spike_product(qh, ad.swapaxes(kh, -1, -2), dq, dk)
    allowed = causal_allowed(n) if config.causal else None
    if _fold_active(config):
        scores = counts
    else:
        scores = ad.scale(counts, config.scale_s / (dq * dk))
        energy.record_float_op(f"{name}.attn.scale", config.num_heads * n, t, b * n)
    return scores, allowed


def _weighted_sum(a: Tensor, v: Tensor, config: AttentionConfig, name: str) -> Tensor:
    t, b, n, d = v.shape
    energy.trace_tensor(f"{name}.attn.map", a)
    energy.record_product(f"{name}.attn.av", a, v, m=n, n=d, T=t, tokens=b * n,
                          acs_per_event=config.head_dim)
    vh = split_heads(v, config.num_heads)
    return merge_heads(ad.matmul(a, vh))


def attend(q: Tensor, k: Tensor, v: Tensor, attn: SpikingSelfAttention) -> Tensor:
    """Attention core after projection, dispatching on the configured mechanism."""
    config = attn.config
    levels = attn.neuron.levels
    if config.mechanism == "ssa":
        mixed = ssa_baseline(q, k, v, config.scale_s, config.causal, name=attn.name,
                             heads=config.num_heads, levels=levels)
    elif config.mechanism == "softmax":
        scores, allowed = attention_scores(q, k, config, attn.name, levels)
        t, b, n, _ = q.shape
        a = ad.softmax(scores, allowed)
        energy.record_float_op(f"{attn.name}.attn.softmax", config.num_heads * n, t, b * n)
        mixed = _weighted_sum(a, v, config, attn.name)
    else:
        scores, allowed = attention_scores(q, k, config, attn.name, levels)
        t, b, n, _ = q.shape
        energy.record_compare(f"{attn.name}.attn.wta", scores.size)
        a = apply_wta(scores, config.wta, allowed)
        mixed = _weighted_sum(a, v, config, attn.name)
    return attn.lin_o(attn.sn_out(mixed))


def wssa(x: Tensor, attn: SpikingSelfAttention) -> Tensor:
    """Bidirectional WTA spiking self-attention."""
    if attn.config.causal:
        raise InputError("wssa needs an attention config with causal=False")
    return attn(x)


def cwssa(x: Tensor, attn: SpikingSelfAttention) -> Tensor:
    """Causal WTA spiking self-attention; position i sees keys 0..i only."""
    if not attn.config.causal:
        raise InputError("cwssa needs an attention config with causal=True")
    return attn(x)


def ssa_baseline(q: Tensor, k: Tensor, v: Tensor, s: float, causal: bool = False,
                 name: str = "attn", heads: int = 1, levels: int = 1) -> Tensor:
    """Pre-neuron ``Q K^T V * s`` (keys after the query zeroed when causal), no WTA, no softmax."""
    t, b, n, d = q.shape
    qh, kh, vh = (split_heads(x, heads) for x in (q, k, v))
    dq, dk, dv = (_levels_of(x.domain, levels) for x in (q, k, v))
    energy.record_product(f"{name}.attn.scores", q, k, m=d, n=n, T=t, tokens=b * n, acs_per_event=n)
    counts = spike_product(qh, ad.swapaxes(kh, -1, -2), dq, dk)
    if causal:
        counts = ad.mul(counts, causal_allowed(n).astype(np.float64))
        counts.domain = ad.COUNT if ad.is_spike_domain(q.domain) else ad.REAL
    energy.record_product(f"{name}.attn.av", counts, v, m=n, n=d, T=t, tokens=b * n,
                          acs_per_event=d // heads)
    mixed = spike_product(counts, vh, 1, dv)
    energy.record_float_op(f"{name}.attn.scale", d, t, b * n)
    return ad.scale(merge_heads(mixed), s / (dq * dk * dv))


def softmax_ssa_baseline(q: Tensor, k: Tensor, v: Tensor, s: float, causal: bool = False,
                         heads: int = 1) -> Tensor:
    """Pre-neuron ``softmax(mask(Q K^T * s)) V``: the non-spike-driven reference."""
    t, b, n, d = q.shape
    qh, kh, vh = (split_heads(x, heads) for x in (q, k, v))
    scores = ad.scale(ad.matmul(qh, ad.swapaxes(kh, -1, -2)), s)
    allowed = causal_allowed(n) if causal else None
    a = ad.softmax(scores, allowed)
    return merge_heads(ad.matmul(a, vh))
