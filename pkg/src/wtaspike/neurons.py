"""Spiking neuron dynamics: ternary LIF (T-LIF) and normalized-integer LIF (NI-LIF).

Both neurons integrate ``U = H + X`` and carry a membrane ``H`` between time
steps; the carry starts at zero for every sequence.

T-LIF emits ``S = b * alpha`` with ``b = +1`` if ``U > alpha``, ``-1`` if
``U < -alpha``, else 0, and resets ``H' = V_reset * |b| + beta * U * (1 - |b|)``.
Training uses a rectangular surrogate of width 1 centred on each threshold.

NI-LIF emits ``S = clip(round(U), 0, D) / D`` and keeps ``H' = beta * (U - S * D)``.
At inference a value ``k / D`` unfolds into ``k`` binary spikes over ``D``
sub-steps (:func:`nilif_unfold`).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, InputError

SURROGATE_WIDTH = 1.0


@dataclass(frozen=True)
class TLIFParams:
    alpha: float = 1.0
    beta: float = 0.5
    v_reset: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise InputError(f"T-LIF alpha must be positive, got {self.alpha}")
        if not 0 < self.beta < 1:
            raise InputError(f"T-LIF beta must lie in (0, 1), got {self.beta}")


@dataclass(frozen=True)
class NILIFParams:
    d_max: int = 4
    beta: float = 0.5

    def __post_init__(self):
        if int(self.d_max) != self.d_max or self.d_max < 1:
            raise InputError(f"NI-LIF d_max must be a positive integer, got {self.d_max}")
        if not 0 < self.beta <= 1:
            raise InputError(f"NI-LIF beta must lie in (0, 1], got {self.beta}")


@dataclass
class NeuronState:
    """Membrane carry ``H[t-1]``."""

    h: Tensor

    @classmethod
    def zeros(cls, shape) -> "NeuronState":
        return cls(Tensor(np.zeros(shape)))


def _check_shape(state: NeuronState, x: Tensor) -> None:
    if state.h.shape != x.shape:
        raise DimensionError(f"neuron input {x.shape} does not match membrane {state.h.shape}")


# ---------------------------------------------------------------------------
# T-LIF
# ---------------------------------------------------------------------------


def _ramp(x: np.ndarray) -> np.ndarray:
    return np.clip(x / SURROGATE_WIDTH + 0.5, 0.0, 1.0)


def _rect(x: np.ndarray) -> np.ndarray:
    return (np.abs(x) < SURROGATE_WIDTH / 2) / SURROGATE_WIDTH


def _ternary_fwd(u, alpha):
    return alpha * ((u > alpha).astype(np.float64) - (u < -alpha))


def _ternary_twin(u, alpha):
    return alpha * (_ramp(u - alpha) - _ramp(-u - alpha))


def _ternary_bw(inputs, g):
    u, alpha = inputs
    du = alpha * (_rect(u - alpha) + _rect(u + alpha))
    dalpha = (_ramp(u - alpha) - _ramp(-u - alpha)) + alpha * (_rect(u + alpha) - _rect(u - alpha))
    return g * du, ad._unbroadcast(g * dalpha, np.shape(alpha))


ternary_spike = ad.register_custom_grad(_ternary_fwd, _ternary_bw, twin=_ternary_twin,
                                        name="ternary_spike", domain=ad.TERNARY)


def _gate_fwd(u, alpha):
    return ((u > alpha) | (u < -alpha)).astype(np.float64)


def _gate_bw(inputs, g):
    u, alpha = inputs
    return np.zeros_like(u), np.zeros(np.shape(alpha))


# |b| is treated as a constant in backward (reset is detached); it is piecewise
# constant, so it is its own twin.
fire_gate = ad.register_custom_grad(_gate_fwd, _gate_bw, twin=_gate_fwd, name="fire_gate")


def tlif_step(params: TLIFParams, state: NeuronState, x, alpha: Tensor | None = None):
    """One T-LIF step. ``alpha`` overrides ``params.alpha`` with a learnable scalar."""
    x = ad.as_tensor(x)
    _check_shape(state, x)
    a = alpha if alpha is not None else Tensor(np.float64(params.alpha))
    u = ad.add(state.h, x)
    s = ternary_spike(u, a)
    gate = fire_gate(u, a)
    keep = ad.sub(1.0, gate)
    h = ad.add(ad.scale(gate, params.v_reset), ad.mul(ad.scale(u, params.beta), keep))
    return s, NeuronState(h)


# ---------------------------------------------------------------------------
# NI-LIF
# ---------------------------------------------------------------------------


def nilif_step(params: NILIFParams, state: NeuronState, x):
    """One NI-LIF step; spikes take values in ``{0, 1/D, ..., 1}``."""
    x = ad.as_tensor(x)
    _check_shape(state, x)
    d = int(params.d_max)
    u = ad.add(state.h, x)
    q = ad.quantize(u, 0.0, float(d))
    s = ad.divide(q, d)
    s.domain = ad.REAL if ad.is_twin_mode() else ad.nint_domain(d)
    h = ad.scale(ad.sub(u, q), params.beta)
    return s, NeuronState(h)


def nilif_unfold(s, d_max: int) -> np.ndarray:
    """Binary train of length ``D`` with ``s * D`` ones, earliest first.

    Accepts a scalar or an array; the sub-step axis is appended last.
    """
    d = int(d_max)
    arr = np.asarray(s, dtype=np.float64)
    k = arr * d
    kr = np.rint(k)
    if np.any(np.abs(k - kr) > 1e-9) or np.any(kr < 0) or np.any(kr > d):
        raise ContractError(f"nilif_unfold: s * D must be an integer in [0, {d}]")
    steps = np.arange(d)
    return (steps < kr[..., None]).astype(np.int8)


# ---------------------------------------------------------------------------
# sequences and layers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NeuronSpec:
    """Which neuron a spiking layer uses and with what constants."""

    kind: str = "nilif"  # "nilif" | "tlif"
    d_max: int = 4
    beta: float = 0.5
    alpha: float = 1.0
    v_reset: float = 0.0

    def __post_init__(self):
        if self.kind not in ("nilif", "tlif"):
            raise InputError(f"unknown neuron kind {self.kind!r}")
        self.params()

    def params(self):
        if self.kind == "tlif":
            return TLIFParams(self.alpha, self.beta, self.v_reset)
        return NILIFParams(self.d_max, self.beta)

    @property
    def domain(self) -> str:
        return ad.TERNARY if self.kind == "tlif" else ad.nint_domain(self.d_max)

    @property
    def levels(self) -> int:
        """Binary sub-steps per time step once unfolded."""
        return int(self.d_max) if self.kind == "nilif" else 1

    def value_set(self) -> np.ndarray:
        if self.kind == "tlif":
            return np.array([-self.alpha, 0.0, self.alpha])
        return np.arange(self.d_max + 1) / self.d_max


def run_sequence(spec: NeuronSpec, xs, alpha: Tensor | None = None,
                 return_state: bool = False):
    """Fold one neuron step over axis 0 of ``xs``, starting from ``H = 0``."""
    xs = ad.as_tensor(xs)
    if xs.ndim == 0:
        raise DimensionError("run_sequence needs a leading time axis")
    steps = xs.shape[0]
    state = NeuronState.zeros(xs.shape[1:])
    if steps == 0:
        out = Tensor(np.zeros(xs.shape), domain=spec.domain)
        return (out, state) if return_state else out
    params = spec.params()
    spikes = []
    for t in range(steps):
        x_t = xs[t]
        if spec.kind == "tlif":
            s, state = tlif_step(params, state, x_t, alpha)
        else:
            s, state = nilif_step(params, state, x_t)
        spikes.append(s)
    out = ad.stack(spikes, axis=0)
    return (out, state) if return_state else out


class SpikeLayer:
    """A named spiking-neuron layer over a ``[T, ...]`` input.

    For T-LIF the spike magnitude ``alpha`` is a learnable scalar that stays
    constant across time steps.
    """

    def __init__(self, name: str, spec: NeuronSpec, alpha: Tensor | None = None):
        self.name = name
        self.spec = spec
        if spec.kind == "tlif" and alpha is None:
            alpha = Tensor(np.float64(spec.alpha), requires_grad=True)
        self.alpha = alpha if spec.kind == "tlif" else None

    def __call__(self, xs) -> Tensor:
        from . import energy

        out = run_sequence(self.spec, xs, self.alpha)
        energy.record_spikes(self.name, out)
        energy.trace_tensor(self.name, out)
        return out
