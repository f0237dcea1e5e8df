"""Linear layers and parameter initialisation."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import energy
from .autodiff import Tensor
from .errors import DimensionError
from .rng import SplitMix64


def uniform_init(rng: SplitMix64, shape, fan_in: int, gain: float = 1.0) -> Tensor:
    """``U(-gain / sqrt(fan_in), gain / sqrt(fan_in))`` leaf parameter."""
    bound = gain / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, tuple(shape)), requires_grad=True)


class Linear:
    """``y = x @ W (+ b)`` over the last axis, reporting its input to the energy recorder."""

    def __init__(self, name: str, weight: Tensor, bias: Tensor | None = None):
        self.name = name
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, name: str, rng: SplitMix64, d_in: int, d_out: int, gain: float = 1.0,
             bias: bool = True, bias_init: float = 0.0) -> "Linear":
        w = uniform_init(rng, (d_in, d_out), d_in, gain)
        b = Tensor(np.full(d_out, float(bias_init)), requires_grad=True) if bias else None
        return cls(name, w, b)

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> dict:
        out = {f"{self.name}.weight": self.weight}
        if self.bias is not None:
            out[f"{self.name}.bias"] = self.bias
        return out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"{self.name}: input features {x.shape} vs weight {self.weight.shape}")
        energy.record_linear(self.name, x, self.d_in, self.d_out)
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = ad.add(y, self.bias)
        return y
