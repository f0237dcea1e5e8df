"""Spike-driven transformer toolkit with winner-take-all attention."""
from .autodiff import Tensor, backward, no_grad, smooth_twin
from .model import ModelConfig, SpikingTransformer
from .wta import WTAKind, hard_wta, sparsemax, topk_wta

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "SpikingTransformer",
    "Tensor",
    "WTAKind",
    "backward",
    "hard_wta",
    "no_grad",
    "smooth_twin",
    "sparsemax",
    "topk_wta",
    "__version__",
]
