"""WE-/WD-Spikingformer mini models.

The decoder (causal) and encoder variants share one layout::

    x0   = SN(token_emb[ids] + pos_emb[:N])          replicated over T steps
    x'_l = Attn(x_{l-1}) + x_{l-1}                   CWSSA or WSSA
    x_l  = SMLP(x'_l) + x'_l                         SN-Linear-SN-Linear
    logits = mean_T(Linear_head(SN(x_L)))

Residual sums are real-valued; every sub-module starts with a spiking layer,
so each Linear consumes spikes. There are no normalisation layers.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig, SpikingSelfAttention
from .autodiff import Tensor
from .errors import ConfigError, InputError
from .layers import Linear
from .neurons import NeuronSpec, SpikeLayer
from .rng import SplitMix64
from .wta import WTAKind


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 16
    d: int = 64
    layers: int = 2
    heads: int = 4
    time_steps: int = 2
    neuron: str = "nilif"
    d_max: int = 4
    beta: float = 0.5
    alpha: float = 1.0
    v_reset: float = 0.0
    wta: str = "hard"
    attention: str = "wta"
    causal: bool = True
    max_len: int = 64
    mlp_ratio: int = 4
    scale_s: float = 0.125
    tau_sg: float = 1.0
    fold_scale: bool = True
    init_gain: float = 8.0
    head_gain: float = 2.0   # readout only scales logits; keeps a fresh model near uniform
    embed_init: float = 4.0
    bias_init: float = 0.0

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"model.d={self.d} is not divisible by model.heads={self.heads}")
        for name in ("vocab_size", "d", "layers", "heads", "time_steps", "max_len", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        try:
            self.neuron_spec()
            self.attention_config()
        except InputError as exc:
            raise ConfigError(str(exc)) from None

    def neuron_spec(self) -> NeuronSpec:
        return NeuronSpec(self.neuron, self.d_max, self.beta, self.alpha, self.v_reset)

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            num_heads=self.heads,
            head_dim=self.d // self.heads,
            scale_s=self.scale_s,
            wta=WTAKind.parse(self.wta, self.tau_sg),
            causal=self.causal,
            fold_scale_at_inference=self.fold_scale,
            mechanism=self.attention,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown model keys: {', '.join(sorted(unknown))}")
        return cls(**values)


class Block:
    """One residual block: attention then SMLP."""

    def __init__(self, name: str, config: ModelConfig, rng: SplitMix64):
        spec = config.neuron_spec()
        d, hidden = config.d, config.d * config.mlp_ratio
        self.name = name
        self.causal = config.causal
        self.attn = SpikingSelfAttention(name, config.attention_config(), spec, rng,
                                         config.init_gain, config.bias_init)
        self.sn1 = SpikeLayer(f"{name}.mlp.sn1", spec)
        self.fc1 = Linear.init(f"{name}.mlp.fc1", rng, d, hidden, config.init_gain,
                               bias_init=config.bias_init)
        self.sn2 = SpikeLayer(f"{name}.mlp.sn2", spec)
        self.fc2 = Linear.init(f"{name}.mlp.fc2", rng, hidden, d, config.init_gain)

    def spike_layers(self):
        return self.attn.spike_layers() + (self.sn1, self.sn2)

    def parameters(self) -> dict:
        out = self.attn.parameters()
        out.update(self.fc1.parameters())
        out.update(self.fc2.parameters())
        for sn in (self.sn1, self.sn2):
            if sn.alpha is not None:
                out[f"{sn.name}.alpha"] = sn.alpha
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return decoder_block(x, self) if self.causal else encoder_block(x, self)


def smlp(x: Tensor, block: Block) -> Tensor:
    """``Linear(SN(Linear(SN(x))))``, d -> r*d -> d, no other activations."""
    return block.fc2(block.sn2(block.fc1(block.sn1(x))))


def decoder_block(x: Tensor, block: Block) -> Tensor:
    from .attention import cwssa

    h = ad.add(cwssa(x, block.attn), x)
    return ad.add(smlp(h, block), h)


def encoder_block(x: Tensor, block: Block) -> Tensor:
    from .attention import wssa

    h = ad.add(wssa(x, block.attn), x)
    return ad.add(smlp(h, block), h)


class SpikingTransformer:
    """Token ids ``[B, N]`` to logits ``[B, N, V]``."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = SplitMix64(seed)
        d = config.d
        e = config.embed_init
        self.tok_emb = Tensor(rng.uniform(-e, e, (config.vocab_size, d)), requires_grad=True)
        self.pos_emb = Tensor(rng.uniform(-e, e, (config.max_len, d)), requires_grad=True)
        spec = config.neuron_spec()
        self.sn_embed = SpikeLayer("embed.sn", spec)
        self.blocks = [Block(f"blocks.{i}", config, rng) for i in range(config.layers)]
        self.sn_head = SpikeLayer("head.sn", spec)
        self.head = Linear.init("head", rng, d, config.vocab_size, config.head_gain)

    @property
    def kind(self) -> str:
        return "decoder" if self.config.causal else "encoder"

    def spike_layers(self):
        out = [self.sn_embed]
        for blk in self.blocks:
            out.extend(blk.spike_layers())
        out.append(self.sn_head)
        return out

    def parameters(self) -> dict:
        """Name -> leaf tensor, in a fixed order."""
        out = {"embed.tok": self.tok_emb, "embed.pos": self.pos_emb}
        if self.sn_embed.alpha is not None:
            out["embed.sn.alpha"] = self.sn_embed.alpha
        for blk in self.blocks:
            out.update(blk.parameters())
        if self.sn_head.alpha is not None:
            out["head.sn.alpha"] = self.sn_head.alpha
        out.update(self.head.parameters())
        return out

    def state_dict(self) -> dict:
        return {name: t.data.copy() for name, t in self.parameters().items()}

    def load_state_dict(self, state: dict) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise InputError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in params.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise InputError(f"{name}: shape {arr.shape} does not match {t.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def forward(self, tokens) -> Tensor:
        return forward(self, tokens)

    __call__ = forward


def embed(tokens, model: SpikingTransformer) -> Tensor:
    """Token plus positional embedding, repeated over ``T`` steps, then spiked."""
    ids = np.asarray(tokens)
    cfg = model.config
    if ids.ndim != 2:
        raise InputError(f"tokens must be [B, N], got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError("token ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise InputError(f"token id outside [0, {cfg.vocab_size})")
    n = ids.shape[1]
    if n > cfg.max_len:
        raise InputError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    x = ad.add(ad.embedding(model.tok_emb, ids), model.pos_emb[:n])
    xs = ad.stack([x] * cfg.time_steps, axis=0)
    return model.sn_embed(xs)


def forward(model: SpikingTransformer, tokens) -> Tensor:
    x = embed(tokens, model)
    for blk in model.blocks:
        x = blk(x)
    logits_t = model.head(model.sn_head(x))
    return ad.mean(logits_t, axis=0)
