"""Masked and causal language-modelling objectives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, InputError
from .rng import SplitMix64, derive

MASK, RANDOM, KEEP = 0, 1, 2


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class MaskingPlan:
    """Selected positions per sequence and what was put there.

    ``positions`` and ``actions`` are lists with one int array per row.
    """

    positions: tuple
    actions: tuple
    seed: int

    width: int

    @property
    def selection(self) -> np.ndarray:
        """Boolean ``[B, N]`` mask of the selected positions."""
        out = np.zeros((len(self.positions), self.width), dtype=bool)
        for row, pos in enumerate(self.positions):
            out[row, pos] = True
        return out

    @property
    def size(self) -> int:
        return int(sum(len(p) for p in self.positions))


def _split_counts(m: int):
    """80/10/10 split of ``m`` selected positions into (mask, random, keep)."""
    n_mask = round_half_up(0.8 * m)
    n_random = round_half_up(0.1 * m)
    n_random = min(n_random, m - n_mask)
    return n_mask, n_random, m - n_mask - n_random


def mlm_mask(tokens, ratio: float, seed: int, vocab_size: int, mask_id: int | None = None,
             maskable=None):
    """Corrupt ``tokens`` [B, N] for masked language modelling.

    Per row, ``round_half_up(ratio * N)`` positions are drawn uniformly without
    replacement; 80% become ``mask_id`` (default ``vocab_size - 1``), 10% a
    uniformly random non-mask token and 10% stay unchanged. ``maskable``
    optionally restricts the candidate positions (e.g. to exclude padding).
    """
    if not 0.0 <= ratio <= 1.0:
        raise InputError(f"mask ratio must lie in [0, 1], got {ratio}")
    toks = np.array(tokens, dtype=np.int64, copy=True)
    if toks.ndim == 1:
        toks = toks[None, :]
    if toks.ndim != 2:
        raise DimensionError(f"tokens must be [B, N], got shape {toks.shape}")
    mask_id = vocab_size - 1 if mask_id is None else mask_id
    b, n = toks.shape
    positions, actions = [], []
    for row in range(b):
        rng = SplitMix64(derive(seed, "mlm", row))
        cand = np.arange(n) if maskable is None else np.flatnonzero(np.asarray(maskable)[row])
        m = min(round_half_up(ratio * n), len(cand))
        pos = np.sort(cand[rng.sample_without_replacement(len(cand), m)]) if m else np.zeros(0, np.int64)
        n_mask, n_random, _ = _split_counts(m)
        act = np.full(m, KEEP, dtype=np.int64)
        order = rng.permutation(m)
        act[order[:n_mask]] = MASK
        act[order[n_mask:n_mask + n_random]] = RANDOM
        for p, a in zip(pos, act):
            if a == MASK:
                toks[row, p] = mask_id
            elif a == RANDOM:
                # random replacement never yields the mask symbol itself
                r = int(rng.integers(0, vocab_size - 1, 1)[0])
                toks[row, p] = r + (r >= mask_id)
        positions.append(pos.astype(np.int64))
        actions.append(act)
    plan = MaskingPlan(tuple(positions), tuple(actions), seed, n)
    return toks, plan


def mlm_loss(logits: Tensor, original_tokens, plan: MaskingPlan) -> Tensor:
    """Mean NLL of the original tokens over the selected positions only."""
    return ad.cross_entropy_from_logits(logits, np.asarray(original_tokens), mask=plan.selection)


def clm_loss(logits: Tensor, tokens) -> Tensor:
    """Mean NLL of token ``t+1`` read from the logits at ``t``, positions ``0..N-2``."""
    toks = np.asarray(tokens)
    if toks.ndim != 2:
        raise DimensionError(f"tokens must be [B, N], got shape {toks.shape}")
    if toks.shape[1] < 2:
        raise InputError("causal LM loss needs sequences of length >= 2")
    return ad.cross_entropy_from_logits(logits[:, :-1], toks[:, 1:])
