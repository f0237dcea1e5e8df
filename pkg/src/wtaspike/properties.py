"""Quick randomized invariant checks behind ``wtaspike property-suite``.

Each check returns a :class:`Check`; all randomness comes from one seed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, SpikingTransformer
from .neurons import NILIFParams, NeuronState, TLIFParams, nilif_unfold, tlif_step
from .rng import SplitMix64, derive
from .wta import hard_wta, softmax_tau, sparsemax, sparsemax_threshold, topk_wta


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def _vectors(rng: SplitMix64, count: int, max_n: int):
    for _ in range(count):
        n = rng.integers(1, max_n + 1)
        yield rng.normal(0.0, 1.0, n)


def check_wta_scale_invariance(rng, trials=1000) -> Check:
    bad = 0
    for a in _vectors(rng, trials, 32):
        s = float(np.exp(rng.uniform(-6.0, 6.0)))
        bad += not np.array_equal(hard_wta(s * a), hard_wta(a))
    return Check("hard_wta(s*a) == hard_wta(a)", bad == 0, f"{bad}/{trials} mismatches")


def check_topk_cardinality(rng, trials=500) -> Check:
    bad = 0
    for a in _vectors(rng, trials, 32):
        k = rng.integers(1, len(a) + 1)
        out = topk_wta(a, k)
        bad += not (out.sum() == k and set(np.unique(out)) <= {0.0, 1.0})
    return Check("top-k emits exactly k binary winners", bad == 0, f"{bad}/{trials} violations")


def check_sparsemax_simplex(rng, trials=1000) -> Check:
    worst = 0.0
    bad = 0
    for a in _vectors(rng, trials, 16):
        y = sparsemax(a)
        tau, support = sparsemax_threshold(a)
        worst = max(worst, abs(y.sum() - 1.0))
        bad += bool(np.any(y < 0)) or set(np.flatnonzero(y > 0)) != set(support)
        bad += not np.array_equal(y, np.maximum(a - tau, 0.0))
    return Check("sparsemax lies on the simplex with its threshold",
                 bad == 0 and worst <= 1e-9, f"max |sum-1| = {worst:.2e}, {bad} violations")


def check_softmax_limit(rng, trials=1000, tau=1e-3) -> Check:
    """Only vectors whose top margin clears ``tau * ln((n-1)/1e-3)`` are in scope here."""
    worst = 0.0
    used = 0
    for a in _vectors(rng, trials, 64):
        if len(a) < 2:
            continue
        top = np.sort(a)[-2:]
        if top[1] - top[0] < tau * np.log((len(a) - 1) / 1e-3):
            continue
        used += 1
        worst = max(worst, float(np.abs(softmax_tau(a, tau) - hard_wta(a)).max()))
    return Check("softmax_tau -> hard_wta for well-separated maxima", worst <= 1e-3,
                 f"max deviation {worst:.2e} over {used} vectors")


def check_unfold(rng, trials=200) -> Check:
    bad = 0
    for d in range(1, 9):
        for k in range(d + 1):
            train = nilif_unfold(np.array([k / d]), d)
            bad += int(train.sum()) != k
    for _ in range(trials):
        d = rng.integers(1, 9)
        ks = rng.integers(0, d + 1, 6)
        w = rng.integers(-5, 6, (6, 3)).astype(np.float64)
        trains = nilif_unfold(ks / d, d).astype(np.float64)
        bad += not np.array_equal(sum(trains[:, j] @ w for j in range(d)), ks.astype(np.float64) @ w)
    return Check("NI-LIF unfold preserves counts and linear effects", bad == 0, f"{bad} violations")


def check_tlif_reset(rng, trials=200) -> Check:
    bad = 0
    for _ in range(trials):
        p = TLIFParams(alpha=float(rng.uniform(0.2, 2.0)), beta=float(rng.uniform(0.05, 0.95)),
                       v_reset=float(rng.uniform(-0.5, 0.5)))
        state = NeuronState.zeros((8,))
        for _ in range(5):
            s, state = tlif_step(p, state, ad.Tensor(rng.normal(0.0, 2.0, 8)))
            fired = np.abs(s.data) == p.alpha
            bad += not np.all(state.h.data[fired] == p.v_reset)
    return Check("T-LIF resets to V_reset on every spike", bad == 0, f"{bad} violations")


def check_causality(rng, trials=20) -> Check:
    cfg = ModelConfig(vocab_size=11, d=16, layers=1, heads=2, time_steps=2, max_len=12,
                      init_gain=8.0, embed_init=4.0)
    model = SpikingTransformer(cfg, seed=int(rng.integers(0, 2 ** 31)))
    bad = 0
    with ad.no_grad():
        for _ in range(trials):
            x = rng.integers(0, 11, (1, 12))
            t = rng.integers(0, 11)
            y = x.copy()
            y[0, t + 1:] = rng.integers(0, 11, 11 - t)
            a, b = model(x).data, model(y).data
            bad += not np.array_equal(a[:, :t + 1], b[:, :t + 1])
    return Check("decoder logits ignore future tokens", bad == 0, f"{bad}/{trials} leaks")


CHECKS = (check_wta_scale_invariance, check_topk_cardinality, check_sparsemax_simplex,
          check_softmax_limit, check_unfold, check_tlif_reset, check_causality)


def run_all(seed: int = 0) -> list:
    return [fn(SplitMix64(derive(seed, fn.__name__))) for fn in CHECKS]
