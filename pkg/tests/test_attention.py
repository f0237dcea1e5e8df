import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wtaspike import autodiff as ad
from wtaspike import energy
from wtaspike.attention import (AttentionConfig, SpikingSelfAttention, attention_scores, attend,
                                causal_allowed, cwssa, qkv_project, softmax_ssa_baseline, spike_product,
                                ssa_baseline, wssa)
from wtaspike.autodiff import Tensor
from wtaspike.errors import DimensionError, InputError
from wtaspike.neurons import NeuronSpec
from wtaspike.rng import SplitMix64
from wtaspike.wta import WTAKind

NI4 = NeuronSpec("nilif", d_max=4)


def make_attn(causal=False, wta="hard", mechanism="wta", heads=2, head_dim=4, seed=0, fold=True):
    cfg = AttentionConfig(num_heads=heads, head_dim=head_dim, wta=WTAKind.parse(wta), causal=causal,
                          mechanism=mechanism, fold_scale_at_inference=fold)
    return SpikingSelfAttention("blk", cfg, NI4, SplitMix64(seed), gain=8.0)


def spikes(rng, shape, d=4):
    return Tensor(rng.integers(0, d + 1, shape) / d, domain=ad.nint_domain(d))


def test_config_validation():
    with pytest.raises(InputError):
        AttentionConfig(scale_s=0.0)
    with pytest.raises(InputError):
        AttentionConfig(mechanism="linear")
    assert AttentionConfig(num_heads=4, head_dim=16).d == 64


def test_qkv_shapes_and_value_set(rng):
    attn = make_attn(heads=4, head_dim=4)
    x = spikes(rng, (4, 2, 8, 16))
    q, k, v = qkv_project(x, attn)
    for t in (q, k, v):
        assert t.shape == (4, 2, 8, 16)
        assert np.all(np.isin(t.data, np.arange(5) / 4))
    with pytest.raises(DimensionError):
        qkv_project(spikes(rng, (4, 2, 8, 12)), attn)


def test_qkv_quiescent_on_zero_input():
    attn = make_attn()
    for lin in attn.linears():
        if lin.bias is not None:
            lin.bias.data[:] = 0
    q, k, v = qkv_project(Tensor(np.zeros((2, 1, 3, 8)), domain=ad.nint_domain(4)), attn)
    assert not q.data.any() and not k.data.any() and not v.data.any()


def test_scores_are_integer_counts_times_scale(rng):
    cfg = AttentionConfig(num_heads=1, head_dim=6, fold_scale_at_inference=False)
    q, k = spikes(rng, (2, 1, 5, 6)), spikes(rng, (2, 1, 5, 6))
    scores, allowed = attention_scores(q, k, cfg, levels=4)
    assert allowed is None
    counts = scores.data / (cfg.scale_s / 16)
    np.testing.assert_array_equal(counts, np.rint(counts))
    expect = np.rint(q.data * 4) @ np.swapaxes(np.rint(k.data * 4), -1, -2)
    np.testing.assert_array_equal(counts[:, :, 0], expect)


def test_binary_one_hot_match_matrix():
    eye = Tensor(np.eye(3)[None, None], domain=ad.BINARY)
    cfg = AttentionConfig(num_heads=1, head_dim=3)
    with ad.no_grad():
        scores, _ = attention_scores(eye, eye, cfg)
    np.testing.assert_array_equal(scores.data[0, 0, 0], np.eye(3))


def test_fold_matches_unfolded_outputs(rng):
    x = spikes(rng, (2, 2, 6, 8))
    for wta in ("hard", "topk:2"):
        with ad.no_grad():
            a = make_attn(causal=True, wta=wta, fold=True)(x).data
            b = make_attn(causal=True, wta=wta, fold=False)(x).data
        assert a.tobytes() == b.tobytes()


def test_hard_attention_selects_one_allowed_key_per_row(rng):
    attn = make_attn(causal=True)
    with energy.tracing() as maps, ad.no_grad():
        attn(spikes(rng, (2, 1, 6, 8)))
    a = maps["blk.attn.map"]
    assert np.all(a.sum(-1) == 1)
    assert np.all(a[..., ~causal_allowed(6)] == 0)
    assert np.all(a[..., 0, 0] == 1)


def test_topk_rows_clip_to_allowed_keys(rng):
    attn = make_attn(causal=True, wta="topk:3")
    with energy.tracing() as maps, ad.no_grad():
        attn(spikes(rng, (1, 1, 5, 8)))
    assert maps["blk.attn.map"].sum(-1)[0, 0, 0].tolist() == [1, 2, 3, 3, 3]


@given(st.integers(0, 2 ** 31), st.integers(1, 5))
def test_cwssa_prefix_invariance(seed, t):
    rng = np.random.default_rng(seed)
    attn = make_attn(causal=True, seed=seed % 7)
    x = spikes(rng, (2, 1, 6, 8))
    y = x.data.copy()
    y[:, :, t:] = rng.integers(0, 5, y[:, :, t:].shape) / 4
    with ad.no_grad():
        a = cwssa(x, attn).data
        b = cwssa(Tensor(y, domain=x.domain), attn).data
    assert a[:, :, :t].tobytes() == b[:, :, :t].tobytes()


def test_single_token_attends_to_itself(rng):
    attn = make_attn()
    x = spikes(rng, (2, 1, 1, 8))
    q, k, v = qkv_project(attn.sn_in(x), attn)
    out = attend(q, k, v, attn)
    np.testing.assert_array_equal(out.data, attn.lin_o(attn.sn_out(v)).data)


def test_wssa_permutation_equivariance_sparsemax(rng):
    attn = make_attn(wta="sparsemax")
    perm = [3, 0, 2, 1]
    x = spikes(rng, (2, 1, 4, 8))
    with ad.no_grad():
        a = wssa(x, attn).data
        b = wssa(Tensor(x.data[:, :, perm], domain=x.domain), attn).data
    np.testing.assert_allclose(b, a[:, :, perm], atol=1e-12)


def test_hard_wta_permutation_equivariant_up_to_ties(rng):
    # lowest-index tie breaking is order dependent; scores permute exactly and the
    # winner under any order is always one of the maximal keys
    attn = make_attn()
    perm = np.array([3, 0, 2, 1])
    x = spikes(rng, (2, 1, 4, 8))
    xp = Tensor(x.data[:, :, perm], domain=x.domain)
    with ad.no_grad(), energy.tracing() as maps:
        q, k, _ = qkv_project(attn.sn_in(x), attn)
        s1, _ = attention_scores(q, k, attn.config, levels=4)
        q, k, _ = qkv_project(attn.sn_in(xp), attn)
        s2, _ = attention_scores(q, k, attn.config, levels=4)
        wssa(xp, attn)
    np.testing.assert_array_equal(s2.data, s1.data[..., perm, :][..., perm])
    win = maps["blk.attn.map"].argmax(-1)
    best = s2.data.max(-1)
    assert np.all(np.take_along_axis(s2.data, win[..., None], -1)[..., 0] == best)


def test_wrong_causal_flag_rejected(rng):
    x = spikes(rng, (1, 1, 2, 8))
    with pytest.raises(InputError):
        wssa(x, make_attn(causal=True))
    with pytest.raises(InputError):
        cwssa(x, make_attn(causal=False))


def test_ssa_hand_instance():
    q = Tensor(np.array([[[[1.0, 0.0], [1.0, 1.0]]]]), domain=ad.BINARY)
    k = Tensor(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]), domain=ad.BINARY)
    v = Tensor(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]), domain=ad.BINARY)
    out = ssa_baseline(q, k, v, s=1.0)
    np.testing.assert_array_equal(out.data[0, 0], [[1, 0], [1, 1]])
    zero = ssa_baseline(q, k, Tensor(np.zeros((1, 1, 2, 2)), domain=ad.BINARY), s=1.0)
    assert not zero.data.any()


def test_ssa_causal_masks_future_keys():
    ones = Tensor(np.ones((1, 1, 3, 2)), domain=ad.BINARY)
    out = ssa_baseline(ones, ones, ones, s=1.0, causal=True)
    # row i sums 2 * (i + 1) coincidences over i + 1 keys, each adding a ones row
    np.testing.assert_array_equal(out.data[0, 0, :, 0], [2, 4, 6])


def test_softmax_baseline_rows_and_limit(rng):
    q = Tensor(np.zeros((1, 1, 4, 3)))
    v = Tensor(np.eye(4)[None, None, :, :3])
    out = softmax_ssa_baseline(q, q, v, s=1.0, causal=True)
    np.testing.assert_allclose(out.data[0, 0, 3], [0.25, 0.25, 0.25])
    qa = Tensor(np.array([[[[1.0, 0, 0], [0, 1.0, 0]]]]))
    vv = Tensor(np.array([[[[1.0, 0, 0], [0, 1.0, 0]]]]))
    sharp = softmax_ssa_baseline(qa, qa, vv, s=200.0)
    np.testing.assert_allclose(sharp.data[0, 0], [[1, 0, 0], [0, 1, 0]], atol=1e-12)


def test_spike_product_exact_only_for_spike_operands(rng):
    a = spikes(rng, (3, 4))
    b = spikes(rng, (4, 2))
    out = spike_product(a, b, 4, 4)
    assert out.domain == ad.COUNT
    np.testing.assert_array_equal(out.data, np.rint(a.data * 4) @ np.rint(b.data * 4))
    real = spike_product(Tensor(a.data), b, 4, 4)
    assert real.domain == ad.REAL


def test_softmax_mechanism_records_multiplies(rng):
    attn = make_attn(mechanism="softmax")
    with ad.no_grad(), energy.instrument() as rec:
        attn(spikes(rng, (1, 1, 4, 8)))
    assert rec.counter.per_layer["blk.attn.softmax"]["macs"] > 0
