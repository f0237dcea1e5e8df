import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wtaspike import autodiff as ad
from wtaspike.autodiff import Tensor
from wtaspike.errors import ContractError, InputError
from wtaspike.wta import (WTAKind, apply_wta, hard_wta, softmax_tau, sparsemax, sparsemax_backward,
                          sparsemax_threshold, topk_wta, wta_backward)
from oracles import central_difference, simplex_projection_by_enumeration, softmax

vec = st.integers(1, 8).flatmap(
    lambda n: arrays(np.float64, n, elements=st.floats(-5, 5, allow_nan=False)))


def test_hard_wta_examples():
    assert hard_wta([0.2, 0.8, 0.5, 0.1]).tolist() == [0, 1, 0, 0]
    assert hard_wta([1, 1, 0]).tolist() == [1, 0, 0]
    x = np.array([0.2, 0.8, 0.5, 0.1])
    assert np.array_equal(hard_wta(3 * x), hard_wta(x))


def test_topk_examples():
    assert topk_wta([0.9, 0.1, 0.5, 0.3], 2).tolist() == [1, 0, 1, 0]
    assert topk_wta([0.3, 0.1, 0.2], 3).tolist() == [1, 1, 1]
    assert topk_wta([2.0, 2.0, 2.0, 1.0], 2).tolist() == [1, 1, 0, 0]
    with pytest.raises(InputError):
        topk_wta([1.0, 2.0], 0)
    with pytest.raises(InputError):
        topk_wta([1.0, 2.0], 3)


def test_sparsemax_examples():
    np.testing.assert_allclose(sparsemax([0.0, 0.0, 0.0]), [1 / 3] * 3)
    np.testing.assert_allclose(sparsemax([2.0, 0.0]), [1.0, 0.0])
    np.testing.assert_allclose(sparsemax([0.6, 0.4]), [0.6, 0.4], atol=1e-15)
    tau, support = sparsemax_threshold(np.array([2.0, 0.0]))
    assert tau == 1.0 and support == {0}
    tau, support = sparsemax_threshold(np.array([0.0, 0.0, 0.0]))
    assert abs(tau + 1 / 3) < 1e-15 and support == {0, 1, 2}


def test_softmax_tau_examples():
    np.testing.assert_allclose(softmax_tau([2.0, 0.0], 1.0), [0.8808, 0.1192], atol=1e-4)
    np.testing.assert_allclose(softmax_tau([2.0, 0.0], 0.01), [1.0, 0.0], atol=1e-6)
    a = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(softmax_tau(a, 1.0), softmax(a), rtol=1e-14)
    with pytest.raises(InputError):
        softmax_tau(a, 0.0)


def test_wta_backward_examples():
    np.testing.assert_allclose(wta_backward([0.0, 0.0], [1.0, 0.0], 1.0), [0.25, -0.25])
    assert np.all(wta_backward([1.0, 2.0, 3.0], [0.0, 0.0, 0.0]) == 0)


@given(arrays(np.float64, 8, elements=st.floats(-3, 3, allow_nan=False)),
       arrays(np.float64, 8, elements=st.floats(-2, 2, allow_nan=False)), st.floats(0.3, 3.0))
def test_wta_backward_is_softmax_jacobian(a, g, tau):
    fd = central_difference(lambda v: float(softmax(v, tau) @ g), a)
    np.testing.assert_allclose(wta_backward(a, g, tau), fd, atol=1e-6)


@given(vec)
def test_hard_wta_is_one_hot_at_first_argmax(a):
    out = hard_wta(a)
    assert out.sum() == 1 and set(np.unique(out)) <= {0.0, 1.0}
    assert int(np.flatnonzero(out)[0]) == int(np.argmax(a))


@given(vec, st.floats(1e-3, 1e3))
def test_hard_wta_scale_invariance(a, s):
    assert np.array_equal(hard_wta(s * a), hard_wta(a))


@given(vec, st.data())
def test_topk_selects_k_largest(a, data):
    k = data.draw(st.integers(1, len(a)))
    out = topk_wta(a, k)
    assert out.sum() == k
    chosen = a[out == 1]
    rest = a[out == 0]
    assert rest.size == 0 or chosen.min() >= rest.max()
    if k == 1:
        assert np.array_equal(out, hard_wta(a))


@given(vec)
def test_sparsemax_matches_enumeration_oracle(a):
    y = sparsemax(a)
    np.testing.assert_allclose(y, simplex_projection_by_enumeration(a), atol=1e-9)
    assert abs(y.sum() - 1) < 1e-9 and y.min() >= 0
    tau, support = sparsemax_threshold(a)
    assert np.array_equal(y, np.maximum(a - tau, 0.0))
    assert support == set(np.flatnonzero(y > 0).tolist())


@given(vec, st.data(), st.floats(1e-3, 5.0))
def test_sparsemax_monotone_in_own_coordinate(a, data, c):
    i = data.draw(st.integers(0, len(a) - 1))
    b = a.copy()
    b[i] += c
    assert sparsemax(b)[i] >= sparsemax(a)[i] - 1e-12


@given(arrays(np.float64, 6, elements=st.floats(-3, 3, allow_nan=False)),
       arrays(np.float64, 6, elements=st.floats(-2, 2, allow_nan=False)))
def test_sparsemax_backward_matches_finite_differences(a, g):
    # stay away from support boundaries where sparsemax is not differentiable
    y = sparsemax(a)
    tau, _ = sparsemax_threshold(a)
    assume(np.all(np.abs(a - tau) > 1e-3))
    fd = central_difference(lambda v: float(sparsemax(v) @ g), a, h=1e-7)
    np.testing.assert_allclose(sparsemax_backward(a, g), fd, atol=1e-5)
    assert y.sum() > 0


def test_masked_entries_never_win():
    a = np.array([[5.0, 1.0, 0.5], [5.0, 9.0, 0.5]])
    allowed = np.array([[False, True, True], [True, False, True]])
    assert hard_wta(a, allowed).tolist() == [[0, 1, 0], [1, 0, 0]]
    assert topk_wta(a, 3, allowed).tolist() == [[0, 1, 1], [1, 0, 1]]
    s = sparsemax(a, allowed)
    assert np.all(s[~allowed] == 0) and np.allclose(s.sum(-1), 1)
    p = softmax_tau(a, 1.0, allowed)
    assert np.all(p[~allowed] == 0) and np.all(np.isfinite(p))


def test_topk_clipped_to_allowed_count():
    allowed = np.tril(np.ones((4, 4), dtype=bool))
    out = topk_wta(np.random.default_rng(0).normal(size=(4, 4)), 3, allowed)
    assert out.sum(-1).tolist() == [1, 2, 3, 3]


def test_all_masked_row_is_contract_error():
    with pytest.raises(ContractError):
        hard_wta([1.0, 2.0], np.array([False, False]))


def test_kind_parsing_round_trip():
    for text in ("hard", "topk:3", "sparsemax", "sparsemax-bin"):
        assert str(WTAKind.parse(text)) == text
    assert WTAKind.parse("sparsemax").binary is False
    assert WTAKind.parse("topk:2").binary
    for bad in ("top", "topk:x", "topk:0"):
        with pytest.raises(InputError):
            WTAKind.parse(bad)
    with pytest.raises(InputError):
        WTAKind("hard", surrogate_temperature=0.0)


def test_apply_wta_uses_surrogate_backward_and_binary_forward():
    a = np.random.default_rng(1).normal(size=(3, 5))
    g = np.random.default_rng(2).normal(size=(3, 5))
    for kind in (WTAKind("hard", surrogate_temperature=0.5), WTAKind("topk", k=2, surrogate_temperature=0.5)):
        x = Tensor(a, requires_grad=True)
        out = apply_wta(x, kind)
        assert out.domain == ad.BINARY
        ad.backward((out * Tensor(g)).sum())
        np.testing.assert_allclose(x.grad, wta_backward(a, g, 0.5))
        with ad.smooth_twin():
            np.testing.assert_allclose(apply_wta(Tensor(a), kind).data, softmax_tau(a, 0.5))
