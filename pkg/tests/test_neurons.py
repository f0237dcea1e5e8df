import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wtaspike import autodiff as ad
from wtaspike.autodiff import Tensor
from wtaspike.errors import ContractError, DimensionError, InputError
from wtaspike.neurons import (NILIFParams, NeuronSpec, NeuronState, SpikeLayer, TLIFParams,
                              nilif_step, nilif_unfold, run_sequence, ternary_spike, tlif_step)
from oracles import central_difference, nilif_trace, tlif_trace

T1 = TLIFParams(alpha=1.0, beta=0.5, v_reset=0.0)
N4 = NILIFParams(d_max=4, beta=0.5)


def one_step(step, params, x):
    s, st_ = step(params, NeuronState.zeros(()), Tensor(np.float64(x)))
    return float(s.data), float(st_.h.data)


@pytest.mark.parametrize("x, spike, h", [(1.5, 1.0, 0.0), (0.5, 0.0, 0.25), (-2.0, -1.0, 0.0)])
def test_tlif_hand_stepped_examples(x, spike, h):
    assert one_step(tlif_step, T1, x) == (spike, h)


@pytest.mark.parametrize("x, spike, h", [(2.3, 0.5, 0.15), (-1.0, 0.0, -0.5), (10.0, 1.0, 3.0)])
def test_nilif_hand_stepped_examples(x, spike, h):
    s, hh = one_step(nilif_step, N4, x)
    assert s == spike
    assert abs(hh - h) < 1e-12


def test_nilif_two_step_trace_with_unit_decay():
    spec = NeuronSpec("nilif", d_max=4, beta=1.0)
    out, state = run_sequence(spec, Tensor(np.array([3.0, 0.0])), return_state=True)
    spikes, states = nilif_trace([3.0, 0.0], 4, 1.0)
    np.testing.assert_array_equal(out.data, spikes)
    assert float(state.h.data) == states[-1] == 0.0


def test_param_validation():
    for bad in (dict(alpha=0.0), dict(beta=1.0), dict(beta=0.0)):
        with pytest.raises(InputError):
            TLIFParams(**{**dict(alpha=1.0, beta=0.5), **bad})
    with pytest.raises(InputError):
        NILIFParams(d_max=0)
    with pytest.raises(InputError):
        NILIFParams(d_max=2.5)
    NILIFParams(d_max=3, beta=1.0)


def test_shape_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        tlif_step(T1, NeuronState.zeros((3,)), Tensor(np.zeros(4)))
    with pytest.raises(DimensionError):
        nilif_step(N4, NeuronState.zeros((3,)), Tensor(np.zeros(4)))


@given(st.lists(st.floats(-4, 4, allow_nan=False), min_size=1, max_size=6),
       st.floats(0.2, 2.0), st.floats(0.05, 0.95), st.floats(-0.5, 0.5))
def test_tlif_matches_scalar_trace_bit_exactly(xs, alpha, beta, v_reset):
    spec = NeuronSpec("tlif", alpha=alpha, beta=beta, v_reset=v_reset)
    out, state = run_sequence(spec, Tensor(np.array(xs)), return_state=True)
    spikes, states = tlif_trace(xs, alpha, beta, v_reset)
    assert out.data.tolist() == spikes
    assert float(state.h.data) == states[-1]


@given(st.lists(st.floats(-3, 12, allow_nan=False), min_size=1, max_size=6),
       st.integers(1, 8), st.floats(0.05, 1.0))
def test_nilif_matches_scalar_trace(xs, d, beta):
    out = run_sequence(NeuronSpec("nilif", d_max=d, beta=beta), Tensor(np.array(xs)))
    spikes, _ = nilif_trace(xs, d, beta)
    np.testing.assert_array_equal(out.data, spikes)


@given(arrays(np.float64, (4, 5), elements=st.floats(-5, 5, allow_nan=False)), st.integers(1, 8))
def test_nilif_value_set(xs, d):
    spec = NeuronSpec("nilif", d_max=d)
    out = run_sequence(spec, Tensor(xs))
    assert np.all(np.isin(out.data, np.arange(d + 1) / d))
    assert out.domain == ad.nint_domain(d)


@given(arrays(np.float64, (4, 5), elements=st.floats(-5, 5, allow_nan=False)), st.floats(0.1, 3.0))
def test_tlif_value_set_and_reset(xs, alpha):
    spec = NeuronSpec("tlif", alpha=alpha, v_reset=0.25)
    state = NeuronState.zeros((5,))
    for t in range(4):
        s, state = tlif_step(spec.params(), state, Tensor(xs[t]))
        assert set(np.unique(s.data)) <= {-alpha, 0.0, alpha}
        fired = np.abs(s.data) == alpha
        assert np.all(state.h.data[fired] == 0.25)


def test_run_sequence_edge_cases():
    spec = NeuronSpec("nilif")
    empty = run_sequence(spec, Tensor(np.zeros((0, 3))))
    assert empty.shape == (0, 3)
    zero, state = run_sequence(spec, Tensor(np.zeros((3, 2))), return_state=True)
    assert np.all(zero.data == 0) and np.all(state.h.data == 0)
    x = Tensor(np.array([[1.7, -0.2]]))
    single, _ = nilif_step(spec.params(), NeuronState.zeros((2,)), x[0])
    np.testing.assert_array_equal(run_sequence(spec, x).data[0], single.data)


@pytest.mark.parametrize("s, train", [(0.5, [1, 1, 0, 0]), (0.0, [0, 0, 0, 0]), (1.0, [1, 1, 1, 1])])
def test_unfold_examples(s, train):
    assert nilif_unfold(s, 4).tolist() == train


def test_unfold_rejects_non_integer_levels():
    with pytest.raises(ContractError):
        nilif_unfold(0.3, 4)
    with pytest.raises(ContractError):
        nilif_unfold(1.25, 4)
    nilif_unfold(0.5 + 1e-12, 4)


@given(st.integers(1, 8), st.data())
def test_unfold_downstream_equivalence(d, data):
    ks = np.array(data.draw(st.lists(st.integers(0, d), min_size=1, max_size=6)))
    w = np.array(data.draw(st.lists(st.integers(-9, 9), min_size=len(ks) * 2, max_size=len(ks) * 2)),
                 dtype=np.float64).reshape(len(ks), 2)
    trains = nilif_unfold(ks / d, d).astype(np.float64)
    assert trains.sum(axis=-1).tolist() == ks.tolist()
    accumulated = sum(trains[:, j] @ w for j in range(d))
    # integer counts through the map, exactly
    assert np.array_equal(accumulated, ks.astype(np.float64) @ w)
    np.testing.assert_allclose(accumulated, ((ks / d) @ w) * d, rtol=1e-12, atol=1e-12)


def test_ternary_surrogate_matches_twin_finite_differences():
    rng = np.random.default_rng(3)
    u = rng.uniform(-3, 3, 20)
    alpha = Tensor(np.float64(1.2), requires_grad=True)
    ut = Tensor(u, requires_grad=True)
    w = rng.normal(size=20)
    ad.backward((ternary_spike(ut, alpha) * Tensor(w)).sum())

    def twin_loss(uu, a):
        with ad.smooth_twin():
            return float((ternary_spike(Tensor(uu), Tensor(np.float64(a))).data * w).sum())

    np.testing.assert_allclose(ut.grad, central_difference(lambda v: twin_loss(v, 1.2), u), atol=1e-6)
    fd_alpha = (twin_loss(u, 1.2 + 1e-6) - twin_loss(u, 1.2 - 1e-6)) / 2e-6
    assert abs(alpha.grad - fd_alpha) < 1e-5


def test_rectangular_window_is_unit_wide():
    u = Tensor(np.array([1.49, 1.51, 0.51, 0.49, 1.0]), requires_grad=True)
    ad.backward(ternary_spike(u, Tensor(np.float64(1.0))).sum())
    np.testing.assert_array_equal(u.grad, [1.0, 0.0, 1.0, 0.0, 1.0])


def test_spike_layer_learns_alpha_for_tlif_only():
    assert SpikeLayer("a", NeuronSpec("tlif")).alpha.requires_grad
    assert SpikeLayer("b", NeuronSpec("nilif")).alpha is None


def test_determinism():
    xs = Tensor(np.random.default_rng(0).normal(size=(3, 7)) * 3)
    for kind in ("tlif", "nilif"):
        a = run_sequence(NeuronSpec(kind), xs).data
        b = run_sequence(NeuronSpec(kind), xs).data
        assert a.tobytes() == b.tobytes()
