import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import graphs as G
import oracles as O
from ssmprune import tensor as T
from ssmprune.errors import DimensionError, NumericError
from ssmprune.tensor import Tensor

finite = st.floats(-4, 4, allow_nan=False, width=32)


def test_tensor_is_immutable_fp32():
    t = Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float32 and t.shape == (2, 2)
    with pytest.raises(ValueError):
        t.data[0, 0] = 5.0
    assert Tensor(3.0).shape == (1,)


def test_tensor_rejects_non_finite():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])
    with pytest.raises(NumericError):
        T.exp(Tensor([200.0]))


def test_matmul_hand_values():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    assert out.data.tolist() == [[3.0], [7.0]]
    with pytest.raises(DimensionError):
        T.matmul(Tensor([[1, 2]]), Tensor([[1, 2]]))


def test_conv_hand_values():
    # x=[1,2,3], w=[1,2] (k=0 looks one step back), bias 10
    y = T.conv1d_depthwise_causal(Tensor([[1, 2, 3]]), Tensor([[1, 2]]), Tensor([10]))
    assert y.data.tolist() == [[12.0, 15.0, 18.0]]


def test_rmsnorm_hand_values():
    y = T.rmsnorm(Tensor([[3.0, 4.0]]), Tensor([1.0, 1.0]), 0.0)
    np.testing.assert_allclose(y.data, [[3 / np.sqrt(12.5), 4 / np.sqrt(12.5)]], rtol=1e-6)


def test_rmsnorm_grouped_divisor():
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    y = T.rmsnorm(Tensor(x), Tensor(np.ones(4)), 1e-5, group_size=2, divisor=3)
    np.testing.assert_allclose(y.data, O.rmsnorm(x, np.ones(4), 1e-5, group=2, div=3), rtol=1e-6)


def test_ssd_hand_recurrence():
    one = lambda *s: Tensor(np.ones(s))
    # Δ=1 needs softplus(dt_raw + dt_bias) = 1, i.e. dt_raw = log(e - 1)
    y, S = T.ssd_sequential(
        one(1, 1, 1), one(1, 1, 1), Tensor(np.full((1, 1, 1), 2.0)), Tensor([[np.log(np.e - 1)]]),
        Tensor([0.0]), Tensor([0.5]), Tensor([0.0]),
    )
    np.testing.assert_allclose(y.data.ravel(), [2.5], rtol=1e-6)
    np.testing.assert_allclose(S.data.ravel(), [1.0], rtol=1e-6)


def test_ssd_zero_step_freezes_state():
    rng = np.random.default_rng(1)
    h0 = rng.normal(size=(1, 2, 3))
    x, B, C = rng.normal(size=(4, 1, 2)), rng.normal(size=(4, 1, 3)), rng.normal(size=(4, 1, 3))
    y, S = T.ssd_sequential(Tensor(x), Tensor(B), Tensor(C), Tensor(np.full((4, 1), -200.0)), Tensor([0.0]),
                            Tensor([0.7]), Tensor([0.0]), h0=Tensor(h0))
    np.testing.assert_allclose(S.data, h0, rtol=1e-6)
    want = np.einsum("pn,tn->tp", h0[0], C[:, 0]) + 0.7 * x[:, 0]
    np.testing.assert_allclose(y.data[:, 0], want, rtol=1e-5, atol=1e-6)


def test_ssd_zero_readout():
    rng = np.random.default_rng(2)
    y, _ = T.ssd_sequential(Tensor(rng.normal(size=(3, 2, 2))), Tensor(rng.normal(size=(3, 1, 2))),
                            Tensor(np.zeros((3, 1, 2))), Tensor(rng.normal(size=(3, 2))), Tensor([0.0, 0.1]),
                            Tensor([0.0, 0.0]), Tensor([0.0, 0.0]))
    assert not y.data.any()


def test_ssd_reports_failing_step():
    big = Tensor(np.full((3, 1, 1), 1e19))
    with pytest.raises(NumericError, match="step"):
        T.ssd_sequential(big, big, big, Tensor(np.full((3, 1), 50.0)), Tensor([-30.0]), Tensor([0.0]), Tensor([0.0]))


def test_ssd_matches_oracle():
    g = G.random_ssd_graph(np.random.default_rng(3))
    L = g["leaves"]
    y, S = T.ssd_sequential(*(Tensor(L[k]) for k in ("x", "B", "C", "dt", "A_log", "D", "dt_bias")), h0=Tensor(L["h0"]))
    ry, rS = O.ssd(L["x"], L["B"], L["C"], L["dt"], L["A_log"], L["D"], L["dt_bias"], L["h0"])
    np.testing.assert_allclose(y.data, ry, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(S.data, rS, rtol=1e-5, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_ssd_linear_in_C(seed):
    rng = np.random.default_rng(seed)
    x, B, C = rng.normal(size=(3, 2, 2)), rng.normal(size=(3, 1, 2)), rng.normal(size=(3, 1, 2))
    args = (Tensor(rng.normal(size=(3, 2))), Tensor([0.1, -0.2]), Tensor([0.3, 0.9]), Tensor([0.0, 0.2]))
    y1, _ = T.ssd_sequential(Tensor(x), Tensor(B), Tensor(C), *args)
    y2, _ = T.ssd_sequential(Tensor(x), Tensor(B), Tensor(2 * C), *args)
    dx = np.array([0.3, 0.9])[None, :, None] * x
    np.testing.assert_allclose(y2.data - dx, 2 * (y1.data - dx), rtol=1e-5, atol=1e-5)


def test_tape_records_only_when_active():
    a = Tensor([1.0, 2.0])
    tape = T.Tape()
    with tape:
        w = tape.watch(a, "a")
        T.silu(w)
        T.silu(a)  # untracked input, not recorded
    assert tape.op_names == ["silu"]
    T.silu(w)
    assert len(tape) == 1


def test_backward_errors():
    tape = T.Tape()
    with tape:
        w = tape.watch(Tensor([1.0, 2.0]), "w")
        v = T.silu(w)
    with pytest.raises(DimensionError):
        T.backward(tape, v)
    with pytest.raises(DimensionError):
        T.backward(tape, Tensor([1.0]))


def test_backward_unused_leaf_gets_zero():
    tape = T.Tape()
    with tape:
        a = tape.watch(Tensor([1.0, 2.0]), "a")
        tape.watch(Tensor([3.0]), "b")
        loss = T.sum_all(T.mul(a, a))
    g = T.backward(tape, loss)
    assert g["a"].data.tolist() == [2.0, 4.0] and g["b"].data.tolist() == [0.0]


def test_fan_out_accumulates():
    tape = T.Tape()
    with tape:
        a = tape.watch(Tensor([3.0]), "a")
        loss = T.sum_all(T.add(T.mul(a, a), T.scale(a, 2.0)))
    assert T.backward(tape, loss)["a"].item() == pytest.approx(8.0)


def test_softplus_threshold_is_smooth_enough():
    x = Tensor([-30.0, 0.0, 19.9, 20.1, 40.0])
    np.testing.assert_allclose(T.softplus(x).data, O.softplus(x.data.astype(np.float64)), rtol=1e-6)


def test_cross_entropy_matches_oracle():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(5, 7)).astype(np.float32)
    tg = rng.integers(0, 7, 5).tolist()
    assert T.cross_entropy(Tensor(logits), tg).item() == pytest.approx(O.cross_entropy(logits.astype(np.float64), tg), rel=1e-6)


@pytest.mark.parametrize("seed", range(8))
def test_random_graph_gradients(seed):
    g = G.random_graph(np.random.default_rng(100 + seed))
    fwd, err = G.check_graph(g, G.tape_eval, G.ref_eval)
    assert fwd <= 1e-5 * (1 + abs(G.ref_eval(g)))
    assert err < 1e-4


def test_block_gradient():
    g = G.random_block_graph(np.random.default_rng(5))
    fwd, err = G.check_graph(g, G.block_tape_eval, G.block_ref_eval)
    assert fwd < 1e-5 and err < 1e-4


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite))
def test_elementwise_dispatch_matches_direct(x):
    t = Tensor(x)
    for kind in ("silu", "softplus", "exp"):
        assert T.elementwise(kind, t) == getattr(T, kind)(t)
    assert T.elementwise("mul", t, t) == T.mul(t, t)
    with pytest.raises(ValueError):
        T.elementwise("tanh", t)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6))
def test_group_index_is_contiguous(g, per):
    idx = T.group_index(g * per, g)
    assert idx.tolist() == [h // per for h in range(g * per)]
