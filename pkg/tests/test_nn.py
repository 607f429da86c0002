import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mstrl.nn import (ContractError, MaskedParameter, OptimizerConfig, Var, activation, adamw_step,
                      backward, clip_grad_norm, layer_norm_forward, linear_forward, ops,
                      xavier_bound, xavier_uniform_init)
from mstrl.nn.checkpoint import params_from_bytes, params_to_bytes, read_fragment, write_fragment

from oracles import central_difference, max_relative_error


def param(w, mask=None, name="w", sparsifiable=True):
    p = MaskedParameter(np.array(w, dtype=np.float64), name, sparsifiable=sparsifiable)
    if mask is not None:
        p.set_mask(np.array(mask, dtype=bool))
    return p


# -- linear ---------------------------------------------------------------------------

def test_linear_identity():
    y = linear_forward([[1.0, 2.0]], param([[1, 0], [0, 1]]), [0, 0])
    np.testing.assert_array_equal(y, [[1.0, 2.0]])


def test_linear_masked_hand_value():
    p = MaskedParameter(np.array([[3.0, 4.0], [5.0, 6.0]]), "w", sparsifiable=True)
    p.mask = np.array([[1, 0], [0, 1]], dtype=bool)  # weight left unzeroed on purpose
    y = linear_forward([[1.0, 2.0]], p, [1.0, 1.0])
    np.testing.assert_array_equal(y, [[4.0, 13.0]])


def test_linear_zero_mask_gives_bias(rng):
    p = param(rng.normal(size=(3, 4)), np.zeros((3, 4)))
    b = np.array([0.5, -1.0, 2.0])
    y = linear_forward(rng.normal(size=(5, 4)), p, b)
    np.testing.assert_array_equal(y, np.tile(b, (5, 1)))


def test_linear_shape_mismatch():
    with pytest.raises(ContractError):
        linear_forward([[1.0, 2.0, 3.0]], param(np.eye(2)), [0, 0])


# -- layer norm / activations ---------------------------------------------------------

def test_layer_norm_constant_row_maps_to_shift():
    y = layer_norm_forward([[3.0, 3.0, 3.0, 3.0]], np.ones(4), np.zeros(4))
    np.testing.assert_array_equal(y, [[0.0, 0.0, 0.0, 0.0]])


def test_layer_norm_symmetric_pair():
    y = layer_norm_forward([[1.0, -1.0]], np.ones(2), np.zeros(2), eps=1e-15)
    np.testing.assert_allclose(y, [[1.0, -1.0]], atol=1e-12)


def test_layer_norm_three_values():
    y = layer_norm_forward([[0.0, 1.0, 2.0]], np.ones(3), np.zeros(3), eps=1e-5)
    expected = (np.array([0.0, 1.0, 2.0]) - 1.0) / math.sqrt(2.0 / 3.0 + 1e-5)
    np.testing.assert_allclose(y[0], expected, rtol=1e-12)
    np.testing.assert_allclose(y[0], [-1.2247, 0.0, 1.2247], atol=1e-4)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 12)),
                  elements=st.floats(-50, 50)),
       st.integers(0, 2**32 - 1))
def test_layer_norm_row_moments(x, seed):
    r = np.random.default_rng(seed)
    h = x.shape[1]
    gain, shift = r.uniform(0.5, 2.0, h), r.normal(size=h)
    x = x + r.normal(scale=1.0, size=x.shape)  # keep rows away from zero variance
    y = layer_norm_forward(x, gain, shift, eps=1e-12)
    xhat = (y - shift) / gain
    np.testing.assert_allclose(xhat.mean(axis=1), 0.0, atol=1e-10)
    np.testing.assert_allclose(xhat.var(axis=1), 1.0, atol=1e-6)


def test_activation_values():
    assert activation([[-2.0, 3.0]], "relu").tolist() == [[0.0, 3.0]]
    assert activation([[0.0, 1.0]], "elu").tolist() == [[0.0, 1.0]]
    assert activation([[-1.0]], "elu")[0, 0] == pytest.approx(math.exp(-1) - 1, abs=1e-15)
    assert activation([[-1.0]], "elu")[0, 0] == pytest.approx(-0.63212, abs=1e-5)
    with pytest.raises(ContractError):
        activation([[1.0]], "tanh")


def test_elu_slope_at_zero_is_one():
    x = Var(np.zeros((1, 3)), requires_grad=True)
    y = ops.activation(x, "elu")
    backward(ops.mean(y))
    np.testing.assert_array_equal(x.grad, np.full((1, 3), 1.0 / 3.0))


@pytest.mark.parametrize("kind", ["relu", "elu"])
@pytest.mark.parametrize("use_ln", [True, False])
def test_fused_norm_act_matches_composition(rng, kind, use_ln):
    x = rng.normal(size=(7, 9))
    g, s = rng.uniform(0.5, 1.5, 9), rng.normal(size=9)
    xv = Var(x.copy(), requires_grad=True)
    gv, sv = Var(g.copy(), requires_grad=True), Var(s.copy(), requires_grad=True)
    fused = ops.norm_act(xv, gv if use_ln else None, sv if use_ln else None, kind)
    w = rng.normal(size=(7, 9))
    backward(ops.weighted_sum(ops.row_mean(ops.mul(fused, Var(w))), np.ones(7)))
    xr = Var(x.copy(), requires_grad=True)
    gr, sr = Var(g.copy(), requires_grad=True), Var(s.copy(), requires_grad=True)
    z = ops.layer_norm(xr, gr, sr) if use_ln else xr
    ref = ops.activation(z, kind)
    backward(ops.weighted_sum(ops.row_mean(ops.mul(ref, Var(w))), np.ones(7)))
    np.testing.assert_allclose(fused.value, ref.value, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(xv.grad, xr.grad, rtol=1e-10, atol=1e-13)
    if use_ln:
        np.testing.assert_allclose(gv.grad, gr.grad, rtol=1e-10, atol=1e-13)
        np.testing.assert_allclose(sv.grad, sr.grad, rtol=1e-10, atol=1e-13)


# -- backward -------------------------------------------------------------------------

def test_backward_hand_chain_rule():
    # f(w) = (w x)^2 at x=2, w=3
    p = param([[3.0]], sparsifiable=False)
    y = ops.linear(Var(np.array([[2.0]])), p.var(), None, None)
    backward(ops.weighted_sum(ops.row_square_sum(y), np.ones(1)))
    assert p.grad[0, 0] == pytest.approx(24.0, abs=1e-12)


def test_backward_constant_graph_leaves_zero_grads():
    p = param([[1.0, 2.0]], sparsifiable=False)
    y = ops.linear(Var(np.ones((3, 2))), p.var(track=False), None, None)
    backward(ops.mean(y))
    np.testing.assert_array_equal(p.grad, 0.0)


def test_backward_requires_var():
    with pytest.raises(ContractError):
        backward(np.array(1.0))
    with pytest.raises(ContractError):
        backward(Var(np.ones(2), requires_grad=True))


def test_masked_grad_and_dense_grad_view(rng):
    p = param(rng.normal(size=(3, 4)), rng.random((3, 4)) > 0.5)
    x = rng.normal(size=(5, 4))
    y = ops.linear(Var(x), p.var(), p.mask_array(), None)
    backward(ops.mean(y))
    dense = np.ones((5, 3)).T @ x / 15.0
    np.testing.assert_allclose(p.dense_grad, dense, rtol=1e-12)
    np.testing.assert_allclose(p.grad, dense * p.mask, rtol=1e-12)
    assert np.all(p.grad[~p.mask] == 0.0)


def _fd_check(loss_fn, arrays, masks=None):
    """Worst relative error over all inputs; masked weights compare on active entries."""
    masks = masks or {}
    loss = loss_fn()
    for a in arrays:
        a.grad = None
    backward(loss)
    worst = 0.0
    for i, v in enumerate(arrays):
        analytic = v.grad * masks[i] if i in masks else v.grad.copy()
        numeric = central_difference(lambda: float(loss_fn().value), v.value)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst


@pytest.mark.parametrize("kind", ["relu", "elu"])
def test_finite_difference_composition(rng, kind):
    x = Var(rng.normal(size=(4, 5)), requires_grad=True)
    w1 = Var(rng.normal(size=(6, 5)), requires_grad=True)
    b1 = Var(rng.normal(size=6), requires_grad=True)
    g = Var(rng.uniform(0.5, 1.5, 6), requires_grad=True)
    s = Var(rng.normal(size=6), requires_grad=True)
    w2 = Var(rng.normal(size=(3, 6)), requires_grad=True)
    mask = rng.random((6, 5)) > 0.3
    tgt = rng.normal(size=(4, 3))

    def loss():
        h = ops.linear(x, w1, mask, b1)
        h = ops.norm_act(h, g, s, kind)
        h = ops.add(h, ops.layer_norm(h, g, s))
        out = ops.tanh(ops.linear(h, w2, None, None))
        return ops.weighted_sum(ops.row_mse(out, tgt), np.full(4, 0.25))

    assert _fd_check(loss, [x, w1, b1, g, s, w2], {1: mask}) < 1e-4


def test_finite_difference_loss_heads(rng):
    logits = Var(rng.normal(size=(3, 6)), requires_grad=True)
    probs = rng.random((3, 6))
    probs /= probs.sum(axis=1, keepdims=True)
    q = Var(rng.normal(scale=2.0, size=(5, 1)), requires_grad=True)
    target = rng.normal(scale=2.0, size=5)

    def loss():
        ce = ops.weighted_sum(ops.row_soft_cross_entropy(logits, probs), np.ones(3))
        hub = ops.weighted_sum(ops.row_huber(q, target), np.ones(5))
        return ops.add_scalars(ce, hub)

    assert _fd_check(loss, [logits, q]) < 1e-4


# -- optimizer ------------------------------------------------------------------------

def test_adamw_single_step_hand_value():
    p = param([[1.0]], sparsifiable=False)
    p.grad[...] = 0.1
    adamw_step(p, OptimizerConfig(learning_rate=3e-4, weight_decay=0.0))
    # m_hat = 0.1, v_hat = 0.01 -> step = lr * 0.1 / (0.1 + 1e-8)
    assert p.weight[0, 0] == pytest.approx(1.0 - 3e-4 * 0.1 / (0.1 + 1e-8), abs=1e-15)
    assert p.weight[0, 0] == pytest.approx(0.9997, abs=1e-9)


def test_adamw_zero_grad_is_identity(rng):
    w = rng.normal(size=(4, 3))
    p = param(w.copy())
    for _ in range(3):
        adamw_step(p, OptimizerConfig(weight_decay=0.0))
    np.testing.assert_array_equal(p.weight, w)
    assert p.step_count == 3
    np.testing.assert_array_equal(p.m1, 0.0)
    np.testing.assert_array_equal(p.m2, 0.0)


def test_adamw_masked_entries_stay_zero(rng):
    p = param(rng.normal(size=(4, 4)), rng.random((4, 4)) > 0.5)
    for _ in range(5):
        p.zero_grad()
        p.accumulate_grad(rng.normal(size=(4, 4)))
        adamw_step(p, OptimizerConfig())
        assert np.all(p.weight[~p.mask] == 0.0)
        assert np.all(p.m1[~p.mask] == 0.0) and np.all(p.m2[~p.mask] == 0.0)


def test_adamw_rejects_nonfinite_grad():
    p = param([[1.0, 2.0]], name="critic.q1.output.weight")
    p.grad[0, 1] = np.nan
    with pytest.raises(FloatingPointError, match="critic.q1.output.weight"):
        adamw_step(p, OptimizerConfig())


def test_optimizer_config_contract():
    for bad in ({"learning_rate": 0.0}, {"beta1": 1.0}, {"beta2": -0.1}, {"epsilon": 0.0}):
        with pytest.raises(ContractError):
            OptimizerConfig(**bad)


def test_clip_grad_norm_cases():
    p = param([[0.0, 0.0]], sparsifiable=False)
    p.grad[...] = [[3.0, 4.0]]
    assert clip_grad_norm([p], 10.0) == 5.0
    np.testing.assert_array_equal(p.grad, [[3.0, 4.0]])
    assert clip_grad_norm([p], 1.0) == 5.0
    np.testing.assert_allclose(p.grad, [[0.6, 0.8]], rtol=1e-15)
    p.grad[...] = 0.0
    assert clip_grad_norm([p], 1.0) == 0.0
    with pytest.raises(ContractError):
        clip_grad_norm([p], 0.0)


# -- init -----------------------------------------------------------------------------

def test_xavier_bounds_and_determinism():
    assert xavier_bound(512, 512) == pytest.approx(math.sqrt(6 / 1024))
    assert xavier_bound(512, 512) == pytest.approx(0.07654, abs=1e-5)
    assert xavier_bound(3, 3) == 1.0
    w = xavier_uniform_init((512, 512), np.random.default_rng(0))
    assert np.abs(w).max() <= xavier_bound(512, 512)
    w3 = xavier_uniform_init((3, 3), np.random.default_rng(0))
    assert np.abs(w3).max() <= 1.0
    np.testing.assert_array_equal(w, xavier_uniform_init((512, 512), np.random.default_rng(0)))


# -- checkpoint fragments -------------------------------------------------------------

def test_fragment_layout_and_roundtrip(rng):
    p = param(rng.normal(size=(3, 5)), rng.random((3, 5)) > 0.4, name="net.w")
    p.m1[...] = rng.normal(size=(3, 5)) * p.mask
    p.step_count = 7
    buf = io.BytesIO()
    write_fragment(buf, p)
    raw = buf.getvalue()
    # u16 + name + u8 + 2*u32 + weights + mask bytes + 2 moments + u64
    assert len(raw) == 2 + 5 + 1 + 8 + 8 * 15 + 2 + 16 * 15 + 8
    mask_bytes = raw[2 + 5 + 1 + 8 + 120:2 + 5 + 1 + 8 + 120 + 2]
    bits = [(mask_bytes[i // 8] >> (i % 8)) & 1 for i in range(15)]
    assert bits == p.mask.reshape(-1).astype(int).tolist()
    frag = read_fragment(io.BytesIO(raw))
    np.testing.assert_array_equal(frag["weight"], p.weight)
    np.testing.assert_array_equal(frag["mask"], p.mask)
    assert frag["step_count"] == 7

    q = param(np.zeros((3, 5)), name="net.w")
    params_from_bytes([q], params_to_bytes([p]))
    np.testing.assert_array_equal(q.weight, p.weight)
    np.testing.assert_array_equal(q.mask, p.mask)
    np.testing.assert_array_equal(q.m1, p.m1)
    assert q.step_count == 7


def test_fragment_name_mismatch(rng):
    data = params_to_bytes([param(np.ones((2, 2)), name="a")])
    with pytest.raises(ValueError):
        params_from_bytes([param(np.ones((2, 2)), name="b")], data)
