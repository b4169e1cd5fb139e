import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hfseq.core import (ARCHITECTURES, OUTPUT_MODES, DimensionError, InitScheme, ModelConfig,
                        NumericError, init_params, make_rng)
from hfseq.models import (Batch, checkpointed_backward, forward, gradient, gv_product,
                          hsigma_multiply, make_context, mean_loss, r_forward,
                          recurrent_jacobian_norms, softmax, structural_gsv, with_damping)
from hfseq.verify import dense_gauss_newton, fd_gradient, fd_jacobians, reference_logits
from helpers import random_batch, random_params, tiny_config

CASES = [(a, m) for a in ARCHITECTURES for m in OUTPUT_MODES]


def zero_params(config):
    return init_params(config, InitScheme.dense(0.0), make_rng(0))


# -- forward -------------------------------------------------------------------

def test_rnn_zero_theta_is_uniform():
    c = ModelConfig("rnn", 4, (3,))
    batch = random_batch(c, 5, 2)
    cache, loss, bpc = forward(c, zero_params(c), batch)
    assert np.all(cache.outputs == 0.25)
    assert bpc == 2.0


def test_lstm_zero_theta_gates_half():
    c = tiny_config("lstm", V=6)
    cache, _, bpc = forward(c, zero_params(c), random_batch(c, 4, 3))
    for gate in ("w", "f", "r"):
        assert np.all(cache[gate] == 0.5)
    assert not cache["S"].any() and not cache["Hout"].any()
    assert abs(bpc - math.log2(6)) < 1e-12


def test_mlstm_matches_scalar_reference():
    c = ModelConfig("mlstm", 3, (2,), 2)
    params = init_params(c, InitScheme.dense(0.5), make_rng(7))
    batch = random_batch(c, 3, 1, seed=7)
    cache, _, _ = forward(c, params, batch)
    assert np.max(np.abs(cache.logits - reference_logits(c, params, batch))) < 1e-13


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_all_architectures_match_scalar_reference(arch):
    c = tiny_config(arch, V=4, h=3)
    params = random_params(c, std=0.5, seed=2)
    batch = random_batch(c, 4, 2, seed=2)
    cache, _, _ = forward(c, params, batch)
    assert np.max(np.abs(cache.logits - reference_logits(c, params, batch))) < 1e-13


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_softmax_columns_sum_to_one(arch):
    c = tiny_config(arch)
    cache, _, _ = forward(c, random_params(c, std=1.0), random_batch(c, 8, 3))
    O = cache.outputs
    assert np.max(np.abs(O.sum(axis=-1) - 1.0)) < 1e-12
    assert np.all((O > 0) & (O < 1))


@pytest.mark.parametrize("arch", ("lstm", "mlstm"))
def test_gate_and_state_ranges(arch):
    c = tiny_config(arch)
    cache, _, _ = forward(c, random_params(c, std=0.8), random_batch(c, 8, 3))
    for gate in ("w", "f", "r"):
        assert np.all((cache[gate] > 0) & (cache[gate] < 1))
    assert np.all(np.abs(cache["Hout"]) < 1)


def test_non_finite_activation_reports_timestep():
    c = ModelConfig("rnn", 3, (2,), output_mode="linear_mse", input_size=3)
    params = random_params(c)
    inputs = np.zeros((3, 1, 3))
    inputs[1, 0, 0] = np.nan
    with pytest.raises(NumericError) as err:
        forward(c, params, Batch(inputs, np.zeros((3, 1, 3))))
    assert err.value.timestep == 1


def test_bad_symbol_rejected():
    c = tiny_config("rnn")
    with pytest.raises(DimensionError):
        forward(c, random_params(c), Batch(np.full((2, 1), 5), np.zeros((2, 1), dtype=int)))


def test_one_hot_gather_matches_dense_product():
    c = tiny_config("mrnn")
    params = random_params(c)
    batch = random_batch(c, 5, 3)
    dense_c = ModelConfig("mrnn", 5, (4,), (4,), input_size=5)
    dense = Batch(np.eye(5)[batch.inputs], batch.targets)
    a, _, _ = forward(c, params, batch)
    b, _, _ = forward(dense_c, zero_params(dense_c).with_theta(params.theta), dense)
    assert np.array_equal(a.logits, b.logits)


def test_lstm_integrator_limit():
    c = tiny_config("lstm", extra_biases=True)
    params = random_params(c, std=0.7, seed=4)
    p = {k: v.copy() for k, v in params.views().items()}
    for name in ("W_wi", "W_fi", "W_ri", "W_wh", "W_fh", "W_rh"):
        p[name][:] = 0.0
    for name in ("B_w", "B_f", "B_r"):
        p[name][:] = 50.0
    from hfseq.core import flatten
    forced = params.with_theta(flatten(p, params.layout))
    cache, _, _ = forward(c, forced, random_batch(c, 12, 2))
    assert np.all(cache["f"] == 1.0) and np.all(cache["w"] == 1.0) and np.all(cache["r"] == 1.0)
    assert np.max(np.abs(cache["S"] - np.cumsum(cache["hin"], axis=0))) < 1e-12


# -- gradient ------------------------------------------------------------------

def test_zero_theta_rnn_gradient_is_zero():
    c = tiny_config("rnn")
    g, _ = gradient(c, zero_params(c), random_batch(c, 5, 2))
    assert not g.any()


def test_single_step_output_gradient_by_hand():
    c = ModelConfig("rnn", 2, (2,))
    p = {"W_hi": np.array([[0.5, -0.3], [0.2, 0.4]]), "W_hh": np.zeros((2, 2)),
         "W_oh": np.array([[0.1, 0.2], [-0.3, 0.4]]), "B_h": np.array([[0.1], [-0.2]])}
    from hfseq.core import build_layout, flatten
    layout = build_layout(c)
    params = zero_params(c).with_theta(flatten(p, layout))
    batch = Batch(np.array([[0]]), np.array([[1]]))
    H = np.tanh(np.array([0.5 + 0.1, 0.2 - 0.2]))
    z = p["W_oh"] @ H
    O = np.exp(z) / np.exp(z).sum()
    expected = np.outer(O - np.array([0.0, 1.0]), H)
    g, _ = gradient(c, params, batch)
    got = g[layout[2].offset:layout[2].offset + 4].reshape(2, 2)
    assert np.max(np.abs(got - expected)) < 1e-15


@pytest.mark.parametrize("arch, mode", CASES)
def test_gradient_matches_finite_differences(arch, mode):
    c = tiny_config(arch, mode=mode)
    params = random_params(c)
    batch = random_batch(c, 6, 2)
    g, loss = gradient(c, params, batch)
    fd = fd_gradient(c, params, batch, 1e-5)
    # central differences carry ~1e-11 of roundoff, so tiny entries get an absolute bound
    scale = np.maximum(np.abs(g), np.abs(fd))
    big = scale >= 1e-7
    assert np.max(np.abs(g - fd)[big] / scale[big]) < 1e-4
    assert np.max(np.abs(g - fd)[~big], initial=0.0) < 1e-10
    assert loss == mean_loss(c, params, batch)


def test_masked_gradient_uses_mask_weight():
    c = tiny_config("lstm", mode="linear_mse")
    params = random_params(c)
    b = random_batch(c, 5, 3)
    mask = np.zeros((5, 3))
    mask[-1] = 1.0
    batch = Batch(b.inputs, b.targets, mask)
    g, _ = gradient(c, params, batch)
    fd = fd_gradient(c, params, batch)
    assert np.max(np.abs(g - fd)) < 1e-8


@pytest.mark.parametrize("workers", (2, 3))
def test_sharded_gradient_is_deterministic(workers):
    c = tiny_config("mrnn")
    params = random_params(c)
    batch = random_batch(c, 6, 5)
    a, _ = gradient(c, params, batch, workers=workers)
    b, _ = gradient(c, params, batch, workers=workers)
    full, _ = gradient(c, params, batch)
    assert np.array_equal(a, b)
    assert np.max(np.abs(a - full)) < 1e-14


# -- checkpointing ---------------------------------------------------------------

@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_checkpointed_backward_long_sequence(arch):
    c = tiny_config(arch)
    params = random_params(c, std=0.4)
    batch = random_batch(c, 100, 2)
    full, _ = gradient(c, params, batch)
    stats = {}
    ck = checkpointed_backward(c, params, batch, 10, stats)
    assert np.max(np.abs(ck - full)) < 1e-12
    assert stats["peak_states"] <= math.ceil(100 / 10) + 10


def test_checkpoint_degenerate_intervals():
    c = tiny_config("mlstm")
    params = random_params(c)
    batch = random_batch(c, 9, 2)
    full, _ = gradient(c, params, batch)
    assert np.array_equal(checkpointed_backward(c, params, batch, 1), full)
    assert np.max(np.abs(checkpointed_backward(c, params, batch, 9) - full)) < 1e-12
    stats = {}
    checkpointed_backward(c, params, batch, None, stats)
    assert stats["boundaries"] == 3
    with pytest.raises(ValueError):
        checkpointed_backward(c, params, batch, 10)


# -- R-operator and curvature ----------------------------------------------------

def test_hsigma_examples(rng):
    O = softmax(rng.normal(size=6))
    assert np.max(np.abs(hsigma_multiply(O, np.full(6, 3.7)))) < 1e-15
    e = np.eye(6)[0]
    assert not hsigma_multiply(e, rng.normal(size=6)).any()
    r = rng.normal(size=6)
    dense = (np.diag(O) - np.outer(O, O)) @ r
    assert np.max(np.abs(hsigma_multiply(O, r) - dense)) < 1e-14
    assert np.array_equal(hsigma_multiply(None, r, "linear_mse"), r)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_r_forward_matches_jacobian_columns(arch):
    c = tiny_config(arch, V=4, h=3)
    params = random_params(c)
    batch = random_batch(c, 4, 2)
    ctx = make_context(c, params, batch)
    J, _ = fd_jacobians(c, params, batch)
    for i in range(0, params.size, 7):
        col = r_forward(ctx, np.eye(params.size)[i]).ravel()
        assert np.max(np.abs(col - J[:, i])) < 1e-6


def test_r_forward_linear_and_homogeneous(rng):
    c = tiny_config("mlstm")
    params = random_params(c)
    ctx = make_context(c, params, random_batch(c, 5, 2))
    v = rng.normal(size=params.size)
    assert not r_forward(ctx, np.zeros(params.size)).any()
    assert np.max(np.abs(r_forward(ctx, 2 * v) - 2 * r_forward(ctx, v))) < 1e-12
    with pytest.raises(DimensionError):
        r_forward(ctx, np.zeros(params.size + 1))


@pytest.mark.parametrize("arch, mode", CASES)
def test_gauss_newton_products_match_dense_oracle(arch, mode, rng):
    c = tiny_config(arch, V=4, h=3, mode=mode)
    params = random_params(c)
    batch = random_batch(c, 4, 2)
    assert params.size <= 300
    jac = fd_jacobians(c, params, batch)
    G = dense_gauss_newton(c, params, batch, jacobians=jac)
    Gs = dense_gauss_newton(c, params, batch, jacobians=(np.zeros_like(jac[0]), jac[1]), mu=1.0)
    ctx = make_context(c, params, batch)
    V = rng.normal(size=(params.size, 10))
    GV = np.stack([gv_product(ctx, v) for v in V.T], axis=1)
    GsV = np.stack([structural_gsv(ctx, v) for v in V.T], axis=1)
    assert np.linalg.norm(GV - G @ V) / np.linalg.norm(G @ V) < 1e-4
    assert np.linalg.norm(GsV - Gs @ V) / np.linalg.norm(Gs @ V) < 1e-4


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_damping_decomposition(arch, rng):
    c = tiny_config(arch)
    params = random_params(c)
    ctx = make_context(c, params, random_batch(c, 6, 2))
    v = rng.normal(size=params.size)
    base = gv_product(ctx, v)
    gs = structural_gsv(ctx, v)
    for mu in (0.01, 0.3, 1.0):
        for lam in (0.0, 10.0):
            got = gv_product(with_damping(ctx, mu, lam), v)
            assert np.max(np.abs(got - (base + mu * gs + lam * v))) < 1e-12


def test_tikhonov_term_is_exact(rng):
    c = tiny_config("rnn")
    params = random_params(c)
    ctx = make_context(c, params, random_batch(c, 5, 2))
    v = rng.normal(size=params.size)
    diff = gv_product(with_damping(ctx, lam=3.0), v) - gv_product(ctx, v)
    assert np.max(np.abs(diff - 3 * v)) < 1e-15
    assert not gv_product(ctx, np.zeros(params.size)).any()
    assert not structural_gsv(ctx, np.zeros(params.size)).any()


def test_state_damp_target_matches_oracle(rng):
    c = tiny_config("lstm", V=4, h=3)
    params = random_params(c)
    batch = random_batch(c, 4, 2)
    jac = fd_jacobians(c, params, batch, damp_target="state")
    Gs = dense_gauss_newton(c, params, batch, mu=1.0, damp_target="state",
                            jacobians=(np.zeros_like(jac[0]), jac[1]))
    ctx = make_context(c, params, batch, damp_target="state")
    v = rng.normal(size=params.size)
    assert np.linalg.norm(structural_gsv(ctx, v) - Gs @ v) / np.linalg.norm(Gs @ v) < 1e-4


def test_damping_must_be_non_negative():
    c = tiny_config("rnn")
    with pytest.raises(ValueError):
        make_context(c, random_params(c), random_batch(c, 3, 1), mu=-1.0)
    with pytest.raises(ValueError):
        make_context(c, random_params(c), random_batch(c, 3, 1), lam=float("nan"))


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(ARCHITECTURES), st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_gv_linear_symmetric_psd(arch, seed, a, b):
    c = tiny_config(arch)
    params = random_params(c, seed=seed % 7)
    ctx = make_context(c, params, random_batch(c, 5, 2, seed=seed), mu=0.3)
    g = make_rng(seed, 5)
    u, w = g.normal(size=(2, params.size))
    Gu, Gw = gv_product(ctx, u), gv_product(ctx, w)
    lhs = gv_product(ctx, a * u + b * w)
    assert np.linalg.norm(lhs - a * Gu - b * Gw) <= 1e-10 * (np.linalg.norm(u) + np.linalg.norm(w))
    assert abs(u @ Gw - w @ Gu) < 1e-10
    assert u @ Gu >= -1e-10
    Su = structural_gsv(ctx, u)
    assert abs(w @ Su - u @ structural_gsv(ctx, w)) < 1e-10


# -- vanishing / exploding diagnostic ----------------------------------------------

def _rnn_with_scaled_recurrence(scale, seed, zero_inputs):
    c = ModelConfig("rnn", 5, (8,))
    params = random_params(c, std=0.5, seed=seed)
    p = {k: v.copy() for k, v in params.views().items()}
    g = make_rng(seed, 8)
    if zero_inputs:
        q, _ = np.linalg.qr(g.normal(size=(8, 8)))
        p["W_hh"][:] = scale * q
        p["W_hi"][:] = 0.0
        p["B_h"][:] = 0.0
    else:
        W = g.normal(size=(8, 8))
        p["W_hh"][:] = scale * W / np.linalg.norm(W, 2)
    from hfseq.core import flatten
    return c, params.with_theta(flatten(p, params.layout))


@pytest.mark.parametrize("seed", range(3))
def test_jacobian_norms_decay_for_contracting_recurrence(seed):
    c, params = _rnn_with_scaled_recurrence(0.5, seed, zero_inputs=False)
    norms = recurrent_jacobian_norms(c, params, random_batch(c, 30, 1, seed=seed), 20)
    assert np.all(np.diff(norms[4:]) < 0)


def test_jacobian_norms_grow_for_expanding_recurrence():
    c, params = _rnn_with_scaled_recurrence(2.0, 0, zero_inputs=True)
    norms = recurrent_jacobian_norms(c, params, random_batch(c, 30, 1), 20)
    assert np.all(np.diff(norms[4:]) > 0)
    assert np.allclose(norms, 2.0 ** np.arange(1, 21), rtol=1e-10)
