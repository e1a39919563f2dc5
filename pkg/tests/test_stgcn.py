import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from astgl import tensor as T
from astgl.graph import chebyshev_basis, normalized_scaled_laplacian
from astgl.stgcn import (
    classification_loss,
    classify,
    forward,
    graph_conv,
    losses,
    residual_block,
    temporal_conv,
    total_loss,
)
from astgl.tensor import Tensor
from factories import random_model
from oracles import conv1d_loop, graph_conv_loop, temporal_conv_loop

seeds = st.integers(0, 2**32 - 1)


def random_basis(rng, n, K):
    A = rng.random((n, n))
    Js, _ = normalized_scaled_laplacian(A)
    return [t.data for t in chebyshev_basis(Js, K)]


# ------------------------------------------------------------- graph conv


def test_graph_conv_identity_and_zero():
    X = np.random.default_rng(0).standard_normal((5, 4, 3))
    basis = [np.eye(4)]
    assert np.array_equal(graph_conv(X, basis, np.eye(3)[None]).data, X)
    assert np.array_equal(graph_conv(X, random_basis(np.random.default_rng(1), 4, 3),
                                     np.zeros((3, 3, 2))).data, np.zeros((5, 4, 2)))


def test_graph_conv_order_mismatch():
    with pytest.raises(ValueError, match="basis length"):
        graph_conv(np.ones((2, 3, 3)), [np.eye(3)] * 2, np.ones((3, 3, 1)))


def test_graph_conv_example_instance():
    rng = np.random.default_rng(2)
    X, theta = rng.standard_normal((5, 4, 3)), rng.standard_normal((3, 3, 6))
    basis = random_basis(rng, 4, 3)
    got = graph_conv(X, basis, theta).data
    assert np.max(np.abs(got - graph_conv_loop(X, basis, theta))) <= 1e-12


@given(st.integers(1, 6), st.integers(1, 8), st.integers(1, 3), st.integers(1, 4),
       st.integers(1, 4), seeds)
def test_graph_conv_matches_oracle(n, L, K, f, c, seed):
    rng = np.random.default_rng(seed)
    X, theta = rng.standard_normal((L, n, f)), rng.standard_normal((K, f, c))
    basis = random_basis(rng, n, K) if n > 1 else [np.eye(1)] * K
    got = graph_conv(X, basis, theta).data
    assert np.max(np.abs(got - graph_conv_loop(X, basis, theta))) <= 1e-12


def test_graph_conv_batched_basis():
    rng = np.random.default_rng(3)
    X, theta = rng.standard_normal((2, 4, 3, 2)), rng.standard_normal((2, 2, 3))
    b0, b1 = random_basis(rng, 3, 2), random_basis(rng, 3, 2)
    batched = [Tensor(np.stack([b0[k], b1[k]])) for k in range(2)]
    out = graph_conv(X, batched, theta).data
    assert np.allclose(out[0], graph_conv_loop(X[0], b0, theta), atol=1e-12, rtol=0)
    assert np.allclose(out[1], graph_conv_loop(X[1], b1, theta), atol=1e-12, rtol=0)


# ------------------------------------------------------------- temporal conv and residual


def test_temporal_conv_examples():
    Z = np.abs(np.random.default_rng(4).standard_normal((6, 3, 2)))
    ident = np.zeros((3, 2, 2))
    ident[1] = np.eye(2)
    assert np.array_equal(temporal_conv(Z, ident).data, Z)
    phi = np.random.default_rng(5).standard_normal((3, 2, 4))
    assert np.array_equal(temporal_conv(-Z, phi).data, np.zeros((6, 3, 4)))


def test_temporal_conv_kernel_longer_than_window():
    with pytest.raises(ValueError, match="longer"):
        temporal_conv(np.ones((2, 3, 1)), np.ones((3, 1, 1)))


@given(st.integers(1, 6), st.integers(1, 8), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), seeds)
def test_temporal_conv_matches_oracle(n, L, kt, c_in, c_out, seed):
    if kt > L:
        return
    rng = np.random.default_rng(seed)
    Z, phi = rng.standard_normal((L, n, c_in)), rng.standard_normal((kt, c_in, c_out))
    assert np.max(np.abs(temporal_conv(Z, phi).data - temporal_conv_loop(Z, phi))) <= 1e-12


def test_residual_examples():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((5, 3, 3))
    assert np.array_equal(residual_block(X, np.zeros((5, 3, 4)), np.zeros((3, 3, 4))).data,
                          np.zeros((5, 3, 4)))
    Z = np.abs(rng.standard_normal((5, 3, 4)))
    assert np.array_equal(residual_block(X, Z, np.zeros((3, 3, 4))).data, Z)
    with pytest.raises(ValueError, match="channels"):
        residual_block(X, Z, np.zeros((3, 3, 2)))


@given(st.integers(1, 5), st.integers(2, 8), seeds)
def test_residual_matches_composition(n, L, seed):
    rng = np.random.default_rng(seed)
    X, Z = rng.standard_normal((L, n, 3)), rng.standard_normal((L, n, 4))
    phi = rng.standard_normal((2, 3, 4))
    got = residual_block(X, Z, phi).data
    skip = np.stack([conv1d_loop(np.maximum(X[:, i], 0), phi, "same") for i in range(n)], axis=1)
    assert np.all(got >= 0)
    assert np.max(np.abs(got - np.maximum(skip + Z, 0))) <= 1e-12


def test_zero_residual_reduces_to_plain_branch():
    rng = np.random.default_rng(7)
    cfg, params = random_model(rng, 4, 5)
    X = rng.standard_normal((5, 4, 3))
    basis = random_basis(rng, 4, cfg.K_s)
    z_st = temporal_conv(graph_conv(X, basis, params.stgcn.thetas[0]), params.stgcn.phis[0])
    out = residual_block(X, z_st, np.zeros_like(params.stgcn.phi_res[0].data))
    assert np.array_equal(out.data, z_st.data)


# ------------------------------------------------------------- classifier and losses


def test_classify_examples():
    Z = np.random.default_rng(8).standard_normal((2, 3, 2))
    _, y = classify(Z, np.zeros((12, 2)), np.zeros(2))
    assert y.data.tolist() == [0.5, 0.5]
    _, y = classify(Z, np.zeros((12, 2)), np.array([0.0, math.log(3.0)]))
    assert np.allclose(y.data, [0.25, 0.75], atol=1e-15)
    with pytest.raises(ValueError, match="w_cm"):
        classify(Z, np.zeros((11, 2)), np.zeros(2))


@given(seeds, st.floats(0.1, 50))
def test_classify_sums_to_one(seed, scale):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((3, 2, 2)) * scale
    _, y = classify(Z, rng.standard_normal((12, 2)), rng.standard_normal(2))
    assert abs(y.data.sum() - 1) <= 1e-12


def test_classification_loss_examples():
    assert classification_loss(np.array([0.0, 1.0]), 1).item() == 0.0
    assert classification_loss(np.array([0.5, 0.5]), 1).item() == pytest.approx(math.log(2), abs=1e-15)
    assert classification_loss(np.array([0.9, 0.1]), 0).item() == pytest.approx(0.105361, abs=1e-6)
    with pytest.raises(ValueError, match="labels"):
        classification_loss(np.array([0.5, 0.5]), 2)


def test_classification_loss_clamps():
    assert classification_loss(np.array([1.0, 0.0]), 1).item() == pytest.approx(-math.log(1e-12))


@given(st.floats(0, 1), st.integers(0, 1))
def test_classification_loss_floor(p, y):
    loss = classification_loss(np.array([1 - p, p]), y).item()
    assert loss >= 0
    if loss == 0:
        assert (p if y == 1 else 1 - p) == 1.0


def test_total_loss_examples():
    assert total_loss(0.1, 0.7).item() == pytest.approx(0.8, abs=1e-15)
    assert total_loss(0.1, 0.7, 0.0).item() == 0.7
    assert total_loss(0.1, 0.7, 2.0).item() == pytest.approx(0.9, abs=1e-15)
    with pytest.raises(ValueError):
        total_loss(0.1, 0.7, -1.0)


# ------------------------------------------------------------- full model


def test_zero_network_gives_even_odds():
    rng = np.random.default_rng(9)
    cfg, params = random_model(rng, 4, 5)
    for t in params.tensors():
        t.data = np.zeros_like(t.data)
    trace = forward(rng.standard_normal((5, 4, 3)), params, cfg)
    assert trace.y_hat.data.tolist() == [0.5, 0.5]


def test_forward_shape_error_names_config():
    rng = np.random.default_rng(10)
    cfg, params = random_model(rng, 4, 5)
    with pytest.raises(ValueError, match="does not match config"):
        forward(np.ones((6, 4, 3)), params, cfg)


def test_forward_gradients_4bus_L5():
    rng = np.random.default_rng(11)
    cfg, params = random_model(rng, 4, 5)
    X, y = rng.standard_normal((2, 5, 4, 3)), np.array([0, 1])
    err = T.finite_diff_check(lambda: losses(X, y, params, cfg)[2], params.tensors())
    assert err <= 1e-4


def test_forward_permutation_invariance():
    rng = np.random.default_rng(12)
    N, L = 4, 5
    cfg, params = random_model(rng, N, L)
    X = rng.standard_normal((L, N, 3))
    perm = rng.permutation(N)
    _, permuted = random_model(np.random.default_rng(12), N, L)
    permuted.graph.W_a.data = params.graph.W_a.data[perm][:, perm]
    permuted.attention.w_sp.data = params.attention.w_sp.data[perm][:, perm]
    permuted.attention.b_sp.data = params.attention.b_sp.data[perm]
    w = params.stgcn.w_cm.data.reshape(L, N, cfg.f_tcn, 2)
    permuted.stgcn.w_cm.data = w[:, perm].reshape(-1, 2)
    a = forward(X, params, cfg).y_hat.data
    b = forward(X[:, perm], permuted, cfg).y_hat.data
    assert np.allclose(a, b, atol=1e-12, rtol=0)


@given(st.integers(2, 5), st.integers(2, 6), st.booleans(), seeds)
def test_every_leaf_gets_finite_gradient(n, L, shared, seed):
    rng = np.random.default_rng(seed)
    cfg, params = random_model(rng, n, L, shared=shared)
    X = rng.standard_normal((3, L, n, 3)) * 2
    _, _, total, trace = losses(X, np.array([0, 1, 1]), params, cfg)
    grads = T.backward(total, params.tensors())
    assert all(np.all(np.isfinite(g)) for g in grads)
    assert np.max(np.abs(trace.y_hat.data.sum(axis=1) - 1)) <= 1e-12


def test_fixed_adjacency_bypasses_graph_params():
    rng = np.random.default_rng(13)
    cfg, params = random_model(rng, 4, 5, adaptive=False)
    A = np.ones((4, 4)) - np.eye(4)
    X, y = rng.standard_normal((2, 5, 4, 3)), np.array([1, 0])
    l_agl, _, _, trace = losses(X, y, params, cfg, A)
    assert l_agl.item() == 0.0
    assert np.all(np.isfinite(trace.y_hat.data))
    assert T.finite_diff_check(lambda: losses(X, y, params, cfg, A)[2], params.tensors()) <= 1e-4
