import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from astgl import tensor as T
from astgl.graph import (
    AdaptiveGraphParams,
    AttentionParams,
    adaptive_adjacency,
    build_graph,
    chebyshev_basis,
    fixed_graph,
    graph_learning_loss,
    normalized_laplacian,
    normalized_scaled_laplacian,
    spatial_attention,
)
from astgl.tensor import Tensor
from oracles import adaptive_adjacency_loop, chebyshev_eigen

seeds = st.integers(0, 2**32 - 1)


def random_graph_params(rng, n, length, f=3, shared=False, scale=1.0):
    shape = (f, length) if shared else (n, n, f, length)
    W = Tensor(np.abs(rng.standard_normal(shape)) * scale, requires_grad=True)
    att = AttentionParams(Tensor(rng.standard_normal((n, n)), requires_grad=True),
                          Tensor(rng.standard_normal(n), requires_grad=True))
    return AdaptiveGraphParams(W, shared=shared), att


# ------------------------------------------------------------- adaptive adjacency


def test_zero_weights_give_uniform_adjacency():
    X = np.random.default_rng(0).standard_normal((10, 4, 3))
    e = adaptive_adjacency(X, AdaptiveGraphParams(Tensor(np.zeros((4, 4, 3, 10))))).data
    assert np.allclose(e, 0.025, atol=1e-15)


def test_two_bus_hand_value():
    X = np.array([[[1.0], [0.0]]])
    e = adaptive_adjacency(X, AdaptiveGraphParams(Tensor(np.ones((2, 2, 1, 1))))).data
    assert e[0, 0] == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-6)
    assert e[0, 0] == pytest.approx(0.731059, abs=1e-6)
    assert e[0, 1] == pytest.approx(0.268941, abs=1e-6)


def test_identical_trajectories_give_uniform_rows():
    x = np.random.default_rng(1).standard_normal((6, 1, 3))
    X = np.repeat(x, 5, axis=1)
    W = Tensor(np.abs(np.random.default_rng(2).standard_normal((5, 5, 3, 6))))
    e = adaptive_adjacency(X, AdaptiveGraphParams(W)).data
    assert np.allclose(e, 1 / 30, atol=1e-15)


def test_adjacency_errors():
    with pytest.raises(ValueError, match="two buses"):
        adaptive_adjacency(np.ones((3, 1, 2)), AdaptiveGraphParams(Tensor(np.ones((1, 1, 2, 3)))))
    with pytest.raises(ValueError):
        AdaptiveGraphParams(Tensor(np.ones(2)), lam=-1.0)
    with pytest.raises(ValueError, match="non-finite"):
        AdaptiveGraphParams(Tensor(np.array([np.nan])))
    with pytest.raises(ValueError, match="expected"):
        adaptive_adjacency(np.ones((3, 2, 2)), AdaptiveGraphParams(Tensor(np.ones((2, 2, 2, 4)))))


@given(st.integers(2, 4), st.integers(1, 4), st.integers(1, 3), st.booleans(), seeds)
def test_adjacency_matches_loop_oracle(n, length, f, shared, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((length, n, f))
    W = rng.standard_normal((f, length) if shared else (n, n, f, length))
    got = adaptive_adjacency(X, AdaptiveGraphParams(Tensor(W), shared=shared)).data
    assert np.allclose(got, adaptive_adjacency_loop(X, W, shared), atol=1e-13, rtol=0)


@given(st.integers(2, 6), st.integers(1, 8), st.booleans(), seeds)
def test_adjacency_row_sums_and_range(n, length, shared, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((length, n, 3)) * 3
    W = rng.standard_normal((3, length) if shared else (n, n, 3, length)) * 2
    e = adaptive_adjacency(X, AdaptiveGraphParams(Tensor(W), shared=shared)).data
    assert np.max(np.abs(e.sum(axis=1) - 1 / length)) <= 1e-10
    assert np.all(e > 0) and np.all(e <= 1)


def test_batched_adjacency_matches_single():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((4, 5, 3, 3))
    params = AdaptiveGraphParams(Tensor(rng.standard_normal((3, 3, 3, 5))))
    batched = adaptive_adjacency(X, params).data
    for b in range(4):
        assert np.array_equal(batched[b], adaptive_adjacency(X[b], params).data) or \
            np.allclose(batched[b], adaptive_adjacency(X[b], params).data, atol=1e-15, rtol=0)


# ------------------------------------------------------------- loss


def test_loss_hand_values():
    same = np.ones((3, 2, 2))
    assert graph_learning_loss(same, np.random.default_rng(0).random((2, 2)), 0.0).item() == 0.0
    assert graph_learning_loss(same, np.full((2, 2), 0.5), 0.1).item() == pytest.approx(0.1, abs=1e-15)
    X = np.array([[[1.0], [0.0]]])
    A = np.array([[0.0, 0.5], [0.5, 0.0]])
    assert graph_learning_loss(X, A, 0.0).item() == pytest.approx(1.0, abs=1e-15)


def test_loss_rejects_negative_lambda():
    with pytest.raises(ValueError):
        graph_learning_loss(np.ones((1, 2, 1)), np.ones((2, 2)), -0.1)


@given(st.integers(2, 5), seeds, st.floats(0, 10), st.floats(0, 10))
def test_loss_monotone_in_lambda(n, seed, l1, l2):
    rng = np.random.default_rng(seed)
    X, A = rng.standard_normal((3, n, 2)), rng.random((n, n))
    lo, hi = sorted((l1, l2))
    assert graph_learning_loss(X, A, lo).item() <= graph_learning_loss(X, A, hi).item()


# ------------------------------------------------------------- attention


def test_attention_zero_params():
    A = np.random.default_rng(4).random((4, 4))
    att = AttentionParams(Tensor(np.zeros((4, 4))), Tensor(np.zeros(4)))
    alpha, A_sp = spatial_attention(A, att)
    assert np.allclose(alpha.data, 0.25, atol=1e-15)
    assert np.allclose(A_sp.data, A / 4, atol=1e-15)


def test_attention_annihilated_by_zero_adjacency():
    rng = np.random.default_rng(5)
    att = AttentionParams(Tensor(rng.standard_normal((3, 3))), Tensor(rng.standard_normal(3)))
    _, A_sp = spatial_attention(np.zeros((3, 3)), att)
    assert np.array_equal(A_sp.data, np.zeros((3, 3)))


def test_attention_bias_is_row_wise():
    A = np.zeros((3, 3))
    b = np.array([5.0, 0.0, -5.0])
    att = AttentionParams(Tensor(np.zeros((3, 3))), Tensor(b))
    alpha, _ = spatial_attention(A + 1e-3, att)
    # the bias is constant within a row, so each row stays uniform
    assert np.allclose(alpha.data, 1 / 3, atol=1e-12)


@given(st.integers(2, 6), seeds)
def test_attention_rows_and_bounds(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.random((n, n))
    att = AttentionParams(Tensor(rng.standard_normal((n, n)) * 3), Tensor(rng.standard_normal(n)))
    alpha, A_sp = spatial_attention(A, att)
    assert np.max(np.abs(alpha.data.sum(axis=1) - 1)) <= 1e-10
    assert np.all((alpha.data > 0) & (alpha.data < 1))
    assert np.all(A_sp.data <= A) and np.all((A_sp.data >= 0) & (A_sp.data <= 1))


def test_literal_normalization_is_not_a_distribution():
    rng = np.random.default_rng(6)
    att = AttentionParams(Tensor(rng.standard_normal((3, 3))), Tensor(rng.standard_normal(3)))
    alpha, _ = spatial_attention(rng.random((3, 3)), att, literal_normalization=True)
    assert np.max(np.abs(alpha.data.sum(axis=1) - 1)) > 1e-3


# ------------------------------------------------------------- Laplacian and Chebyshev


def test_two_node_laplacian():
    A = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert np.allclose(normalized_laplacian(A).data, [[1, -1], [-1, 1]], atol=1e-15)
    Js, lam = normalized_scaled_laplacian(A)
    assert lam.item() == pytest.approx(2.0, abs=1e-9)
    assert np.allclose(Js.data, [[0, -1], [-1, 0]], atol=1e-9)


def test_empty_graph_laplacian():
    Js, lam = normalized_scaled_laplacian(np.zeros((4, 4)))
    assert lam.item() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(Js.data, np.eye(4), atol=1e-12)


def test_laplacian_rejects_negative_entries():
    with pytest.raises(ValueError, match="negative"):
        normalized_laplacian(np.array([[0.0, -1.0], [-1.0, 0.0]]))


@given(st.integers(2, 7), seeds, st.booleans())
def test_laplacian_spectrum(n, seed, symmetric):
    rng = np.random.default_rng(seed)
    A = rng.random((n, n)) * (rng.random((n, n)) < 0.6)
    if symmetric:
        A = (A + A.T) / 2
    J = normalized_laplacian(A).data
    mu = np.linalg.eigvalsh(J)
    assert mu.min() >= -1e-8 and mu.max() <= 2 + 1e-8
    Js, _ = normalized_scaled_laplacian(A)
    mu = np.linalg.eigvalsh(Js.data)
    assert mu.min() >= -1 - 1e-8 and mu.max() <= 1 + 1e-8


def test_chebyshev_examples():
    assert np.array_equal(chebyshev_basis(np.diag([0.3, 0.7]), 1)[0].data, np.eye(2))
    basis = chebyshev_basis(np.diag([0.5, 0.5]), 3)
    assert np.allclose(basis[2].data, np.diag([-0.5, -0.5]), atol=1e-15)
    with pytest.raises(ValueError):
        chebyshev_basis(np.eye(2), 0)


@given(st.integers(2, 6), st.integers(1, 6), seeds)
def test_chebyshev_matches_eigen_oracle(n, K, seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    Js = q @ np.diag(rng.uniform(-1, 1, n)) @ q.T
    Js = (Js + Js.T) / 2
    got = [t.data for t in chebyshev_basis(Js, K)]
    for g, w in zip(got, chebyshev_eigen(Js, K)):
        assert np.max(np.abs(g - w)) <= 1e-8
    for k in range(2, K):
        assert np.linalg.norm(got[k] - (2 * Js @ got[k - 1] - got[k - 2])) == 0.0


# ------------------------------------------------------------- equivariance and gradients


@given(st.integers(2, 5), st.integers(1, 4), st.booleans(), seeds)
def test_permutation_equivariance(n, length, shared, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((length, n, 3))
    g, att = random_graph_params(rng, n, length, shared=shared)
    perm = rng.permutation(n)
    Wp = g.W_a.data if shared else g.W_a.data[perm][:, perm]
    gp = AdaptiveGraphParams(Tensor(Wp), shared=shared)
    attp = AttentionParams(Tensor(att.w_sp.data[perm][:, perm]), Tensor(att.b_sp.data[perm]))
    a = build_graph(X, g, att, 3)
    b = build_graph(X[:, perm], gp, attp, 3)
    for name, tol in (("A_adp", 0.0), ("alpha_sp", 0.0), ("A_sp", 0.0), ("J_scaled", 1e-12)):
        ref = getattr(a, name).data[perm][:, perm]
        assert np.max(np.abs(getattr(b, name).data - ref)) <= tol + 4 * np.finfo(float).eps, name


@given(st.integers(2, 4), st.integers(1, 4), st.booleans(), seeds)
def test_graph_pipeline_gradients(n, length, shared, seed):
    rng = np.random.default_rng(seed)
    X = Tensor(rng.standard_normal((length, n, 3)), requires_grad=True)
    g, att = random_graph_params(rng, n, length, shared=shared, scale=0.3)

    def f():
        bundle = build_graph(X, g, att, 3)
        loss = graph_learning_loss(X, bundle.A_adp, 0.5)
        return T.add(loss, T.frobenius_sq(bundle.cheb_basis[-1]))

    assert T.finite_diff_check(f, [X, g.W_a, att.w_sp, att.b_sp]) <= 1e-4


def test_fixed_graph_bundle():
    A = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 2.0], [0.0, 2.0, 0.0]])
    bundle = fixed_graph(A, 2, batch=4)
    assert bundle.J_scaled.shape == (4, 3, 3)
    single = fixed_graph(A, 2)
    assert np.allclose(bundle.J_scaled.data[2], single.J_scaled.data, atol=1e-15)
