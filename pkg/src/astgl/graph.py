"""Input-conditioned adjacency, spatial attention and Chebyshev graph basis.

All functions accept either one sample (``X`` of shape ``(L, N, F)``) or a
batch (``(B, L, N, F)``); matrices come back with the same leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEGREE_FLOOR = 1e-8


@dataclass
class AdaptiveGraphParams:
    W_a: Tensor
    shared: bool = False
    lam: float = 1e-4

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"regularization coefficient must be >= 0, got {self.lam}")
        if not np.all(np.isfinite(self.W_a.data)):
            raise ValueError("W_a has non-finite entries")

    @property
    def mode(self) -> str:
        return "shared" if self.shared else "per_pair"


@dataclass
class AttentionParams:
    w_sp: Tensor
    b_sp: Tensor


@dataclass
class GraphBundle:
    A_adp: Tensor
    alpha_sp: Tensor
    A_sp: Tensor
    J_scaled: Tensor
    cheb_basis: list[Tensor]
    lambda_max: Tensor


def _batch(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    if x.ndim == rank:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == rank + 1:
        return x, False
    raise ValueError(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")


def _unbatch(x: Tensor, single: bool) -> Tensor:
    return T.reshape(x, x.shape[1:]) if single else x


def pairwise_abs_diff(X: Tensor) -> Tensor:
    """``|x_i(t) - x_j(t)|`` as a ``(B, L, N, N, F)`` tensor."""
    b, length, n, f = X.shape
    full = (b, length, n, n, f)
    xi = T.expand(T.reshape(X, (b, length, n, 1, f)), full)
    xj = T.expand(T.reshape(X, (b, length, 1, n, f)), full)
    return T.abs_(xi - xj)


def adaptive_adjacency(X, params: AdaptiveGraphParams) -> Tensor:
    """Learned correlation matrix ``A_adp`` with rows summing to ``1/L``.

    Features are reduced first, giving one score per pair and time step,
    ``s_ij(t) = sum_f W[i,j,f,t] |x_i(t,f) - x_j(t,f)|``; then
    ``e_ij = (1/L) sum_t exp(-relu(s_ij(t))) / sum_t sum_j' exp(-relu(s_ij'(t)))``.
    """
    X, single = _batch(T.constant(X), 3)
    b, length, n, f = X.shape
    if n < 2:
        raise ValueError("adaptive adjacency needs at least two buses")
    W = params.W_a
    expected = (f, length) if params.shared else (n, n, f, length)
    if W.shape != expected:
        raise ValueError(f"W_a has shape {W.shape}, expected {expected}")
    diff = pairwise_abs_diff(X)
    if params.shared:
        scores = T.einsum("ft,btijf->bijt", W, diff)
    else:
        scores = T.einsum("ijft,btijf->bijt", W, diff)
    kernel = T.exp(T.neg(T.relu(scores)))
    num = T.sum_(kernel, axis=3)
    den = T.sum_(num, axis=2)
    den = T.expand(T.reshape(den, (b, n, 1)), (b, n, n))
    e = T.div(num, den) * (1.0 / length)
    return _unbatch(e, single)


def graph_learning_loss(X, A_adp, lam: float) -> Tensor:
    """``sum_ij ||x_i - x_j||^2 e_ij + lam ||A_adp||_F^2`` (batch mean)."""
    if lam < 0:
        raise ValueError(f"regularization coefficient must be >= 0, got {lam}")
    X, single = _batch(T.constant(X), 3)
    A, _ = _batch(T.constant(A_adp), 2)
    b, length, n, f = X.shape
    if A.shape != (b, n, n):
        raise ValueError(f"A_adp shape {A.shape} inconsistent with X {X.shape}")
    xn = T.reshape(T.transpose(X, (0, 2, 1, 3)), (b, n, length * f))
    full = (b, n, n, length * f)
    delta = T.expand(T.reshape(xn, (b, n, 1, length * f)), full) - T.expand(
        T.reshape(xn, (b, 1, n, length * f)), full
    )
    dist = T.frobenius_sq(delta, axis=3)
    per_sample = T.sum_(dist * A, axis=(1, 2)) + lam * T.frobenius_sq(A, axis=(1, 2))
    return T.reshape(per_sample, ()) if single else T.mean(per_sample)


def spatial_attention(A_adp, params: AttentionParams, literal_normalization: bool = False):
    """Attention reweighting; returns ``(alpha_sp, A_sp)``.

    ``Z = sigmoid(w_sp A_adp + b_sp)`` with ``b_sp[i]`` added across row ``i``;
    ``alpha`` is the row softmax of ``Z``. ``literal_normalization`` swaps in
    ``exp(z)/sum(z)`` for ablation only; it does not give unit row sums.
    """
    A, single = _batch(T.constant(A_adp), 2)
    b, n, m = A.shape
    if n != m:
        raise ValueError(f"A_adp must be square, got {A.shape[-2:]}")
    if params.w_sp.shape != (n, n) or params.b_sp.shape != (n,):
        raise ValueError("attention parameters do not match the number of buses")
    logits = T.einsum("ik,bkj->bij", params.w_sp, A)
    bias = T.expand(T.reshape(params.b_sp, (1, n, 1)), (b, n, n))
    Z = T.sigmoid(logits + bias)
    if literal_normalization:
        den = T.expand(T.reshape(T.sum_(Z, axis=2), (b, n, 1)), (b, n, n))
        alpha = T.exp(Z) / den
    else:
        alpha = T.softmax(Z)
    A_sp = alpha * A
    return _unbatch(alpha, single), _unbatch(A_sp, single)


def normalized_laplacian(A_sp) -> Tensor:
    """``I - D^-1/2 A D^-1/2`` of the symmetrized matrix, degrees floored."""
    A, single = _batch(T.constant(A_sp), 2)
    if np.any(A.data < 0):
        raise ValueError("graph matrix has negative entries")
    b, n, _ = A.shape
    sym = (A + T.transpose(A, (0, 2, 1))) * 0.5
    deg = T.clamp_min(T.sum_(sym, axis=2), DEGREE_FLOOR)
    dinv = T.power(deg, -0.5)
    scale = T.expand(T.reshape(dinv, (b, n, 1)), (b, n, n)) * T.expand(
        T.reshape(dinv, (b, 1, n)), (b, n, n)
    )
    eye = T.constant(np.broadcast_to(np.eye(n), (b, n, n)))
    J = eye - sym * scale
    return _unbatch(J, single)


def normalized_scaled_laplacian(A_sp) -> tuple[Tensor, Tensor]:
    """Returns ``(2 J / lambda_max - I, lambda_max)``."""
    J = normalized_laplacian(A_sp)
    Jb, single = _batch(J, 2)
    b, n, _ = Jb.shape
    lam = T.lambda_max(Jb)
    lam_b = T.expand(T.reshape(lam, (b, 1, 1)), (b, n, n))
    eye = T.constant(np.broadcast_to(np.eye(n), (b, n, n)))
    J_scaled = 2.0 * Jb / lam_b - eye
    if single:
        return _unbatch(J_scaled, True), T.reshape(lam, ())
    return J_scaled, lam


def chebyshev_basis(J_scaled, K_s: int) -> list[Tensor]:
    """``[T_0, ..., T_{K_s-1}]`` evaluated at the scaled Laplacian."""
    if K_s < 1:
        raise ValueError(f"Chebyshev order must be >= 1, got {K_s}")
    J = T.constant(J_scaled)
    n = J.shape[-1]
    eye = T.constant(np.broadcast_to(np.eye(n), J.shape))
    basis = [eye]
    if K_s > 1:
        basis.append(J)
    for _ in range(2, K_s):
        basis.append(2.0 * T.matmul(J, basis[-1]) - basis[-2])
    return basis


def build_graph(X, graph: AdaptiveGraphParams, attention: AttentionParams, K_s: int,
                literal_normalization: bool = False) -> GraphBundle:
    A_adp = adaptive_adjacency(X, graph)
    alpha, A_sp = spatial_attention(A_adp, attention, literal_normalization)
    J_scaled, lam = normalized_scaled_laplacian(A_sp)
    return GraphBundle(A_adp, alpha, A_sp, J_scaled, chebyshev_basis(J_scaled, K_s), lam)


def fixed_graph(A_fixed: np.ndarray, K_s: int, batch: int | None = None) -> GraphBundle:
    """Graph bundle for a constant adjacency (the fixed-topology baseline)."""
    A = np.asarray(A_fixed, dtype=np.float64)
    if batch is not None:
        A = np.broadcast_to(A, (batch,) + A.shape)
    A_t = T.constant(A)
    J_scaled, lam = normalized_scaled_laplacian(A_t)
    ones = T.constant(np.ones_like(A))
    return GraphBundle(A_t, ones, A_t, J_scaled, chebyshev_basis(J_scaled, K_s), lam)
