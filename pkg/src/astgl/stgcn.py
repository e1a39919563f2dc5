"""Residual spatio-temporal graph convolution network and classifier head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graph import (
    AdaptiveGraphParams,
    AttentionParams,
    GraphBundle,
    _batch,
    _unbatch,
    build_graph,
    fixed_graph,
    graph_learning_loss,
)
from .tensor import Tensor

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    L: int
    N: int
    F_in: int = 3
    K_s: int = 3
    K_t: int = 3
    f_gcn: int = 16
    f_tcn: int = 16
    num_blocks: int = 2
    shared_W_a: bool = False
    lam: float = 1e-4
    gamma: float = 1.0
    literal_softmax: bool = False

    def __post_init__(self):
        for name in ("L", "N", "F_in", "K_s", "K_t", "f_gcn", "f_tcn", "num_blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be non-negative")

    def block_channels(self) -> list[int]:
        return [self.F_in] + [self.f_tcn] * (self.num_blocks - 1)

    @property
    def feature_size(self) -> int:
        return self.L * self.N * self.f_tcn


@dataclass
class StgcnParams:
    thetas: list[Tensor]
    phis: list[Tensor]
    phi_res: list[Tensor]
    w_cm: Tensor
    b_cm: Tensor

    @property
    def num_blocks(self) -> int:
        return len(self.thetas)


@dataclass
class ModelParams:
    """All learnable tensors. ``graph``/``attention`` are None for fixed-graph models."""

    stgcn: StgcnParams
    graph: AdaptiveGraphParams | None = None
    attention: AttentionParams | None = None

    def named(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        if self.graph is not None:
            out.append(("W_a", self.graph.W_a))
        if self.attention is not None:
            out += [("w_sp", self.attention.w_sp), ("b_sp", self.attention.b_sp)]
        s = self.stgcn
        for i in range(s.num_blocks):
            out += [(f"theta{i}", s.thetas[i]), (f"phi{i}", s.phis[i]),
                    (f"phi_res{i}", s.phi_res[i])]
        out += [("w_cm", s.w_cm), ("b_cm", s.b_cm)]
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]


@dataclass
class ForwardTrace:
    graph: GraphBundle
    Z_s: list[Tensor] = field(default_factory=list)
    Z_st: list[Tensor] = field(default_factory=list)
    Z_st_prime: list[Tensor] = field(default_factory=list)
    logits: Tensor | None = None
    y_hat: Tensor | None = None


def graph_conv(X, cheb_basis: list, theta) -> Tensor:
    """``Z[t,:,c] = sum_f sum_k theta[k,f,c] T_k X[t,:,f]``."""
    X, single = _batch(T.constant(X), 3)
    theta = T.constant(theta)
    if theta.shape[0] != len(cheb_basis):
        raise ValueError(f"filter order {theta.shape[0]} != basis length {len(cheb_basis)}")
    if theta.shape[1] != X.shape[-1]:
        raise ValueError(f"filter expects {theta.shape[1]} channels, input has {X.shape[-1]}")
    b, length, n, f = X.shape
    k, _, c = theta.shape
    basis = T.stack(cheb_basis, axis=-3)
    if basis.ndim == 3:
        basis = T.expand(T.reshape(basis, (1,) + basis.shape), (b,) + basis.shape)
    # mix channels first, then contract (k, m) against the stacked basis
    Y = T.matmul(T.reshape(X, (b * length * n, f)),
                 T.reshape(T.transpose(theta, (1, 0, 2)), (f, k * c)))
    Y = T.transpose(T.reshape(Y, (b, length, n, k, c)), (0, 3, 2, 1, 4))
    Y = T.reshape(Y, (b, k * n, length * c))
    B = T.reshape(T.transpose(basis, (0, 2, 1, 3)), (b, n, k * n))
    out = T.transpose(T.reshape(T.matmul(B, Y), (b, n, length, c)), (0, 2, 1, 3))
    return _unbatch(out, single)


def _time_conv(x: Tensor, phi, single_rank: int) -> Tensor:
    x, single = _batch(T.constant(x), single_rank)
    phi = T.constant(phi)
    if phi.shape[0] > x.shape[1]:
        raise ValueError(f"temporal kernel {phi.shape[0]} longer than window {x.shape[1]}")
    return _unbatch(T.conv1d_time(x, phi, padding="same", axis=1), single)


def temporal_conv(Z_s, phi) -> Tensor:
    """``ReLU(phi * ReLU(Z_s))`` per bus along time, same padding."""
    return T.relu(_time_conv(T.relu(T.constant(Z_s)), phi, 3))


def residual_block(X, Z_st, phi_res) -> Tensor:
    """``ReLU(phi_res * ReLU(X) + Z_st)``."""
    Z_st = T.constant(Z_st)
    phi_res = T.constant(phi_res)
    if phi_res.shape[2] != Z_st.shape[-1]:
        raise ValueError(f"residual branch gives {phi_res.shape[2]} channels, main branch {Z_st.shape[-1]}")
    skip = _time_conv(T.relu(T.constant(X)), phi_res, 3)
    return T.relu(skip + Z_st)


def classify(Z, w_cm, b_cm) -> tuple[Tensor, Tensor]:
    """Flatten, project to two logits, softmax. Returns ``(logits, y_hat)``."""
    Z, single = _batch(T.constant(Z), 3)
    w_cm, b_cm = T.constant(w_cm), T.constant(b_cm)
    b = Z.shape[0]
    flat = T.reshape(Z, (b, int(np.prod(Z.shape[1:]))))
    if w_cm.shape != (flat.shape[1], 2):
        raise ValueError(f"w_cm shape {w_cm.shape} does not match features {flat.shape[1]}")
    logits = T.matmul(flat, w_cm) + T.expand(T.reshape(b_cm, (1, 2)), (b, 2))
    y_hat = T.softmax(logits)
    return _unbatch(logits, single), _unbatch(y_hat, single)


def classification_loss(y_hat, y) -> Tensor:
    """Cross-entropy on ``y_hat = (p_stable, p_unstable)``; batch mean."""
    y_hat = T.constant(y_hat)
    labels = np.atleast_1d(np.asarray(y))
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError(f"labels must be 0 or 1, got {np.unique(labels)}")
    P, single = _batch(y_hat, 1)
    if P.shape != (labels.size, 2):
        raise ValueError(f"y_hat shape {y_hat.shape} does not match {labels.size} labels")
    onehot = np.zeros((labels.size, 2))
    onehot[np.arange(labels.size), labels.astype(int)] = 1.0
    logp = T.log(T.clamp_min(P, PROB_CLAMP))
    per_case = T.neg(T.sum_(logp * onehot, axis=1))
    return T.reshape(per_case, ()) if single else T.mean(per_case)


def total_loss(l_agl, l_cm, gamma: float = 1.0) -> Tensor:
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    return T.add(T.mul(l_agl, float(gamma)), l_cm)


def forward(X, params: ModelParams, config: ModelConfig,
            fixed_adjacency: np.ndarray | None = None) -> ForwardTrace:
    """Full model on one sample or a batch.

    With ``fixed_adjacency`` the learned graph and attention are bypassed and
    never touched; ``params.graph``/``params.attention`` may then be None.
    """
    X = T.constant(X)
    Xb, single = _batch(X, 3)
    if Xb.shape[1:] != (config.L, config.N, config.F_in):
        raise ValueError(f"input shape {X.shape} does not match config "
                         f"(L={config.L}, N={config.N}, F={config.F_in})")
    stage = "graph"
    try:
        if fixed_adjacency is None:
            bundle = build_graph(Xb, params.graph, params.attention, config.K_s,
                                 config.literal_softmax)
        else:
            bundle = fixed_graph(fixed_adjacency, config.K_s)
        trace = ForwardTrace(bundle)
        h = Xb
        s = params.stgcn
        for i in range(s.num_blocks):
            stage = f"block {i}"
            z_s = graph_conv(h, bundle.cheb_basis, s.thetas[i])
            z_st = temporal_conv(z_s, s.phis[i])
            h = residual_block(h, z_st, s.phi_res[i])
            trace.Z_s.append(z_s)
            trace.Z_st.append(z_st)
            trace.Z_st_prime.append(h)
        stage = "classifier"
        trace.logits, trace.y_hat = classify(h, s.w_cm, s.b_cm)
    except (ValueError, T.NonFiniteError) as exc:
        raise type(exc)(f"forward failed at {stage}: {exc}") from exc
    if single:
        trace.logits = _unbatch(trace.logits, True)
        trace.y_hat = _unbatch(trace.y_hat, True)
    return trace


def losses(X, y, params: ModelParams, config: ModelConfig,
           fixed_adjacency: np.ndarray | None = None):
    """Forward pass plus ``(l_agl, l_cm, total, trace)``.

    Fixed-graph models have no graph-learning term; ``l_agl`` is then 0.
    """
    trace = forward(X, params, config, fixed_adjacency)
    l_cm = classification_loss(trace.y_hat, y)
    if fixed_adjacency is None:
        l_agl = graph_learning_loss(X, trace.graph.A_adp, config.lam)
    else:
        l_agl = T.constant(0.0)
    return l_agl, l_cm, total_loss(l_agl, l_cm, config.gamma), trace
