"""Diffusion adapt-then-combine (ATC) baseline on the stacked parameter.

Every sensor ``i >= 1`` keeps an estimate of the whole stacked vector
``s = [s_1; ...; s_n]`` (the reference block ``s_0`` is pinned to the prior
``s0_hat`` and moved to the data side), takes an LMS step on its own
measurements and then averages the intermediate estimates of its
neighborhood with fixed convex weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ModelError

WEIGHT_POLICIES = ("uniform", "metropolis", "relative-degree")


def combination_neighborhood(graph, i):
    """Nodes whose intermediate estimates node ``i`` combines (self included)."""
    return sorted((set(graph.neighbors[i]) | {i}) - {0})


def combination_weights(graph, policy="relative-degree"):
    """Row-stochastic ``n x n`` weights over non-reference nodes.

    ``relative-degree``: a_ij proportional to the neighborhood size of j.
    ``metropolis``: a_ij = 1 / max(n_i, n_j), remainder on the diagonal.
    ``uniform``: equal weights over the neighborhood.
    """
    if policy not in WEIGHT_POLICIES:
        raise ModelError(f"unknown combination policy {policy!r}")
    n = graph.n
    hood = {i: combination_neighborhood(graph, i) for i in range(1, n + 1)}
    size = {i: len(h) for i, h in hood.items()}
    A = np.zeros((n, n))
    for i in range(1, n + 1):
        if policy == "uniform":
            for j in hood[i]:
                A[i - 1, j - 1] = 1.0 / size[i]
        elif policy == "relative-degree":
            total = sum(size[j] for j in hood[i])
            for j in hood[i]:
                A[i - 1, j - 1] = size[j] / total
        else:
            for j in hood[i]:
                if j != i:
                    A[i - 1, j - 1] = 1.0 / max(size[i], size[j])
            A[i - 1, i - 1] = 1.0 - A[i - 1].sum()
    return A


# --------------------------------------------------------------------------
# stacked regressor


@dataclass(frozen=True)
class StackedRegressor:
    """Full block form: ``W`` is ``(n+1)m x (n+1)d``, ``d`` stacks ``d_ij`` by row block ``j``."""

    W: np.ndarray
    d: np.ndarray
    node: int


def build_stacked(graph, edge_models, measurements, i):
    """Stacked regressor and data of node ``i``.

    ``measurements`` maps ``(i, j)`` to an object with ``d`` and ``H``
    attributes (see :class:`spawnlab.model.Measurement`).
    """
    any_model = next(iter(edge_models.values()))
    m, dim = any_model.m, any_model.d
    n1 = graph.node_count
    W = np.zeros((n1 * m, n1 * dim))
    data = np.zeros(n1 * m)
    for j in sorted(graph.neighbors[i]):
        if (i, j) not in measurements:
            raise ModelError(f"missing measurement for edge {(i, j)}")
        meas = measurements[(i, j)]
        G = edge_models[(i, j)].G
        rows = slice(j * m, (j + 1) * m)
        if j == i:
            W[rows, i * dim:(i + 1) * dim] = G - meas.H
        else:
            W[rows, i * dim:(i + 1) * dim] = G
            W[rows, j * dim:(j + 1) * dim] = -meas.H
        data[rows] = meas.d
    return StackedRegressor(W, data, i)


class AtcSetup:
    """Per-node compact regressors over the reduced parameter (blocks 1..n).

    Node ``i`` has one ``m``-row block per neighbor in ``sorted(B_i)``.
    """

    def __init__(self, scenario):
        self.scenario = scenario
        g = scenario.graph
        self.n, self.m, self.dim = g.n, scenario.m, scenario.d
        index = {e: k for k, e in enumerate(scenario.arrays.edges)}
        self.rows = {}
        self.template = {}
        for i in range(1, g.node_count):
            nbrs = sorted(g.neighbors[i])
            self.rows[i] = [(j, index[(i, j)]) for j in nbrs]
            W = np.zeros((len(nbrs) * self.m, self.n * self.dim))
            for r, (j, _) in enumerate(self.rows[i]):
                em = scenario.edges[(i, j)]
                rs = slice(r * self.m, (r + 1) * self.m)
                W[rs, self._col(i)] += em.G
                if j != 0:
                    W[rs, self._col(j)] -= em.H
            self.template[i] = W

    def _col(self, j):
        return slice((j - 1) * self.dim, j * self.dim)

    def regressor(self, i, H):
        """Compact ``W_i`` of shape ``(..., k_i m, n d)`` for realized regressors ``H``."""
        W = np.broadcast_to(self.template[i], H.shape[:-3] + self.template[i].shape).copy()
        if not self.scenario.random_regressors:
            return W
        for r, (j, e) in enumerate(self.rows[i]):
            if j == 0:
                continue
            rs = slice(r * self.m, (r + 1) * self.m)
            W[..., rs, self._col(j)] += self.scenario.arrays.H[e] - H[..., e, :, :]
        return W

    def data(self, i, d, H, s0_hat):
        """Stacked data of node ``i`` with the known reference term moved over."""
        parts = []
        for j, e in self.rows[i]:
            y = d[..., e, :]
            if j == 0:
                y = y + np.einsum("...ab,...b->...a", H[..., e, :, :], s0_hat)
            parts.append(y)
        return np.concatenate(parts, axis=-1)

    def gram(self, i):
        """Exact ``E[W_i^T W_i]`` on the reduced parameter."""
        R = self.template[i].T @ self.template[i]
        for j, e in self.rows[i]:
            if j == 0:
                continue
            reg = self.scenario.edges[(i, j)].regressor
            R[self._col(j), self._col(j)] += reg.gram(self.m, self.dim)
        return R


def step_size_bound(scenario, i, trials=10_000, rng=None, method="exact", setup=None):
    """Spectral radius of ``R_i = E[W_i^T W_i]``; the step must stay below ``2 / r``.

    ``method="exact"`` uses the closed-form regressor moments,
    ``"monte-carlo"`` averages ``trials`` independent draws.
    """
    setup = AtcSetup(scenario) if setup is None else setup
    if method == "exact":
        R = setup.gram(i)
    elif method == "monte-carlo":
        rng = np.random.default_rng(rng)
        arr = scenario.arrays
        H = np.broadcast_to(arr.H, (trials,) + arr.H.shape).copy()
        for e, key in enumerate(arr.edges):
            if key[0] != i:
                continue
            reg = scenario.edges[key].regressor
            if reg.is_random:
                H[:, e] += reg.draw_perturbation(scenario.m, scenario.d, rng, size=(trials,))
        W = setup.regressor(i, H)
        R = np.einsum("tra,trb->ab", W, W) / trials
    else:
        raise ValueError(f"unknown method {method!r}")
    r = float(np.abs(np.linalg.eigvalsh(0.5 * (R + R.T))).max())
    if not np.isfinite(r):
        raise ModelError(f"non-finite regressor moment at node {i}")
    return r


@dataclass
class AtcState:
    iteration: int
    S: np.ndarray  # (..., n, n*d) per-node estimates of the reduced stacked vector
    psi: np.ndarray | None = None


@dataclass(frozen=True)
class AtcConfig:
    step_sizes: np.ndarray  # xi_i, index i-1
    weights: np.ndarray  # row-stochastic, n x n


def make_config(scenario, eta=1.95, policy="relative-degree", setup=None):
    """Step sizes ``eta / r(R_i)`` and combination weights."""
    if not 0 < eta < 2:
        raise ModelError("eta must lie in (0, 2)")
    setup = AtcSetup(scenario) if setup is None else setup
    xi = np.array([eta / step_size_bound(scenario, i, setup=setup)
                   for i in range(1, scenario.graph.node_count)])
    A = combination_weights(scenario.graph, policy)
    return AtcConfig(xi, A)


def atc_step(state, setup, config, d, H, s0_hat):
    """One adapt-then-combine round.

    Adapt: ``psi_i = s_i + xi_i W_i^T (d_i - W_i s_i)``.
    Combine: ``s_i = sum_j a_ij psi_j`` over the neighborhood of ``i``.
    """
    S = state.S
    psi = np.empty_like(S)
    for i in range(1, setup.n + 1):
        W = setup.regressor(i, H)
        y = setup.data(i, d, H, s0_hat)
        s_i = S[..., i - 1, :]
        resid = y - np.einsum("...ra,...a->...r", W, s_i)
        psi[..., i - 1, :] = s_i + config.step_sizes[i - 1] * np.einsum(
            "...ra,...r->...a", W, resid)
    S_new = np.einsum("ij,...ja->...ia", config.weights, psi)
    return AtcState(state.iteration + 1, S_new, psi)


def recursion_matrix(setup, config):
    """Mean-error recursion ``(A kron I)(I - diag(xi_i R_i))`` of size ``n*nd``."""
    n, nd = setup.n, setup.n * setup.dim
    B = np.zeros((n * nd, n * nd))
    for i in range(1, n + 1):
        blk = slice((i - 1) * nd, i * nd)
        B[blk, blk] = np.eye(nd) - config.step_sizes[i - 1] * setup.gram(i)
    return np.kron(config.weights, np.eye(nd)) @ B


def own_blocks(S, s0_hat, dim):
    """Each node's estimate of its own parameter, reference row first."""
    n = S.shape[-2]
    idx = np.arange(n)
    own = S.reshape(S.shape[:-1] + (n, dim))[..., idx, idx, :]
    ref = np.broadcast_to(np.asarray(s0_hat)[..., None, :], own.shape[:-2] + (1, dim))
    return np.concatenate([ref, own], axis=-2)


@dataclass
class AtcTrace:
    estimates: np.ndarray  # (L+1, ..., n+1, d) own-block estimates
    converged_at: np.ndarray
    broadcasts: np.ndarray  # (L, n+1)
    config: AtcConfig

    @property
    def iterations(self):
        return self.estimates.shape[0] - 1

    @property
    def messages(self):
        return self.broadcasts

    def messages_per_sensor_per_iteration(self):
        return self.broadcasts[:, 1:].mean()


def run(scenario, stream, l_max, eps=1e-5, config=None, eta=1.95,
        policy="relative-degree", s0_hat=None, batch_shape=(), stop_early=True):
    """Run ATC from zero estimates; mirrors :func:`spawnlab.gspawn.run`."""
    setup = AtcSetup(scenario)
    config = make_config(scenario, eta, policy, setup) if config is None else config
    s0_hat = scenario.truth.s0_hat if s0_hat is None else np.asarray(s0_hat)
    n, dim = setup.n, setup.dim
    state = AtcState(0, np.zeros(tuple(batch_shape) + (n, n * dim)))
    est = [own_blocks(state.S, s0_hat, dim)]
    converged = np.full(tuple(batch_shape), -1, dtype=int)
    for l in range(1, l_max + 1):
        d, H = stream.round(l)
        state = atc_step(state, setup, config, d, H, s0_hat)
        est.append(own_blocks(state.S, s0_hat, dim))
        change = np.linalg.norm(est[-1] - est[-2], axis=-1).max(axis=-1)
        converged = np.where((converged < 0) & (change < eps), l, converged)
        if stop_early and (converged >= 0).all():
            break
    L = len(est) - 1
    degrees = np.array([0] + [scenario.graph.degree(i) for i in range(1, n + 1)])
    broadcasts = np.tile(degrees, (L, 1))
    return AtcTrace(np.stack(est), converged, broadcasts, config)
