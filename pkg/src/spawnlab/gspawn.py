"""Gaussian belief broadcast estimator (gSPAWN).

Each non-reference node keeps a Gaussian belief ``N(mu_i, P_i)`` and, once
per iteration, broadcasts the same ``(mu_i, P_i)`` pair to every neighbor.
A node then fuses one Gaussian message per neighbor::

    nu_ij = d_ij + H_ij mu_j                (realized regressor)
    Pi_ij = C_ij + Hbar_ij P_j Hbar_ij^T    (mean regressor)
    P_i   = (sum_j G_ij^T Pi_ij^-1 G_ij)^-1
    mu_i  = P_i sum_j G_ij^T Pi_ij^-1 nu_ij

The covariance half of the recursion uses mean regressors only, so it is
identical for every trial; means may carry a leading batch (trial) axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import SingularInformationError
from .model import matvec, validate_assumptions

MESSAGES_PER_BROADCAST = 2  # mean vector + covariance matrix
CONDITION_FLOOR = 1e-12


@dataclass(frozen=True)
class Belief:
    mu: np.ndarray
    P: np.ndarray


@dataclass
class GspawnState:
    """Beliefs after ``iteration`` rounds.  Row 0 is the pinned reference."""

    iteration: int
    mu: np.ndarray  # (..., n+1, d)
    P: np.ndarray  # (n+1, d, d)
    alpha0: float
    warnings: list = field(default_factory=list)

    def belief(self, i):
        return Belief(self.mu[..., i, :], self.P[i])

    def payload(self, i):
        """What node ``i`` broadcasts: identical for every receiver."""
        return {"sender": i, "mu": self.mu[..., i, :], "P": self.P[i]}


def initial_covariance(degree, alpha, d):
    """Initial belief covariance for a node with ``degree`` neighbors."""
    if degree == 1:
        scale = 4.0 * alpha
    elif degree == 2:
        scale = 3.0 * alpha
    else:
        scale = 5.0 * alpha / 3.0
    return scale * np.eye(d)


def init_beliefs(graph, alpha, alpha0, s0_hat, alpha_min=None, batch_shape=()):
    """Algorithm start: zero means, degree-dependent covariances, pinned reference.

    ``alpha_min`` is the lower bound required by the model; falling below it
    (or below ``alpha0``) is recorded as a warning and the run proceeds.
    """
    s0_hat = np.asarray(s0_hat, dtype=float)
    d = s0_hat.shape[-1]
    n1 = graph.node_count
    P = np.empty((n1, d, d))
    P[0] = alpha0 * np.eye(d)
    for i in range(1, n1):
        P[i] = initial_covariance(graph.degree(i), alpha, d)
    mu = np.zeros(tuple(batch_shape) + (n1, d))
    mu[..., 0, :] = s0_hat
    warnings = []
    if alpha < alpha0:
        warnings.append(f"alpha={alpha:g} is below alpha0={alpha0:g}")
    if alpha_min is not None and alpha < alpha_min:
        warnings.append(f"alpha={alpha:g} is below the required bound {alpha_min:g}")
    return GspawnState(0, mu, P, float(alpha0), warnings)


def init_for_scenario(scenario, batch_shape=(), s0_hat=None):
    report = validate_assumptions(scenario.graph, scenario.edges, scenario.alpha,
                                  scenario.truth.alpha0)
    s0 = scenario.truth.s0_hat if s0_hat is None else s0_hat
    state = init_beliefs(scenario.graph, scenario.alpha, scenario.truth.alpha0, s0,
                         alpha_min=report.alpha_required, batch_shape=batch_shape)
    if np.ndim(s0) > 1:
        state.mu[..., 0, :] = s0
    return state


# --------------------------------------------------------------------------
# single-node operations


def compute_message_stats(mu_j, P_j, edge_model, d_ij, H_ij=None):
    """Mean and covariance of the message about ``G_ij s_i`` from neighbor ``j``."""
    H_real = edge_model.H if H_ij is None else H_ij
    nu = np.asarray(d_ij) + H_real @ np.asarray(mu_j)
    Pi = edge_model.C + edge_model.H @ P_j @ edge_model.H.T
    return nu, Pi


def _spd_inverse(A, label, **where):
    """Inverse of a symmetric PD matrix via Cholesky, symmetrized."""
    A = 0.5 * (A + A.T)
    w = np.linalg.eigvalsh(A)
    if w[-1] <= 0 or w[0] <= CONDITION_FLOOR * w[-1]:
        raise SingularInformationError(
            f"{label} is singular or ill-conditioned (eigenvalues {w[0]:.3g}..{w[-1]:.3g})",
            **where,
        )
    L = np.linalg.cholesky(A)
    Linv = np.linalg.inv(L)
    inv = Linv.T @ Linv
    return 0.5 * (inv + inv.T)


def update_node(i, messages):
    """Fuse neighbor messages into node ``i``'s new belief.

    ``messages`` is a sequence of ``(G_ij, nu_ij, Pi_ij)`` triples.
    """
    d = messages[0][0].shape[1]
    info = np.zeros((d, d))
    h = np.zeros(d)
    for G, nu, Pi in messages:
        Pi_inv = _spd_inverse(Pi, "message covariance", node=i)
        info += G.T @ Pi_inv @ G
        h += G.T @ Pi_inv @ nu
    P = _spd_inverse(info, f"information sum at node {i}", node=i)
    return Belief(P @ h, P)


# --------------------------------------------------------------------------
# vectorized round


def _batched_spd_inverse(A, label, ids, kind):
    A = 0.5 * (A + np.swapaxes(A, -1, -2))
    w = np.linalg.eigvalsh(A)
    bad = (w[..., -1] <= 0) | (w[..., 0] <= CONDITION_FLOOR * w[..., -1])
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        where = {kind: ids[k]}
        if kind == "edge":
            where["node"] = ids[k][0]
        raise SingularInformationError(
            f"{label} {ids[k]} is singular or ill-conditioned "
            f"(eigenvalues {w[k, 0]:.3g}..{w[k, -1]:.3g})",
            **where,
        )
    L = np.linalg.cholesky(A)
    Linv = np.linalg.inv(L)
    inv = np.swapaxes(Linv, -1, -2) @ Linv
    return 0.5 * (inv + np.swapaxes(inv, -1, -2))


def covariance_round(arrays, P_prev, alpha0):
    """One covariance update for every node.

    Returns ``(P_new, gains, Pi)`` where ``gains[e] = P_i G^T Pi_e^-1`` for
    edge ``e = (i, j)``; the gains also drive the mean update.
    """
    d = P_prev.shape[-1]
    Pi = arrays.C + arrays.H @ P_prev[arrays.dst] @ np.swapaxes(arrays.H, -1, -2)
    Pi_inv = _batched_spd_inverse(Pi, "message covariance on edge", arrays.edges, "edge")
    Gt_Pinv = np.swapaxes(arrays.G, -1, -2) @ Pi_inv
    info_e = Gt_Pinv @ arrays.G
    info = np.einsum("ne,eab->nab", arrays.scatter, info_e)
    nodes = list(range(1, info.shape[0]))
    P_new = np.empty_like(P_prev)
    P_new[0] = alpha0 * np.eye(d)
    P_new[1:] = _batched_spd_inverse(info[1:], "information sum at node", nodes, "node")
    gains = P_new[arrays.src] @ Gt_Pinv
    return P_new, gains, Pi


def mean_round(arrays, gains, mu_prev, d, H, s0_hat):
    """Mean update from previous-iteration means (reads only ``mu_prev``)."""
    mu_j = mu_prev[..., arrays.dst, :]
    nu = d + matvec(H, mu_j)
    contrib = matvec(gains, nu)
    mu_new = arrays.scatter @ contrib
    mu_new[..., 0, :] = s0_hat
    return mu_new


def step(state, scenario, d, H=None, order=None):
    """Advance ``state`` by one synchronous round.

    With ``order`` given, nodes are updated one by one in that order through
    :func:`update_node`; every read still comes from the previous buffer, so
    the result must not depend on ``order`` (single trial only).
    """
    arrays = scenario.arrays
    H = arrays.H if H is None else H
    s0_hat = state.mu[..., 0, :]
    l = state.iteration + 1
    if order is None:
        try:
            P_new, gains, _ = covariance_round(arrays, state.P, state.alpha0)
        except SingularInformationError as exc:
            exc.iteration = l
            raise
        mu_new = mean_round(arrays, gains, state.mu, d, H, s0_hat)
        return GspawnState(l, mu_new, P_new, state.alpha0, state.warnings)

    mu_new = state.mu.copy()
    P_new = state.P.copy()
    index = {e: k for k, e in enumerate(arrays.edges)}
    for i in order:
        if i == 0:
            continue
        msgs = []
        for j in sorted(scenario.graph.neighbors[i]):
            k = index[(i, j)]
            em = scenario.edges[(i, j)]
            nu, Pi = compute_message_stats(state.mu[j], state.P[j], em, d[k], H[k])
            msgs.append((em.G, nu, Pi))
        try:
            b = update_node(i, msgs)
        except SingularInformationError as exc:
            exc.iteration = l
            raise
        mu_new[i], P_new[i] = b.mu, b.P
    return GspawnState(l, mu_new, P_new, state.alpha0, state.warnings)


@dataclass
class GspawnTrace:
    """Beliefs for iterations ``0..L``.

    ``mu`` has shape ``(L+1, ..., n+1, d)`` (a trial axis when batched), ``P``
    has shape ``(L+1, n+1, d, d)``.  ``converged_at`` holds, per trial, the
    first iteration whose largest mean change fell below ``eps`` (-1 if never).
    """

    mu: np.ndarray
    P: np.ndarray
    converged_at: np.ndarray
    broadcasts: np.ndarray  # (L, n+1) payloads per node per iteration
    warnings: list

    @property
    def iterations(self):
        return self.mu.shape[0] - 1

    @property
    def messages(self):
        """Logical messages per node per iteration (mean + covariance)."""
        return MESSAGES_PER_BROADCAST * self.broadcasts

    def messages_per_sensor_per_iteration(self):
        return self.messages[:, 1:].mean()


def run(state, scenario, stream, l_max, eps=1e-5, stop_early=True):
    """Iterate synchronous rounds up to ``l_max``.

    ``stream.round(l)`` supplies ``(d, H)`` for iteration ``l``.  With
    ``stop_early`` the loop ends once every trial's largest per-node mean
    change drops below ``eps``.
    """
    if l_max < 1:
        raise ValueError("l_max must be at least 1")
    batch = state.mu.shape[:-2]
    mus, Ps = [state.mu], [state.P]
    converged = np.full(batch, -1, dtype=int)
    for l in range(1, l_max + 1):
        d, H = stream.round(l)
        state = step(state, scenario, d, H)
        mus.append(state.mu)
        Ps.append(state.P)
        change = np.linalg.norm(mus[-1] - mus[-2], axis=-1).max(axis=-1)
        newly = (converged < 0) & (change < eps)
        converged = np.where(newly, l, converged)
        if stop_early and (converged >= 0).all():
            break
    L = len(mus) - 1
    broadcasts = np.zeros((L, scenario.graph.node_count), dtype=int)
    broadcasts[:, 1:] = 1
    return GspawnTrace(np.stack(mus), np.stack(Ps), converged, broadcasts,
                       list(state.warnings))


def covariance_trace(scenario, l_max, alpha=None):
    """Covariances ``P^(0..l_max)`` alone; identical for every trial."""
    arrays = scenario.arrays
    alpha = scenario.alpha if alpha is None else alpha
    state = init_beliefs(scenario.graph, alpha, scenario.truth.alpha0, scenario.truth.s0_hat)
    Ps = [state.P]
    gains = []
    P = state.P
    for l in range(1, l_max + 1):
        try:
            P, g, _ = covariance_round(arrays, P, state.alpha0)
        except SingularInformationError as exc:
            exc.iteration = l
            raise
        Ps.append(P)
        gains.append(g)
    return np.stack(Ps), gains
