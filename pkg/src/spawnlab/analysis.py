"""Convergence analysis: covariance fixed point, gain matrices, MSD, CRLB.

Stacked quantities index the non-reference nodes ``1..n``; block ``(i, j)``
of the ``dn x dn`` gain matrix maps the error of node ``j`` into node ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag

from .exceptions import ModelError, SingularInformationError
from .gspawn import covariance_round, init_beliefs
from .model import (EdgeModel, GroundTruth, NetworkGraph, Scenario,
                    validate_assumptions)

DENSE_LIMIT = 64
KRONECKER_LIMIT = 128


# --------------------------------------------------------------------------
# covariance fixed point


@dataclass
class FixedPointCovariances:
    P: np.ndarray  # (n+1, d, d); row 0 is alpha0 I
    residuals: np.ndarray  # (n+1,) largest absolute entry of the fixed-point residual
    iterations: int
    converged: bool
    monotone: bool
    min_decrease_eig: float  # smallest eigenvalue of P^(l) - P^(l+1) seen
    assumptions_ok: bool
    trace: np.ndarray | None = None


def fixed_point_residuals(scenario, P):
    """Largest absolute entry of ``P_i^-1 - sum_j G^T (C + Hbar P_j Hbar^T)^-1 G`` per node."""
    arr = scenario.arrays
    Pi = arr.C + arr.H @ P[arr.dst] @ np.swapaxes(arr.H, -1, -2)
    info_e = np.swapaxes(arr.G, -1, -2) @ np.linalg.solve(Pi, arr.G)
    info = np.einsum("ne,eab->nab", arr.scatter, info_e)
    res = np.zeros(scenario.graph.node_count)
    for i in range(1, scenario.graph.node_count):
        res[i] = np.abs(np.linalg.inv(P[i]) - info[i]).max()
    return res


def _sym(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def solve_P_infinity(scenario, tol=1e-10, max_iter=100_000, monotone_tol=1e-10,
                     keep_trace=False):
    """Iterate the covariance recursion from the initial beliefs to its fixed point.

    Stops when the Frobenius change over all nodes falls below ``tol``.  Each
    step's decrease ``P^(l) - P^(l+1)`` is checked for positive
    semi-definiteness; the run proceeds (and reports) even when the model
    assumptions fail or ``max_iter`` is exhausted.
    """
    report = validate_assumptions(scenario.graph, scenario.edges, scenario.alpha,
                                  scenario.truth.alpha0)
    state = init_beliefs(scenario.graph, scenario.alpha, scenario.truth.alpha0,
                         scenario.truth.s0_hat)
    P = state.P
    trace = [P] if keep_trace else None
    min_eig = np.inf
    converged = False
    it = 0
    arr = scenario.arrays
    Pi_inv_prev = diff = None
    for it in range(1, max_iter + 1):
        P_new, _, Pi = covariance_round(arr, P, state.alpha0)
        Pi_inv = _sym(np.linalg.inv(Pi))
        if diff is None:
            diff = P[1:] - P_new[1:]
        else:
            # P_old - P_new = P_old (K_new - K_old) P_new with
            # K_new - K_old = sum G^T Pi_old^-1 H dP_j H^T Pi_new^-1 G; carrying
            # the difference keeps it accurate when it is far below |P|
            dP = np.concatenate([np.zeros_like(diff[:1]), diff])[arr.dst]
            HT = np.swapaxes(arr.H, -1, -2)
            GT = np.swapaxes(arr.G, -1, -2)
            dK = np.einsum("ne,eab->nab", arr.scatter,
                           GT @ Pi_inv_prev @ arr.H @ dP @ HT @ Pi_inv @ arr.G)[1:]
            diff = _sym(P[1:] @ _sym(dK) @ P_new[1:])
        Pi_inv_prev = Pi_inv
        min_eig = min(min_eig, float(np.linalg.eigvalsh(diff).min()))
        change = float(np.sqrt((diff ** 2).sum()))
        P = P_new
        if keep_trace:
            trace.append(P)
        if change < tol:
            converged = True
            break
    return FixedPointCovariances(
        P=P,
        residuals=fixed_point_residuals(scenario, P),
        iterations=it,
        converged=converged,
        monotone=min_eig >= -monotone_tol,
        min_decrease_eig=min_eig,
        assumptions_ok=report.ok,
        trace=np.stack(trace) if keep_trace else None,
    )


# --------------------------------------------------------------------------
# gain matrices


def edge_gains(scenario, P_now, P_prev):
    """``K_e = P_i G^T (C + Hbar P_j Hbar^T)^-1`` for every edge, shape ``(E, d, m)``."""
    arr = scenario.arrays
    Pi = arr.C + arr.H @ P_prev[arr.dst] @ np.swapaxes(arr.H, -1, -2)
    w = np.linalg.eigvalsh(Pi)
    bad = w[:, 0] <= 1e-12 * np.maximum(w[:, -1], 1e-300)
    if bad.any():
        e = arr.edges[int(np.flatnonzero(bad)[0])]
        raise SingularInformationError(f"C + H P H^T is singular on edge {e}", edge=e, node=e[0])
    return P_now[arr.src] @ np.swapaxes(arr.G, -1, -2) @ np.linalg.inv(Pi)


def _assemble(scenario, blocks, include_reference=False):
    """Sum per-edge ``d x d`` blocks into the stacked node-by-node matrix."""
    arr = scenario.arrays
    d = scenario.d
    off = 0 if include_reference else 1
    size = scenario.graph.node_count - off
    M = np.zeros((size * d, size * d))
    for e, (i, j) in enumerate(arr.edges):
        if j < off:
            continue
        M[(i - off) * d:(i - off + 1) * d, (j - off) * d:(j - off + 1) * d] += blocks[e]
    return M


def gain_matrix(scenario, P_now, P_prev, H=None, include_reference=False):
    """Stacked error-propagation gain ``Q`` (mean regressors unless ``H`` is given).

    Block ``(i, j)`` is ``P_i G_ij^T Pi_ij^-1 H_ij``.  With
    ``include_reference`` the reference node is kept as block row/column 0
    with an identity self-block (its error never changes).
    """
    H = scenario.arrays.H if H is None else H
    blocks = edge_gains(scenario, P_now, P_prev) @ H
    M = _assemble(scenario, blocks, include_reference)
    if include_reference:
        M[:scenario.d, :scenario.d] = np.eye(scenario.d)
    return M


def build_Q_infinity(scenario, P_inf):
    """Steady-state gain matrix ``Q_inf`` over nodes ``1..n``."""
    return gain_matrix(scenario, P_inf, P_inf)


def noise_gain_matrix(scenario, P_now, P_prev, include_reference=False):
    """``R``: maps the stacked edge noise (canonical edge order) into node errors."""
    arr = scenario.arrays
    d, m = scenario.d, scenario.m
    K = edge_gains(scenario, P_now, P_prev)
    off = 0 if include_reference else 1
    size = scenario.graph.node_count - off
    R = np.zeros((size * d, arr.count * m))
    for e, (i, _) in enumerate(arr.edges):
        R[(i - off) * d:(i - off + 1) * d, e * m:(e + 1) * m] = K[e]
    return R


def stacked_noise_covariance(scenario):
    """Block-diagonal edge noise covariance in canonical edge order."""
    return block_diag(*scenario.arrays.C)


def rotate_blocks(Q, U):
    """``diag(U^T) Q diag(U)`` for a ``d x d`` basis ``U``."""
    k = Q.shape[0] // U.shape[0]
    Ub = np.kron(np.eye(k), U)
    return Ub.T @ Q @ Ub


# --------------------------------------------------------------------------
# spectral radius


def _power_radius(A, tol, max_iter, rng):
    """Dominant eigenvalue magnitude by power iteration on ``A^2``.

    Squaring keeps +/- pairs from oscillating; complex dominant pairs do not
    converge and are reported as ``None``.
    """
    x = rng.standard_normal(A.shape[0])
    x /= np.linalg.norm(x)
    prev = None
    for _ in range(max_iter):
        y = A @ (A @ x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        est = np.sqrt(ny)
        x = y / ny
        if prev is not None and abs(est - prev) <= tol * max(est, 1e-300):
            # confirm x is (close to) an invariant direction of A^2
            resid = np.linalg.norm(A @ (A @ x) - (x @ (A @ (A @ x))) * x)
            if resid <= np.sqrt(tol) * ny:
                return est
        prev = est
    return None


def spectral_radius(A, tol=1e-10, dense_limit=DENSE_LIMIT, max_iter=20_000, seed=0):
    """Largest absolute eigenvalue of a square matrix.

    Dense eigensolve up to ``dense_limit``; power iteration beyond it with a
    dense fallback when the iteration stalls.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"spectral radius needs a square matrix, got {A.shape}")
    if A.shape[0] == 0:
        return 0.0
    if A.shape[0] > dense_limit:
        r = _power_radius(A, tol, max_iter, np.random.default_rng(seed))
        if r is not None:
            return float(r)
    return float(np.abs(np.linalg.eigvals(A)).max())


# --------------------------------------------------------------------------
# mean and mean-square error recursions


def _initial_error(scenario, mu0=None):
    s = scenario.truth.s
    mu0 = np.zeros_like(s) if mu0 is None else np.asarray(mu0, dtype=float)
    return (mu0 - s)[1:].reshape(-1)


@dataclass
class MeanErrorTrace:
    u: np.ndarray  # (L+1, dn) expected error of nodes 1..n
    radii: np.ndarray  # (L,) spectral radius of each Q^(l)
    norms: np.ndarray

    @property
    def final_radius_below_one(self):
        return bool(self.radii[-1] < 1.0)


def mean_error_recursion(scenario, P_trace, u0=None):
    """Expected error ``u^(l) = Q^(l) u^(l-1)`` with mean-regressor gains.

    ``u0`` defaults to the error of zero initial means.
    """
    u = _initial_error(scenario) if u0 is None else np.asarray(u0, dtype=float)
    us, radii = [u], []
    for l in range(1, P_trace.shape[0]):
        Q = gain_matrix(scenario, P_trace[l], P_trace[l - 1])
        radii.append(spectral_radius(Q))
        u = Q @ u
        us.append(u)
    us = np.array(us)
    return MeanErrorTrace(us, np.array(radii), np.linalg.norm(us, axis=1))


@dataclass
class MsdTrace:
    msd: np.ndarray  # (L+1,) E||mu~||^2 over nodes 1..n (weighted if requested)
    node_msd: np.ndarray  # (L+1, n+1) per-node E||mu~_i||^2; column 0 is the reference
    exact: bool
    static: bool
    noise_terms: list = field(default_factory=list)  # R^(l) C R^(l)^T

    def avg_rmse(self):
        """Average over sensors of the per-sensor root mean-square error."""
        return np.sqrt(self.node_msd[:, 1:]).mean(axis=1)


def msd_operator(Q, max_dim=KRONECKER_LIMIT):
    """Explicit ``F = Q^T kron Q^T`` for a deterministic gain (refuses huge sizes)."""
    if Q.shape[0] > max_dim:
        raise ModelError(
            f"dn={Q.shape[0]} exceeds {max_dim}; the Kronecker operator would have "
            f"{Q.shape[0] ** 2} rows, use the matrix-form recursion instead"
        )
    return np.kron(Q.T, Q.T)


def _random_second_moment(scenario, K, M, include_reference=True):
    """Sum over random-regressor edges of ``K E[D M_jj D^T] K^T`` placed on block (i, i)."""
    arr = scenario.arrays
    d, m = scenario.d, scenario.m
    out = np.zeros_like(M)
    off = 0 if include_reference else 1
    for e, (i, j) in enumerate(arr.edges):
        reg = scenario.edges[(i, j)].regressor
        if not reg.is_random:
            continue
        if j < off:
            continue
        Mjj = M[(j - off) * d:(j - off + 1) * d, (j - off) * d:(j - off + 1) * d]
        bi = slice((i - off) * d, (i - off + 1) * d)
        out[bi, bi] += K[e] @ reg.sandwich(Mjj, m) @ K[e].T
    return out


def msd_recursion(scenario, P_trace, mu0=None, weight=None, mode="exact",
                  samples=2000, rng=None):
    """Propagate the second moment of the belief-mean error.

    Adaptive scenarios (fresh data each round) use
    ``M^(l) = E[Q M^(l-1) Q^T] + R C R^T``, which equals the weighted-norm
    recursion with ``F = E[Q^T kron Q^T]`` applied to ``vec(W)``.  The
    expectation is exact for constant, gaussian and diagonal regressors;
    ``mode="monte-carlo"`` averages ``samples`` sampled gains instead and the
    trace is flagged inexact.

    Static scenarios (one snapshot reused every round) need constant
    regressors and track ``mu~^(l) = Phi^(l) mu~^(0) + Gamma^(l) noise``.

    The reference node's prior error (covariance ``alpha0 I``) is carried
    along as a state that never changes.  ``weight`` is a ``dn x dn`` matrix
    over nodes ``1..n``; the default is the identity (plain MSD).
    """
    d = scenario.d
    n1 = scenario.graph.node_count
    alpha0 = scenario.truth.alpha0
    mean0 = np.concatenate([np.zeros(d), _initial_error(scenario, mu0)])
    prior = np.zeros((n1 * d, n1 * d))
    prior[:d, :d] = alpha0 * np.eye(d)
    W = np.eye((n1 - 1) * d) if weight is None else np.asarray(weight)
    rng = np.random.default_rng(rng)

    def summarize(M):
        blocks = np.array([np.trace(M[i * d:(i + 1) * d, i * d:(i + 1) * d]) for i in range(n1)])
        return float(np.trace(W @ M[d:, d:])), blocks

    msd, node_msd, noise_terms = [], [], []
    if not scenario.adaptive:
        if scenario.random_regressors:
            raise ModelError("static scenarios are analysed with constant regressors only")
        C = stacked_noise_covariance(scenario)
        Phi = np.eye(n1 * d)
        Gamma = np.zeros((n1 * d, C.shape[0]))
        M0 = np.outer(mean0, mean0) + prior
        for l in range(P_trace.shape[0]):
            if l > 0:
                Q = gain_matrix(scenario, P_trace[l], P_trace[l - 1], include_reference=True)
                R = noise_gain_matrix(scenario, P_trace[l], P_trace[l - 1], include_reference=True)
                Phi = Q @ Phi
                Gamma = Q @ Gamma + R
            M = Phi @ M0 @ Phi.T + Gamma @ C @ Gamma.T
            a, b = summarize(M)
            msd.append(a)
            node_msd.append(b)
        return MsdTrace(np.array(msd), np.array(node_msd), exact=True, static=True)

    exact = mode == "exact"
    if mode not in ("exact", "monte-carlo"):
        raise ValueError(f"unknown mode {mode!r}")
    C = stacked_noise_covariance(scenario)
    M = np.outer(mean0, mean0) + prior
    a, b = summarize(M)
    msd.append(a)
    node_msd.append(b)
    arr = scenario.arrays
    for l in range(1, P_trace.shape[0]):
        Qbar = gain_matrix(scenario, P_trace[l], P_trace[l - 1], include_reference=True)
        R = noise_gain_matrix(scenario, P_trace[l], P_trace[l - 1], include_reference=True)
        noise = R @ C @ R.T
        noise_terms.append(noise[d:, d:])
        if exact or not scenario.random_regressors:
            K = edge_gains(scenario, P_trace[l], P_trace[l - 1])
            M = Qbar @ M @ Qbar.T + _random_second_moment(scenario, K, M) + noise
        else:
            acc = np.zeros_like(M)
            for _ in range(samples):
                H = arr.H.copy()
                for e, key in enumerate(arr.edges):
                    reg = scenario.edges[key].regressor
                    if reg.is_random:
                        H[e] += reg.draw_perturbation(scenario.m, d, rng)
                Q = gain_matrix(scenario, P_trace[l], P_trace[l - 1], H=H,
                                include_reference=True)
                acc += Q @ M @ Q.T
            M = acc / samples + noise
        a, b = summarize(M)
        msd.append(a)
        node_msd.append(b)
    return MsdTrace(np.array(msd), np.array(node_msd), exact=exact or not scenario.random_regressors,
                    static=False, noise_terms=noise_terms)


# --------------------------------------------------------------------------
# Cramer-Rao bound


@dataclass
class CrlbResult:
    matrix: np.ndarray  # (dn, dn) averaged over the supplied snapshots
    trace: float
    node_bounds: np.ndarray  # (n,) trace of each node's diagonal block

    @property
    def avg_rmse_bound(self):
        """Average over sensors of sqrt(tr CRLB_ii), comparable to average RMSE."""
        return float(np.sqrt(self.node_bounds).mean())


def _edge_rows(scenario, edges):
    index = {e: k for k, e in enumerate(scenario.arrays.edges)}
    if edges is None:
        return list(range(scenario.arrays.count))
    missing = [e for e in edges if e not in index]
    if missing:
        raise ModelError(f"unknown edges {missing}")
    return [index[e] for e in edges]


def observation_matrix(scenario, H=None, edges=None):
    """Stacked system matrix ``E`` over unknowns ``s_1..s_n`` (reference known).

    ``edges`` restricts the rows to a subset (e.g. one direction per link
    when both directions share a single noisy measurement).
    """
    arr = scenario.arrays
    H = arr.H if H is None else H
    d, m = scenario.d, scenario.m
    n = scenario.graph.n
    rows_of = _edge_rows(scenario, edges)
    E = np.zeros((len(rows_of) * m, n * d))
    for r, e in enumerate(rows_of):
        i, j = arr.edges[e]
        rows = slice(r * m, (r + 1) * m)
        E[rows, (i - 1) * d:i * d] += arr.G[e]
        if j != 0:
            E[rows, (j - 1) * d:j * d] -= H[e]
    return E


def fisher_information(scenario, H=None, edges=None):
    E = observation_matrix(scenario, H, edges)
    rows = _edge_rows(scenario, edges)
    Cinv = np.linalg.inv(block_diag(*scenario.arrays.C[rows]))
    F = E.T @ Cinv @ E
    return 0.5 * (F + F.T)


def crlb(scenario, regressors=None, edges=None):
    """Average CRLB over snapshots (``regressors``: iterable of ``(E, m, d)`` arrays).

    Without ``regressors`` the mean regressors define a single snapshot.
    ``edges`` limits the independent measurements counted in the Fisher
    information.
    """
    snapshots = [None] if regressors is None else list(regressors)
    total = None
    for H in snapshots:
        F = fisher_information(scenario, H, edges)
        w, V = np.linalg.eigh(F)
        if w[0] <= 1e-12 * max(w[-1], 1e-300):
            direction = np.round(V[:, 0], 6)
            raise SingularInformationError(
                f"Fisher information is singular; unobservable direction {direction.tolist()}"
            )
        inv = (V / w) @ V.T
        total = inv if total is None else total + inv
    B = total / len(snapshots)
    d = scenario.d
    nodes = np.array([np.trace(B[k * d:(k + 1) * d, k * d:(k + 1) * d])
                      for k in range(scenario.graph.n)])
    return CrlbResult(B, float(np.trace(B)), nodes)


# --------------------------------------------------------------------------
# counterexample with r(Q_inf) > 1

APPENDIX_A = {
    (1, 1): [[0.3586, -0.1580], [-0.1580, 0.1135]],
    (1, 2): [[0.0709, -0.0890], [-0.0890, 0.1118]],
    (2, 1): [[0.3670, -0.2359], [-0.2359, 0.1522]],
    (2, 2): [[0.3067, -0.0163], [-0.0163, 0.0357]],
}
APPENDIX_A_INFO = {
    1: [[0.4395, -0.2470], [-0.2470, 0.2353]],
    2: [[0.6737, -0.2522], [-0.2522, 0.1879]],
}
APPENDIX_A_Q = [
    [1.0695, -0.2156, -0.1250, 0.1574],
    [0.4512, 0.2560, -0.5094, 0.6403],
    [0.1503, -0.0943, 0.8497, 0.0943],
    [-1.0537, 0.6834, 1.0537, 0.3166],
]
APPENDIX_A_REFERENCE_NOISE = 100.0


def appendix_a_scenario(blocks=None, alpha=None):
    """Chain 0-1-2 with self-measurements at nodes 1 and 2, G = Hbar = I.

    ``C_ij = A_ij^-1 - P_j`` reproduces the listed fixed point exactly;
    ``blocks`` overrides the ``A_ij`` matrices.
    """
    blocks = APPENDIX_A if blocks is None else blocks
    I = np.eye(2)
    P = {j: np.linalg.inv(np.array(K)) for j, K in APPENDIX_A_INFO.items()}
    graph = NetworkGraph(({1}, {0, 1, 2}, {1, 2}))
    edges = {(1, 0): EdgeModel(I, I, APPENDIX_A_REFERENCE_NOISE * I)}
    for (i, j), A in blocks.items():
        C = np.linalg.inv(np.array(A)) - P[j]
        edges[(i, j)] = EdgeModel(I, I, 0.5 * (C + C.T))
    if alpha is None:
        # smallest admissible prior scale: largest noise eigenvalue over rho^2 = 1
        alpha = max(float(np.linalg.eigvalsh(e.C).max()) for e in edges.values())
    return Scenario(graph, edges, GroundTruth(np.zeros((3, 2))), alpha=alpha, adaptive=True)


@dataclass
class AppendixAReport:
    residuals: np.ndarray  # per-entry residual matrices stacked (2, 2, 2)
    max_residual: float
    Q: np.ndarray
    Q_max_deviation: float
    radius: float
    assumption3_violated: bool
    mismatches: list

    @property
    def ok(self):
        return not self.mismatches

    def as_dict(self):
        return {
            "ok": self.ok,
            "spectral_radius": self.radius,
            "assumption3_violated": self.assumption3_violated,
            "max_fixed_point_residual": self.max_residual,
            "max_Q_deviation": self.Q_max_deviation,
            "Q_infinity": self.Q.tolist(),
            "mismatches": self.mismatches,
        }


def appendix_a_check(blocks=None, residual_tol=1e-3, radius_band=(1.016, 1.018),
                     q_tol=1e-3):
    """Rebuild the counterexample and confirm its fixed point and spectral radius."""
    scenario = appendix_a_scenario(blocks)
    P = np.zeros((3, 2, 2))
    for j, K in APPENDIX_A_INFO.items():
        P[j] = np.linalg.inv(np.array(K))
    # residual against the listed A_ij: P_i^-1 = sum_j A_ij (+ 1/100 I from the reference)
    given = APPENDIX_A if blocks is None else blocks
    res = []
    for i in (1, 2):
        total = sum(np.array(given[(i, j)]) for j in (1, 2) if (i, j) in given)
        if i == 1:
            total = total + np.eye(2) / APPENDIX_A_REFERENCE_NOISE
        res.append(np.array(APPENDIX_A_INFO[i]) - total)
    res = np.array(res)
    Q = build_Q_infinity(scenario, P)
    radius = spectral_radius(Q)
    q_dev = float(np.abs(Q - np.array(APPENDIX_A_Q)).max())
    mismatches = []
    max_res = float(np.abs(res).max())
    if max_res >= residual_tol:
        mismatches.append(f"fixed-point residual {max_res:.3g} >= {residual_tol:g}")
    if q_dev >= q_tol:
        mismatches.append(f"Q_inf deviates from the listed matrix by {q_dev:.3g}")
    if not radius_band[0] <= radius <= radius_band[1]:
        mismatches.append(f"spectral radius {radius:.5f} outside {radius_band}")
    return AppendixAReport(res, max_res, Q, q_dev, radius, radius >= 1.0, mismatches)
