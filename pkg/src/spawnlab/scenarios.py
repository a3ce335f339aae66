"""Scenario builders: regular-graph estimation, random compliant models, diagonal-form models."""

from __future__ import annotations

import numpy as np
from scipy.stats import ortho_group

from .exceptions import ModelError
from .model import (EdgeModel, GroundTruth, NetworkGraph, Regressor, Scenario,
                    build_regular_graph, validate_assumptions)

# calibrated so the steady-state gain radius sits in the reported range; see README
REGULAR_NOISE_VARIANCE = 100.0


def _axis_row(axis, scale):
    row = np.zeros((1, 2))
    row[0, axis] = scale
    return row


def regular_graph_scenario(k, seed=0, node_count=8, g_scale=15.0, h_scale=10.0,
                           regressor_variance=2.0, noise_variance=REGULAR_NOISE_VARIANCE,
                           alpha=10.0, truth_scale=1.0, adaptive=True):
    """k-regular network with scalar measurements of 2-d parameters.

    Every ``G_ij`` is ``g_scale`` times a random unit row ``[1, 0]`` or
    ``[0, 1]``; if a node's draws all pick the same axis, its last edge is
    flipped so that ``sum_j G^T G`` is positive definite.  Mean regressors are
    ``h_scale`` times a random unit row and realizations add i.i.d. gaussian
    entries of variance ``regressor_variance``.
    """
    rng = np.random.default_rng(seed)
    graph = build_regular_graph(node_count, k, seed=int(rng.integers(2 ** 32)))
    reg = Regressor("gaussian", regressor_variance) if regressor_variance > 0 else Regressor()
    C = np.array([[noise_variance]])
    edges = {}
    for i in range(1, graph.node_count):
        nbrs = sorted(graph.neighbors[i])
        g_axes = rng.integers(2, size=len(nbrs))
        if len(nbrs) > 1 and len(set(g_axes.tolist())) == 1:
            g_axes[-1] = 1 - g_axes[-1]
        h_axes = rng.integers(2, size=len(nbrs))
        for j, ga, ha in zip(nbrs, g_axes, h_axes):
            edges[(i, j)] = EdgeModel(_axis_row(ga, g_scale), _axis_row(ha, h_scale), C, reg)
    s = truth_scale * rng.standard_normal((graph.node_count, 2))
    return Scenario(graph, edges, GroundTruth(s), alpha=alpha, adaptive=adaptive)


def random_connected_graph(n, rng, extra_edge_prob=0.3, self_loop_prob=0.0):
    """Random spanning tree over ``0..n`` plus extra undirected edges."""
    order = rng.permutation(np.arange(1, n + 1))
    edges = set()
    placed = [0]
    for v in order:
        u = placed[int(rng.integers(len(placed)))]
        edges.add((min(u, v), max(u, v)))
        placed.append(int(v))
    for a in range(n + 1):
        for b in range(a + 1, n + 1):
            if (a, b) not in edges and rng.random() < extra_edge_prob:
                edges.add((a, b))
    loops = [i for i in range(1, n + 1) if rng.random() < self_loop_prob]
    return NetworkGraph.from_edges(n + 1, sorted(edges), self_loops=loops)


def random_spd(dim, rng, low=0.5, high=2.0):
    if dim == 1:
        return np.array([[rng.uniform(low, high)]])
    U = ortho_group.rvs(dim, random_state=rng)
    return (U * rng.uniform(low, high, dim)) @ U.T


def random_compliant_scenario(rng, n=None, d=2, m=2, h_ratio=0.9, alpha_margin=1.5,
                              extra_edge_prob=0.3, truth_scale=1.0, adaptive=True,
                              regressor=None):
    """Random model satisfying the gram, connectivity and singular-value conditions.

    Each node's mean regressors are scaled so the largest ``||Hbar||^2`` is
    ``h_ratio`` times that node's allowed bound, and ``alpha`` is set
    ``alpha_margin`` times above the required lower bound.
    """
    n = int(rng.integers(2, 11)) if n is None else n
    graph = random_connected_graph(n, rng, extra_edge_prob)
    edges = {}
    for i in range(1, n + 1):
        nbrs = sorted(graph.neighbors[i])
        Gs = [rng.standard_normal((m, d)) for _ in nbrs]
        eta2 = float(np.linalg.eigvalsh(sum(G.T @ G for G in Gs)).min())
        if eta2 <= 1e-6:
            raise ModelError("drawn gram matrix is numerically singular")
        bound = eta2 / min(len(nbrs), 3)
        for j, G in zip(nbrs, Gs):
            H = rng.standard_normal((m, d))
            H *= np.sqrt(h_ratio * bound * rng.uniform(0.2, 1.0)) / np.linalg.norm(H, 2)
            edges[(i, j)] = EdgeModel(G, H, random_spd(m, rng), regressor or Regressor())
    report = validate_assumptions(graph, edges, 1.0)
    alpha = max(1.0, alpha_margin * report.alpha_required)
    s = truth_scale * rng.standard_normal((n + 1, d))
    return Scenario(graph, edges, GroundTruth(s), alpha=alpha, adaptive=adaptive)


def diagonal_form_scenario(rng, n=None, d=2, regressor_variance=0.0, h_ratio=0.9,
                           alpha_margin=1.5, extra_edge_prob=0.3, truth_scale=1.0,
                           adaptive=True, U=None):
    """Random model sharing one right basis ``U`` across all edges.

    ``G = V A U^T``, ``Hbar = V B U^T``, ``C = V D V^T`` with diagonal
    ``0 <= B <= A`` and ``D > 0``.  With ``regressor_variance > 0`` the
    realized regressors perturb the diagonal of ``B`` in the same bases.
    """
    n = int(rng.integers(2, 11)) if n is None else n
    U = ortho_group.rvs(d, random_state=rng) if U is None else np.asarray(U)
    graph = random_connected_graph(n, rng, extra_edge_prob)
    edges = {}
    for i in range(1, n + 1):
        nbrs = sorted(graph.neighbors[i])
        A = [rng.uniform(0.5, 2.0, d) for _ in nbrs]
        eta2 = float(np.min(sum(a ** 2 for a in A)))
        bound = eta2 / min(len(nbrs), 3)
        for j, a in zip(nbrs, A):
            V = ortho_group.rvs(d, random_state=rng)
            b = a * rng.uniform(0.0, 1.0, d)
            top = np.max(b) ** 2
            if top > h_ratio * bound:
                b *= np.sqrt(h_ratio * bound / top)
            D = rng.uniform(0.5, 2.0, d)
            reg = (Regressor("diagonal", regressor_variance, V, U)
                   if regressor_variance > 0 else Regressor())
            edges[(i, j)] = EdgeModel((V * a) @ U.T, (V * b) @ U.T, (V * D) @ V.T, reg)
    report = validate_assumptions(graph, edges, 1.0)
    alpha = max(1.0, alpha_margin * report.alpha_required)
    s = truth_scale * rng.standard_normal((n + 1, d))
    return Scenario(graph, edges, GroundTruth(s), alpha=alpha, adaptive=adaptive)


def chain_scenario(n=2, d=2, G=None, H=None, C=None, alpha=None, truth=None,
                   adaptive=True, regressor=None):
    """Path ``0 - 1 - ... - n`` with the same edge model on every directed edge."""
    G = np.eye(d) if G is None else np.atleast_2d(G)
    H = np.eye(d) if H is None else np.atleast_2d(H)
    C = np.eye(G.shape[0]) if C is None else np.atleast_2d(C)
    graph = NetworkGraph.from_edges(n + 1, [(a, a + 1) for a in range(n)])
    edges = {e: EdgeModel(G, H, C, regressor or Regressor()) for e in graph.directed_edges}
    if alpha is None:
        alpha = max(1.0, validate_assumptions(graph, edges, 1.0).alpha_required)
    s = np.arange((n + 1) * G.shape[1], dtype=float).reshape(n + 1, -1) if truth is None \
        else np.asarray(truth, dtype=float)
    return Scenario(graph, edges, GroundTruth(s), alpha=alpha, adaptive=adaptive)
