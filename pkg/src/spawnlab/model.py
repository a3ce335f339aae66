"""Network graph, linear edge data model and measurement synthesis.

Every non-reference sensor ``i`` observes, for each neighbor ``j`` in
``B_i``, the linear relation

    d_ij = G_ij s_i - H_ij s_j + w_ij,

where ``G_ij`` is known, ``H_ij`` is a (possibly random) regressor with mean
``Hbar_ij`` and ``w_ij ~ N(0, C_ij)``.  Node 0 is the reference node.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .exceptions import ModelError

REGRESSOR_KINDS = ("constant", "gaussian", "diagonal")


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def psd_sqrt_factor(C):
    """Return ``L`` with ``L @ L.T == C`` for a symmetric PSD matrix."""
    w, V = np.linalg.eigh(C)
    return V * np.sqrt(np.clip(w, 0.0, None))


# --------------------------------------------------------------------------
# graph


@dataclass(frozen=True)
class NetworkGraph:
    """Directed neighbor structure over nodes ``0..n``.

    ``neighbors[i]`` is the set ``B_i`` of nodes that node ``i`` measures
    against.  ``i in neighbors[i]`` marks a self-measurement.
    """

    neighbors: tuple

    def __post_init__(self):
        object.__setattr__(
            self, "neighbors", tuple(frozenset(int(j) for j in b) for b in self.neighbors)
        )
        n = len(self.neighbors)
        for i, b in enumerate(self.neighbors):
            for j in b:
                if not 0 <= j < n:
                    raise ModelError(f"node {i} lists unknown neighbor {j}")

    @classmethod
    def from_edges(cls, node_count, edges, self_loops=()):
        """Symmetric graph from undirected ``edges``; ``self_loops`` adds ``i`` to ``B_i``."""
        nbrs = [set() for _ in range(node_count)]
        for i, j in edges:
            if i == j:
                nbrs[i].add(i)
            else:
                nbrs[i].add(j)
                nbrs[j].add(i)
        for i in self_loops:
            nbrs[i].add(i)
        return cls(tuple(nbrs))

    @property
    def node_count(self):
        return len(self.neighbors)

    @property
    def n(self):
        """Number of non-reference nodes."""
        return len(self.neighbors) - 1

    def degree(self, i):
        return len(self.neighbors[i])

    def has_self_loop(self, i):
        return i in self.neighbors[i]

    @cached_property
    def directed_edges(self):
        """Canonical ordering of measurement edges ``(i, j)``, ``i >= 1``."""
        return tuple(
            (i, j) for i in range(1, self.node_count) for j in sorted(self.neighbors[i])
        )

    def undirected_adjacency(self):
        adj = [set() for _ in range(self.node_count)]
        for i, b in enumerate(self.neighbors):
            for j in b:
                if j != i:
                    adj[i].add(j)
                    adj[j].add(i)
        return adj

    def is_connected(self):
        return len(_bfs(self.undirected_adjacency(), 0)) == self.node_count

    def components_without_reference(self):
        """Weakly connected components of the graph with node 0 removed."""
        adj = self.undirected_adjacency()
        for a in adj:
            a.discard(0)
        seen, comps = set(), []
        for start in range(1, self.node_count):
            if start not in seen:
                comp = _bfs(adj, start)
                seen |= comp
                comps.append(comp)
        return comps

    def components_strongly_connected(self):
        """True when every component of ``G \\ {0}`` is strongly connected.

        Information flows ``j -> i`` whenever ``j in B_i``.
        """
        fwd = [set() for _ in range(self.node_count)]
        bwd = [set() for _ in range(self.node_count)]
        for i, b in enumerate(self.neighbors):
            if i == 0:
                continue
            for j in b:
                if j not in (0, i):
                    fwd[j].add(i)
                    bwd[i].add(j)
        for comp in self.components_without_reference():
            root = next(iter(comp))
            if _bfs(fwd, root) != comp or _bfs(bwd, root) != comp:
                return False
        return True

    def hop_distances(self, source=0):
        """BFS hop counts from ``source`` along the undirected structure."""
        adj = self.undirected_adjacency()
        dist = {source: 0}
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for v in sorted(adj[u]):
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist


def _bfs(adj, start):
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return seen


def _pair_stubs(n, k, rng):
    """One pairing-model attempt; returns an edge set or None on a dead end."""
    edges = set()
    stubs = [v for v in range(n) for _ in range(k)]
    while stubs:
        rng.shuffle(stubs)
        leftover = []
        for a, b in zip(stubs[0::2], stubs[1::2]):
            a, b = min(a, b), max(a, b)
            if a != b and (a, b) not in edges:
                edges.add((a, b))
            else:
                leftover += [a, b]
        if len(leftover) == len(stubs):
            # no progress possible unless some valid pair remains
            nodes = sorted(set(leftover))
            if not any(
                (a, b) not in edges for x, a in enumerate(nodes) for b in nodes[x + 1:]
            ):
                return None
        stubs = leftover
    return edges


def build_regular_graph(n, k, seed=None, max_retries=1000):
    """Connected ``k``-regular graph on ``n`` nodes (node 0 is the reference).

    Pairing-model construction: stubs are shuffled and matched, invalid pairs
    (self-loops, repeated edges) are re-matched, and the whole draw is
    rejected if it dead-ends or comes out disconnected.  Dense requests are
    built as the complement of a sparse regular graph.
    """
    if k < 1 or k >= n:
        raise ModelError(f"degree must satisfy 1 <= k < n, got n={n}, k={k}")
    if (n * k) % 2:
        raise ModelError(f"n*k must be even, got n={n}, k={k}")
    rng = np.random.default_rng(seed)
    if k == n - 1:
        edges = {(a, b) for a in range(n) for b in range(a + 1, n)}
        return NetworkGraph.from_edges(n, edges)

    complement = k > (n - 1) / 2
    k_draw = n - 1 - k if complement else k
    for _ in range(max_retries):
        if k_draw == 0:
            edges = set()
        else:
            # python's shuffle on a list, driven by a seeded generator
            edges = _pair_stubs(n, k_draw, _ListShuffler(rng))
            if edges is None:
                continue
        if complement:
            edges = {(a, b) for a in range(n) for b in range(a + 1, n)} - edges
        graph = NetworkGraph.from_edges(n, edges)
        if graph.is_connected():
            return graph
    raise ModelError(f"no connected {k}-regular graph on {n} nodes after {max_retries} tries")


class _ListShuffler:
    def __init__(self, rng):
        self._rng = rng

    def shuffle(self, seq):
        perm = self._rng.permutation(len(seq))
        seq[:] = [seq[p] for p in perm]


# --------------------------------------------------------------------------
# edge model


@dataclass(frozen=True)
class Regressor:
    """Distribution of the realized regressor ``H_ij`` around its mean.

    ``constant``  H = Hbar.
    ``gaussian``  H = Hbar + E, entries of E i.i.d. N(0, variance).
    ``diagonal``  H = Hbar + V diag(e) U^T with e_k i.i.d. N(0, variance);
                  ``left`` is V (m x m), ``right`` is U (d x d).  Used for
                  models whose regressors share a fixed singular basis.
    """

    kind: str = "constant"
    variance: float = 0.0
    left: np.ndarray | None = None
    right: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in REGRESSOR_KINDS:
            raise ModelError(f"unknown regressor kind {self.kind!r}")
        if self.variance < 0:
            raise ModelError("regressor variance must be non-negative")
        if self.kind == "diagonal":
            if self.left is None or self.right is None:
                raise ModelError("diagonal regressors need left and right bases")
            object.__setattr__(self, "left", _frozen(self.left))
            object.__setattr__(self, "right", _frozen(self.right))

    @property
    def is_random(self):
        return self.kind != "constant" and self.variance > 0

    def draw_perturbation(self, m, d, rng, size=()):
        if self.kind == "gaussian":
            return np.sqrt(self.variance) * rng.standard_normal(size + (m, d))
        r = min(m, d)
        e = np.sqrt(self.variance) * rng.standard_normal(size + (r,))
        W = (self.left[:, None, :r] * self.right[None, :, :r]).reshape(m * d, r)
        return (e @ W.T).reshape(size + (m, d))

    def gram(self, m, d):
        """``E[D^T D]`` for the zero-mean perturbation ``D``."""
        if not self.is_random:
            return np.zeros((d, d))
        if self.kind == "gaussian":
            return m * self.variance * np.eye(d)
        r = min(m, d)
        U = self.right[:, :r]
        return self.variance * U @ U.T

    def sandwich(self, M, m):
        """``E[D M D^T]`` for a fixed ``d x d`` matrix ``M``."""
        if not self.is_random:
            return np.zeros((m, m))
        if self.kind == "gaussian":
            return self.variance * np.trace(M) * np.eye(m)
        d = M.shape[0]
        r = min(m, d)
        U, V = self.right[:, :r], self.left[:, :r]
        w = self.variance * np.einsum("ak,ab,bk->k", U, M, U)
        return (V * w) @ V.T


@dataclass(frozen=True)
class EdgeModel:
    """System matrices for one measurement edge ``(i, j)``."""

    G: np.ndarray
    H: np.ndarray
    C: np.ndarray
    regressor: Regressor = field(default_factory=Regressor)

    def __post_init__(self):
        G, H, C = (np.atleast_2d(_frozen(x)) for x in (self.G, self.H, self.C))
        if G.shape != H.shape:
            raise ModelError(f"G {G.shape} and mean H {H.shape} differ in shape")
        m = G.shape[0]
        if C.shape != (m, m):
            raise ModelError(f"noise covariance must be {m}x{m}, got {C.shape}")
        if not np.allclose(C, C.T, atol=1e-12 * max(1.0, np.abs(C).max())):
            raise ModelError("noise covariance must be symmetric")
        if np.linalg.eigvalsh(C).min() < -1e-12 * max(1.0, np.abs(C).max()):
            raise ModelError("noise covariance must be positive semi-definite")
        for name, val in (("G", G), ("H", H), ("C", C)):
            object.__setattr__(self, name, val)

    @property
    def m(self):
        return self.G.shape[0]

    @property
    def d(self):
        return self.G.shape[1]


@dataclass(frozen=True)
class GroundTruth:
    """True parameters ``s`` (row ``i`` is ``s_i``) and the reference prior."""

    s: np.ndarray
    s0_hat: np.ndarray | None = None
    alpha0: float = 0.0

    def __post_init__(self):
        s = np.atleast_2d(_frozen(self.s))
        object.__setattr__(self, "s", s)
        if self.alpha0 < 0:
            raise ModelError("alpha0 must be non-negative")
        s0 = s[0] if self.s0_hat is None else self.s0_hat
        object.__setattr__(self, "s0_hat", _frozen(s0))

    def redraw_prior(self, rng):
        """Copy with ``s0_hat = s_0 + w_0``, ``w_0 ~ N(0, alpha0 I)``."""
        w0 = np.sqrt(self.alpha0) * rng.standard_normal(self.s.shape[1])
        return GroundTruth(self.s, self.s[0] + w0, self.alpha0)


@dataclass(frozen=True)
class Measurement:
    edge: tuple
    iteration: int
    d: np.ndarray
    H: np.ndarray


@dataclass(frozen=True)
class EdgeArrays:
    """Edge models stacked along a leading edge axis in canonical order."""

    edges: tuple
    src: np.ndarray
    dst: np.ndarray
    G: np.ndarray
    H: np.ndarray
    C: np.ndarray
    noise_factor: np.ndarray
    scatter: np.ndarray  # (node_count, E) one-hot, sums edge terms into nodes
    regressor_std: np.ndarray | None = None  # per-edge entry std when no edge is "diagonal"

    @property
    def count(self):
        return len(self.edges)


@dataclass(frozen=True)
class Scenario:
    """Everything needed to run the estimators on one network."""

    graph: NetworkGraph
    edges: dict
    truth: GroundTruth
    alpha: float
    adaptive: bool = True

    def __post_init__(self):
        expected = set(self.graph.directed_edges)
        missing = expected - set(self.edges)
        if missing:
            raise ModelError(f"edge models missing for {sorted(missing)}")
        dims = {(e.m, e.d) for e in self.edges.values()}
        if len(dims) != 1:
            raise ModelError(f"edge dimensions must agree across the network, got {dims}")
        if self.truth.s.shape != (self.graph.node_count, self.d):
            raise ModelError(
                f"truth must be {self.graph.node_count}x{self.d}, got {self.truth.s.shape}"
            )
        if self.alpha <= 0:
            raise ModelError("alpha must be positive")

    @property
    def m(self):
        return next(iter(self.edges.values())).m

    @property
    def d(self):
        return next(iter(self.edges.values())).d

    @property
    def random_regressors(self):
        return any(e.regressor.is_random for e in self.edges.values())

    @cached_property
    def arrays(self):
        keys = self.graph.directed_edges
        models = [self.edges[k] for k in keys]
        scatter = np.zeros((self.graph.node_count, len(keys)))
        for e, (i, _) in enumerate(keys):
            scatter[i, e] = 1.0
        arr = EdgeArrays(
            edges=keys,
            src=np.array([i for i, _ in keys], dtype=int),
            dst=np.array([j for _, j in keys], dtype=int),
            G=np.array([m.G for m in models]),
            H=np.array([m.H for m in models]),
            C=np.array([m.C for m in models]),
            noise_factor=np.array([psd_sqrt_factor(m.C) for m in models]),
            scatter=scatter,
            regressor_std=None if any(m.regressor.kind == "diagonal" for m in models)
            else np.array([np.sqrt(m.regressor.variance) if m.regressor.is_random else 0.0
                           for m in models]),
        )
        for a in (arr.src, arr.dst, arr.G, arr.H, arr.C, arr.noise_factor, arr.scatter):
            a.setflags(write=False)
        return arr

    def replace(self, **changes):
        kw = dict(graph=self.graph, edges=self.edges, truth=self.truth,
                  alpha=self.alpha, adaptive=self.adaptive)
        kw.update(changes)
        return Scenario(**kw)


# --------------------------------------------------------------------------
# assumptions


@dataclass(frozen=True)
class NodeCheck:
    node: int
    degree: int
    gram_min_eig: float  # eta_i^2
    rho2: float
    rho2_bound: float
    gram_pd: bool
    singular_ok: bool


@dataclass(frozen=True)
class ValidationReport:
    nodes: tuple
    connected: bool
    strong_components: bool
    min_degree_ok: bool
    alpha: float
    alpha0: float
    alpha_required: float
    alpha_ge_alpha0: bool
    alpha_ge_noise_bound: bool

    @property
    def gram_pd(self):
        return all(c.gram_pd for c in self.nodes)

    @property
    def singular_values_ok(self):
        return all(c.singular_ok for c in self.nodes)

    @property
    def alpha_ok(self):
        return self.alpha_ge_alpha0 and self.alpha_ge_noise_bound

    @property
    def ok(self):
        return (
            self.gram_pd and self.connected and self.strong_components
            and self.min_degree_ok and self.singular_values_ok and self.alpha_ok
        )

    def failures(self):
        out = []
        for c in self.nodes:
            if not c.gram_pd:
                out.append(f"gram: sum G^T G not positive definite at node {c.node}")
            if not c.singular_ok:
                out.append(
                    f"singular values: node {c.node} rho^2={c.rho2:.6g} exceeds {c.rho2_bound:.6g}"
                )
        if not self.connected:
            out.append("connectivity: graph is not connected")
        if not self.strong_components:
            out.append("connectivity: components without the reference are not strongly connected")
        if not self.min_degree_ok:
            out.append("every non-reference node needs at least one neighbor")
        if not self.alpha_ge_alpha0:
            out.append(f"alpha={self.alpha:g} below alpha0={self.alpha0:g}")
        if not self.alpha_ge_noise_bound:
            out.append(f"alpha={self.alpha:g} below noise bound {self.alpha_required:g}")
        return out

    def as_dict(self):
        return {
            "ok": self.ok,
            "connected": self.connected,
            "strong_components": self.strong_components,
            "gram_pd": self.gram_pd,
            "singular_values_ok": self.singular_values_ok,
            "alpha": self.alpha,
            "alpha_required": self.alpha_required,
            "alpha_ok": self.alpha_ok,
            "failures": self.failures(),
        }


def validate_assumptions(graph, edge_models, alpha, alpha0=0.0, tol=1e-10):
    """Report which model assumptions hold.  Never raises on failure."""
    checks = []
    rho_min = np.inf
    noise_max = 0.0
    for i in range(1, graph.node_count):
        nbrs = sorted(graph.neighbors[i])
        models = [edge_models[(i, j)] for j in nbrs]
        if models:
            gram = sum(e.G.T @ e.G for e in models)
            eta2 = float(np.linalg.eigvalsh(gram).min())
            rho2 = max(float(np.linalg.norm(e.H, 2) ** 2) for e in models)
            scale = max(1.0, float(np.abs(gram).max()))
        else:
            eta2, rho2, scale = 0.0, 0.0, 1.0
        k = len(nbrs)
        bound = eta2 / k if 0 < k <= 2 else eta2 / 3
        checks.append(NodeCheck(
            node=i, degree=k, gram_min_eig=eta2, rho2=rho2, rho2_bound=bound,
            gram_pd=eta2 > tol * scale,
            singular_ok=rho2 <= bound * (1 + 1e-12) + 1e-15,
        ))
        rho_min = min(rho_min, rho2)
        for e in models:
            noise_max = max(noise_max, float(np.abs(np.linalg.eigvalsh(e.C)).max()))
    # with a zero mean regressor the covariance recursion ignores alpha
    required = noise_max / rho_min if np.isfinite(rho_min) and rho_min > 0 else 0.0
    return ValidationReport(
        nodes=tuple(checks),
        connected=graph.is_connected(),
        strong_components=graph.components_strongly_connected(),
        min_degree_ok=all(graph.degree(i) >= 1 for i in range(1, graph.node_count)),
        alpha=float(alpha),
        alpha0=float(alpha0),
        alpha_required=float(required),
        alpha_ge_alpha0=alpha >= alpha0,
        alpha_ge_noise_bound=alpha >= required * (1 - 1e-12),
    )


# --------------------------------------------------------------------------
# sampling


def sample_measurement(edge, edge_model, truth, l, rng):
    """Draw one realization of ``d_ij`` for ``edge = (i, j)`` at iteration ``l``."""
    i, j = edge
    e = edge_model
    H = e.H
    if e.regressor.is_random:
        H = H + e.regressor.draw_perturbation(e.m, e.d, rng)
    noise = psd_sqrt_factor(e.C) @ rng.standard_normal(e.m)
    d = e.G @ truth.s[i] - H @ truth.s[j] + noise
    return Measurement(edge=(i, j), iteration=l, d=d, H=H)


def matvec(A, x):
    """Batched ``A @ x`` for stacks of small matrices (faster than matmul here)."""
    out = A[..., 0] * x[..., None, 0]
    for k in range(1, A.shape[-1]):
        out = out + A[..., k] * x[..., None, k]
    return out


def sample_round(scenario, rng, size=()):
    """All edge measurements for one iteration, stacked in canonical order.

    Returns ``(d, H)`` with shapes ``size + (E, m)`` and ``size + (E, m, d)``.
    Regressor perturbations are drawn first (in one block when every random
    edge is gaussian, else edge by edge), then all noise at once.
    """
    arr = scenario.arrays
    size = tuple(size)
    H = np.broadcast_to(arr.H, size + arr.H.shape).copy()
    if scenario.random_regressors and arr.regressor_std is not None:
        H += arr.regressor_std[:, None, None] * rng.standard_normal(H.shape)
    elif scenario.random_regressors:
        zero = np.zeros(size + (scenario.m, scenario.d))
        regs = [scenario.edges[key].regressor for key in arr.edges]
        H += np.stack([r.draw_perturbation(scenario.m, scenario.d, rng, size) if r.is_random
                       else zero for r in regs], axis=-3)
    z = rng.standard_normal(size + (arr.count, scenario.m))
    noise = matvec(arr.noise_factor, z)
    s = scenario.truth.s
    d = matvec(arr.G, s[arr.src]) - matvec(H, s[arr.dst])
    return d + noise, H


class MeasurementStream:
    """Per-trial measurement sequence, generated lazily and cached by iteration.

    Every algorithm in a trial reads the same stream, so paired comparisons
    consume identical realizations.  Static scenarios repeat round 1.
    """

    def __init__(self, scenario, rng):
        self.scenario = scenario
        self._rng = rng
        self._rounds = []

    def round(self, l):
        if l < 1:
            raise ValueError("iterations start at 1")
        if not self.scenario.adaptive:
            l = 1
        while len(self._rounds) < l:
            self._rounds.append(sample_round(self.scenario, self._rng))
        return self._rounds[l - 1]


class StackedStream:
    """Several trial streams viewed as one batch with a leading trial axis."""

    def __init__(self, streams):
        self.streams = list(streams)
        self.scenario = self.streams[0].scenario

    def round(self, l):
        parts = [s.round(l) for s in self.streams]
        return np.stack([p[0] for p in parts]), np.stack([p[1] for p in parts])


class BatchedStream:
    """``trials`` realizations per round drawn from one generator in a single block.

    Faster than stacking per-trial streams, but a trial's data then depends
    on the batch size; the harness uses per-trial streams instead.  Only the
    latest round is kept, so rounds must be read in order.
    """

    def __init__(self, scenario, rng, trials):
        self.scenario = scenario
        self._rng = rng
        self.trials = int(trials)
        self._last = (0, None)

    def round(self, l):
        if l < 1:
            raise ValueError("iterations start at 1")
        if not self.scenario.adaptive:
            l = 1
        k, data = self._last
        if l < k:
            raise ValueError(f"round {l} was already discarded (at {k})")
        while k < l:
            k, data = k + 1, sample_round(self.scenario, self._rng, (self.trials,))
        self._last = (k, data)
        return data


class FixedStream:
    """Stream over pre-computed observations ``d`` (shape ``(..., E, m)``)."""

    def __init__(self, scenario, d, H=None):
        self.scenario = scenario
        self._d = np.asarray(d, dtype=float)
        self._H = scenario.arrays.H if H is None else np.asarray(H, dtype=float)

    def round(self, l):
        return self._d, self._H
