"""Cooperative NLOS localization from single-bounce multipath.

Each sensor pair observes paths with at most one specular reflection.  A
path with arrival angle ``theta`` and departure angle ``phi`` has length
``g(theta, phi)^T (s_i - s_j)``; stacking the rows gives ``T_ij`` and the
pseudo-inverse turns the path lengths into a direct measurement of
``s_i - s_j``.

Angle conventions (radians, against the +x axis):

* bounce path: ``theta`` is the bearing from ``s_i`` to the bounce point and
  ``phi`` the bearing from ``s_j`` to the bounce point;
* line of sight: ``theta`` is the bearing of ``s_i - s_j`` and
  ``phi = theta + pi``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import GeometryError, ModelError
from .gspawn import init_for_scenario, run as run_gspawn
from .model import (EdgeModel, FixedStream, GroundTruth, NetworkGraph, Scenario,
                    validate_assumptions)

GEOM_TOL = 1e-9
MIN_GAP = np.radians(20.0)  # smallest usable arrival/departure separation
ORIENTATIONS = ("horizontal", "vertical", "general")


# --------------------------------------------------------------------------
# scene


@dataclass(frozen=True)
class Segment:
    p: tuple
    q: tuple

    @property
    def orientation(self):
        (x0, y0), (x1, y1) = self.p, self.q
        if abs(y0 - y1) <= GEOM_TOL:
            return "horizontal"
        if abs(x0 - x1) <= GEOM_TOL:
            return "vertical"
        return "general"

    def as_array(self):
        return np.array(self.p, dtype=float), np.array(self.q, dtype=float)


@dataclass
class ScattererScene:
    sensors: np.ndarray  # (N, 2), row 0 is the reference
    segments: list
    bounds: tuple = (0.0, 0.0, 100.0, 100.0)
    comm_radius: float = np.inf
    reference: int = 0

    def __post_init__(self):
        self.sensors = np.asarray(self.sensors, dtype=float)
        self.segments = [s if isinstance(s, Segment) else Segment(tuple(s[0]), tuple(s[1]))
                         for s in self.segments]
        if self.reference != 0:
            raise ModelError("the reference sensor must be stored first")

    @property
    def compliant(self):
        """True when every scatterer is horizontal or vertical."""
        return all(s.orientation != "general" for s in self.segments)

    def to_dict(self):
        return {
            "sensors": self.sensors.tolist(),
            "segments": [[list(s.p), list(s.q)] for s in self.segments],
            "bounds": list(self.bounds),
            "comm_radius": None if np.isinf(self.comm_radius) else self.comm_radius,
            "reference": self.reference,
        }

    @classmethod
    def from_dict(cls, data):
        radius = data.get("comm_radius")
        return cls(np.array(data["sensors"], dtype=float),
                   [Segment(tuple(a), tuple(b)) for a, b in data["segments"]],
                   tuple(data.get("bounds", (0.0, 0.0, 100.0, 100.0))),
                   np.inf if radius is None else float(radius),
                   int(data.get("reference", 0)))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def boundary_walls(bounds):
    x0, y0, x1, y1 = bounds
    return [Segment((x0, y0), (x1, y0)), Segment((x1, y0), (x1, y1)),
            Segment((x1, y1), (x0, y1)), Segment((x0, y1), (x0, y0))]


# --------------------------------------------------------------------------
# geometry


def g_vector(theta, phi):
    """Row of ``T_ij`` for a path with arrival ``theta`` and departure ``phi``."""
    gap = np.mod(theta - phi, 2 * np.pi)
    if abs(gap - np.pi) <= GEOM_TOL:
        return np.array([np.cos(theta), np.sin(theta)])
    sd = np.sin(theta - phi)
    if abs(sd) <= GEOM_TOL:
        raise GeometryError(f"degenerate path: theta={theta:.6g}, phi={phi:.6g}")
    return np.array([(np.sin(theta) + np.sin(phi)) / sd,
                     -(np.cos(theta) + np.cos(phi)) / sd])


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _blocked(a, b, segments, skip=None):
    """Whether segment ``ab`` crosses any scatterer away from its own endpoints.

    Parallel (collinear grazing) contacts count as clear.
    """
    if not segments:
        return False
    P = np.array([seg.p for seg in segments], dtype=float)
    Q = np.array([seg.q for seg in segments], dtype=float)
    r, sv = b - a, Q - P
    denom = _cross(r, sv)
    ok = np.abs(denom) > GEOM_TOL
    safe = np.where(ok, denom, 1.0)
    t = _cross(P - a, sv) / safe
    u = _cross(P - a, r) / safe
    hit = ok & (t > GEOM_TOL) & (t < 1 - GEOM_TOL) & (u >= -GEOM_TOL) & (u <= 1 + GEOM_TOL)
    if skip is not None:
        hit[skip] = False
    return bool(hit.any())


def _reflect(point, p, q):
    u = (q - p) / np.linalg.norm(q - p)
    v = point - p
    return p + 2 * (v @ u) * u - v


def _bearing(v):
    return float(np.arctan2(v[1], v[0]))


@dataclass(frozen=True)
class PathObservation:
    edge: tuple
    theta: float
    phi: float
    kind: str  # "los" or "bounce"
    length: float
    scatterer: int | None = None
    orientation: str | None = None

    @property
    def g(self):
        return g_vector(self.theta, self.phi)


def trace_paths(scene, i, j, max_paths=None, include_los=True, min_gap=0.0):
    """Line-of-sight and single-bounce paths between sensors ``i`` and ``j``.

    Bounce paths whose arrival and departure bearings are closer than
    ``min_gap`` radians (near-normal reflections, where ``g`` blows up) are
    treated as unresolvable.  Paths come back shortest first (ties broken by
    scatterer index, LOS first); ``max_paths`` keeps that many.
    """
    if i == j:
        raise GeometryError("a path needs two distinct sensors")
    si, sj = scene.sensors[i], scene.sensors[j]
    paths = []
    if include_los and not _blocked(si, sj, scene.segments):
        paths.append(PathObservation((i, j), _bearing(si - sj), _bearing(si - sj) + np.pi,
                                     "los", float(np.linalg.norm(si - sj))))
    for k, seg in enumerate(scene.segments):
        p, q = seg.as_array()
        normal = np.array([-(q - p)[1], (q - p)[0]])
        side_i, side_j = normal @ (si - p), normal @ (sj - p)
        if side_i * side_j <= 0 or abs(side_i) <= GEOM_TOL or abs(side_j) <= GEOM_TOL:
            continue
        image = _reflect(sj, p, q)
        r, s = image - si, q - p
        denom = _cross(r, s)
        if abs(denom) <= GEOM_TOL:
            continue
        t = _cross(p - si, s) / denom
        u = _cross(p - si, r) / denom
        if not (0 < t < 1 and GEOM_TOL < u < 1 - GEOM_TOL):
            continue
        b = si + t * r
        theta, phi = _bearing(b - si), _bearing(b - sj)
        if abs(np.angle(np.exp(1j * (theta - phi)))) < min_gap:
            continue
        if _blocked(si, b, scene.segments, skip=k) or _blocked(sj, b, scene.segments, skip=k):
            continue
        paths.append(PathObservation((i, j), theta, phi, "bounce",
                                     float(np.linalg.norm(image - si)), k, seg.orientation))
    paths.sort(key=lambda o: (round(o.length, 9), -1 if o.scatterer is None else o.scatterer))
    return paths[:max_paths] if max_paths is not None else paths


# --------------------------------------------------------------------------
# observations


@dataclass
class EdgeObservation:
    edge: tuple
    T: np.ndarray  # (k, 2)
    lengths: np.ndarray  # (..., k) noisy path lengths
    d: np.ndarray  # (..., 2) effective measurement of s_i - s_j
    C: np.ndarray  # (2, 2)
    paths: list = field(default_factory=list)


def build_edge_observation(paths, sigma, rng=None, size=(), sigma_model=None):
    """Turn path lengths into a direct measurement of ``s_i - s_j``.

    Path lengths receive i.i.d. ``N(0, sigma^2)`` noise (``size`` draws).  The
    noise covariance uses ``sigma_model`` (default ``sigma``, or 1 when
    ``sigma`` is zero so the covariance stays invertible; the estimate does
    not depend on this scale).
    """
    if len(paths) < 2:
        raise GeometryError(f"edge {paths[0].edge if paths else '?'} has fewer than 2 paths")
    T = np.array([p.g for p in paths])
    sv = np.linalg.svd(T, compute_uv=False)
    if sv[-1] <= 1e-9 * sv[0]:
        kinds = ", ".join(f"{p.kind}:{p.orientation or 'los'}@{p.length:.3f}" for p in paths)
        raise GeometryError(f"paths on edge {paths[0].edge} are parallel ({kinds})")
    true = np.array([p.length for p in paths])
    rng = np.random.default_rng(rng)
    noise = sigma * rng.standard_normal(tuple(size) + true.shape) if sigma > 0 else 0.0
    lengths = true + noise
    Tp = np.linalg.pinv(T)
    d = np.einsum("ak,...k->...a", Tp, np.broadcast_to(lengths, tuple(size) + true.shape))
    scale = sigma_model if sigma_model is not None else (sigma if sigma > 0 else 1.0)
    C = scale ** 2 * np.linalg.inv(T.T @ T)
    return EdgeObservation(paths[0].edge, T, np.asarray(lengths), d, 0.5 * (C + C.T), list(paths))


@dataclass
class SceneObservations:
    graph: NetworkGraph
    paths: dict  # (i, j) -> list[PathObservation]
    dropped: list  # (i, j, reason)

    def edge_observations(self, sigma, rng=None, size=(), sigma_model=None, reciprocal=True):
        """Noisy observations for every directed edge.

        With ``reciprocal`` both ends of a link share one set of noisy path
        lengths, so ``d_ji = -d_ij``; otherwise each direction is drawn
        independently.
        """
        rng = np.random.default_rng(rng)
        out = {}
        for i, j in self.graph.directed_edges:
            if (i, j) in out:
                continue
            ob = build_edge_observation(self.paths[(i, j)], sigma, rng, size, sigma_model)
            out[(i, j)] = ob
            if not reciprocal:
                continue
            back = self.paths[(j, i)]
            if j != 0 and back:
                out[(j, i)] = EdgeObservation((j, i), np.array([p.g for p in back]), ob.lengths,
                                              -ob.d, ob.C, list(back))
        for e in self.graph.directed_edges:
            if e not in out:
                out[e] = build_edge_observation(self.paths[e], sigma, rng, size, sigma_model)
        return out

    def links(self):
        """One measuring direction per physical link: ``(i, 0)`` or ``(i, j)`` with ``i < j``."""
        return [(i, j) for i, j in self.graph.directed_edges if j == 0 or i < j]


def observe_scene(scene, max_paths=None, include_los=True, min_gap=0.0, warn=True):
    """Trace every sensor pair within range and keep edges with a rank-2 path set."""
    N = scene.sensors.shape[0]
    kept, paths, dropped = [], {}, []
    for i in range(N):
        for j in range(i + 1, N):
            if np.linalg.norm(scene.sensors[i] - scene.sensors[j]) > scene.comm_radius:
                continue
            pij = trace_paths(scene, i, j, max_paths, include_los, min_gap)
            reason = None
            if len(pij) < 2:
                reason = f"only {len(pij)} resolvable path(s)"
            else:
                T = np.array([p.g for p in pij])
                sv = np.linalg.svd(T, compute_uv=False)
                if sv[-1] <= 1e-9 * sv[0]:
                    reason = "all paths parallel"
            if reason:
                dropped.append((i, j, reason))
                continue
            kept.append((i, j))
            paths[(i, j)] = pij
            paths[(j, i)] = trace_paths(scene, j, i, max_paths, include_los, min_gap)
    if warn and dropped:
        warnings.warn(f"dropped {len(dropped)} sensor pair(s) with too few usable paths",
                      stacklevel=2)
    graph = NetworkGraph.from_edges(N, kept)
    return SceneObservations(graph, paths, dropped)


def localization_scenario(scene, graph, observations, alpha=None):
    """Scenario with ``G = Hbar = I`` and static observations."""
    I = np.eye(2)
    edges = {e: EdgeModel(I, I, observations[e].C) for e in graph.directed_edges}
    if alpha is None:
        alpha = max(validate_assumptions(graph, edges, 1.0).alpha_required, 1e-6)
    truth = GroundTruth(scene.sensors.copy())
    return Scenario(graph, edges, truth, alpha=alpha, adaptive=False)


def edge_covariance(paths, sigma):
    """``sigma^2 (T^T T)^-1`` (unit scale when ``sigma`` is zero)."""
    T = np.array([p.g for p in paths])
    scale = sigma if sigma > 0 else 1.0
    C = scale ** 2 * np.linalg.inv(T.T @ T)
    return 0.5 * (C + C.T)


def scene_scenario(scene, obs, sigma, alpha=None):
    """Localization scenario straight from traced paths (no noise drawn)."""
    cov = {}
    for e in obs.graph.directed_edges:
        cov[e] = cov.get((e[1], e[0])) if e[1] != 0 and (e[1], e[0]) in cov \
            else edge_covariance(obs.paths[e], sigma)
    proxies = {e: EdgeObservation(e, None, None, None, C) for e, C in cov.items()}
    return localization_scenario(scene, obs.graph, proxies, alpha)


class LinkSampler:
    """Per-trial noisy measurements for a fixed scene in a scenario's edge order.

    Each trial draws one standard normal per path of every physical link
    (``reciprocal``) or of every directed edge.
    """

    def __init__(self, obs, edges, sigma, reciprocal=True):
        self.sigma = float(sigma)
        self.edges = tuple(edges)
        sources = obs.links() if reciprocal else list(self.edges)
        index = {e: k for k, e in enumerate(sources)}
        self.pinv, self.lengths, self.offsets = [], [], [0]
        for e in sources:
            T = np.array([p.g for p in obs.paths[e]])
            self.pinv.append(np.linalg.pinv(T))
            self.lengths.append(np.array([p.length for p in obs.paths[e]]))
            self.offsets.append(self.offsets[-1] + T.shape[0])
        self.route = []
        for i, j in self.edges:
            if (i, j) in index:
                self.route.append((index[(i, j)], 1.0))
            else:
                self.route.append((index[(j, i)], -1.0))
        self.total_paths = self.offsets[-1]

    def sample(self, rng):
        z = rng.standard_normal(self.total_paths) if self.sigma > 0 else np.zeros(self.total_paths)
        base = [Tp @ (L + self.sigma * z[a:b]) for Tp, L, a, b in
                zip(self.pinv, self.lengths, self.offsets[:-1], self.offsets[1:])]
        return np.array([sign * base[k] for k, sign in self.route])


def stacked_measurements(scenario, observations):
    """Effective measurements in canonical edge order, shape ``(..., E, 2)``."""
    return np.stack([observations[e].d for e in scenario.arrays.edges], axis=-2)


# --------------------------------------------------------------------------
# estimators


@dataclass
class LocalizationResult:
    positions: np.ndarray  # (L+1, ..., N, 2)
    covariances: np.ndarray | None
    converged_at: np.ndarray
    localized: np.ndarray  # (N,) bool
    broadcasts: np.ndarray  # (L, N)

    def errors(self, truth):
        return np.linalg.norm(self.positions - truth, axis=-1)

    def messages_per_sensor_per_iteration(self):
        return self.broadcasts[:, 1:].mean()


def localize_gspawn(scene, scenario, d, l_max=500, eps=1e-5, stop_early=True):
    """gSPAWN with static observations ``d`` (``(..., E, 2)``, batched over trials)."""
    d = np.asarray(d, dtype=float)
    batch = d.shape[:-2]
    state = init_for_scenario(scenario, batch_shape=batch)
    state.mu[..., 0, :] = scene.sensors[0]
    trace = run_gspawn(state, scenario, FixedStream(scenario, d), l_max, eps, stop_early)
    N = scene.sensors.shape[0]
    return LocalizationResult(trace.mu, trace.P, trace.converged_at, np.ones(N, dtype=bool),
                              trace.messages)


def localize_peer_to_peer(scene, graph, observations):
    """Wavefront localization outward from the reference.

    In iteration ``l`` every unlocalized sensor with a localized neighbor
    sets its position to the average of ``anchor + d_ij`` over those
    neighbors; positions are then frozen.  Unreachable sensors stay
    unlocalized (NaN).
    """
    N = scene.sensors.shape[0]
    batch = next(iter(observations.values())).d.shape[:-1] if observations else ()
    pos = np.full(batch + (N, 2), np.nan)
    pos[..., 0, :] = scene.sensors[0]
    done = np.zeros(N, dtype=bool)
    done[0] = True
    history = [pos.copy()]
    while True:
        frontier = [i for i in range(1, N) if not done[i]
                    and any(done[j] for j in graph.neighbors[i] if j != i)]
        if not frontier:
            break
        new = pos.copy()
        for i in frontier:
            anchors = [j for j in sorted(graph.neighbors[i]) if j != i and done[j]]
            new[..., i, :] = np.mean([pos[..., j, :] + observations[(i, j)].d for j in anchors],
                                     axis=0)
        done[frontier] = True
        pos = new
        history.append(pos.copy())
    L = len(history) - 1
    broadcasts = np.zeros((L, N), dtype=int)
    broadcasts[:, 1:] = 1
    return LocalizationResult(np.stack(history), None, np.full(batch, L, dtype=int), done,
                              broadcasts)


# --------------------------------------------------------------------------
# scene generation


def _repair_segment(si, sj, orientation, offset, length, bounds, margin):
    """Short wall just beyond the pair whose specular point lies at its center."""
    axis = 1 if orientation == "horizontal" else 0
    lo, hi = bounds[axis] + margin / 2, bounds[axis + 2] - margin / 2
    near = min(si[axis], sj[axis]) - offset
    if near < lo:
        near = max(si[axis], sj[axis]) + offset
        if near > hi:
            return None
    hi_, hj_ = abs(si[axis] - near), abs(sj[axis] - near)
    other = 1 - axis
    c = si[other] + (sj[other] - si[other]) * hi_ / (hi_ + hj_)
    a, b = [0.0, 0.0], [0.0, 0.0]
    a[axis] = b[axis] = near
    a[other], b[other] = c - length / 2, c + length / 2
    return Segment(tuple(a), tuple(b))


def generate_scene(seed=0, n_sensors=25, size=100.0, comm_radius=40.0, interior_walls=4,
                   wall_length=(10.0, 30.0), margin=5.0, include_los=False, min_gap=MIN_GAP,
                   repair=True, repair_offset=(2.0, 6.0), repair_length=0.3,
                   central_reference=True, max_tries=200):
    """Random sensor layout in a walled square with axis-aligned scatterers.

    With ``repair`` every in-range pair that lacks a resolvable horizontal or
    vertical bounce gets a short reflector placed just beyond it.  Pairs that
    still lack a rank-2 path set are dropped, and layouts are redrawn until
    the remaining graph is connected.  Sensor 0 is the reference; with
    ``central_reference`` it is the sensor nearest the middle of the area.
    Returns ``(scene, observations)``.
    """
    rng = np.random.default_rng(seed)
    bounds = (0.0, 0.0, size, size)
    for _ in range(max_tries):
        sensors = rng.uniform(margin, size - margin, (n_sensors, 2))
        if central_reference:
            k = int(np.argmin(np.linalg.norm(sensors - size / 2, axis=1)))
            sensors[[0, k]] = sensors[[k, 0]]
        segs = boundary_walls(bounds)
        for _ in range(interior_walls):
            length = rng.uniform(*wall_length)
            x, y = rng.uniform(margin, size - margin, 2)
            if rng.random() < 0.5:
                segs.append(Segment((x, y), (min(x + length, size - margin), y)))
            else:
                segs.append(Segment((x, y), (x, min(y + length, size - margin))))
        scene = ScattererScene(sensors, segs, bounds, comm_radius)
        if repair:
            for i in range(n_sensors):
                for j in range(i + 1, n_sensors):
                    if np.linalg.norm(sensors[i] - sensors[j]) > comm_radius:
                        continue
                    have = {p.orientation for p in trace_paths(scene, i, j, None, False, min_gap)}
                    for orient in ("horizontal", "vertical"):
                        if orient in have:
                            continue
                        seg = _repair_segment(sensors[i], sensors[j], orient,
                                              rng.uniform(*repair_offset), repair_length,
                                              bounds, margin)
                        if seg is not None:
                            scene.segments.append(seg)
        obs = observe_scene(scene, include_los=include_los, min_gap=min_gap, warn=False)
        if obs.graph.is_connected():
            return scene, obs
    raise ModelError(f"no connected layout after {max_tries} tries")
