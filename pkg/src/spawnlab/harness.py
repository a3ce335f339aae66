"""Seeded Monte-Carlo experiments with paired measurement streams.

Per-trial generators come from ``SeedSequence(seed).spawn(trials)``, so a
trial's data does not depend on how trials are chunked or dispatched.
Every algorithm in a trial reads the same measurements.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import diffusion, gspawn
from .analysis import (appendix_a_check, build_Q_infinity, crlb, mean_error_recursion,
                       msd_recursion, solve_P_infinity, spectral_radius)
from .exceptions import ConfigError, SpawnlabError
from .localization import (EdgeObservation, LinkSampler, ScattererScene, generate_scene,
                           localize_peer_to_peer, observe_scene, scene_scenario)
from .model import (EdgeModel, FixedStream, GroundTruth, MeasurementStream, NetworkGraph,
                    Regressor, Scenario, StackedStream, validate_assumptions)
from .scenarios import REGULAR_NOISE_VARIANCE, regular_graph_scenario

KINDS = ("regular-graph-estimation", "localization", "appendix-a", "analysis-only")
ALGORITHMS = ("gspawn", "atc", "peer-to-peer")
BROADCAST_RULE = {
    "gspawn": "mean + covariance: 2 per sensor per iteration",
    "atc": "one intermediate estimate per neighbor: degree per sensor per iteration",
    "peer-to-peer": "one position per sensor per iteration",
}
TRACE_HEADER_PREFIX = ["algorithm", "trial", "iteration", "node"]


# --------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    kind: str
    scenario: dict = field(default_factory=dict)
    algorithms: tuple = ("gspawn", "atc")
    trials: int = 1000
    seed: int = 0
    l_max: int = 200
    eps: float = 1e-5
    steady_tol: float = 0.01
    atc: dict = field(default_factory=lambda: {"eta": 1.95, "policy": "relative-degree"})
    trace_trials: int = 10
    chunk: int = 250
    workers: int = 1
    out_dir: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        self.algorithms = tuple(self.algorithms)
        unknown = set(self.algorithms) - set(ALGORITHMS)
        if unknown:
            raise ConfigError(f"unknown algorithms {sorted(unknown)}")
        if self.kind == "regular-graph-estimation" and "peer-to-peer" in self.algorithms:
            raise ConfigError("peer-to-peer needs direct position differences (localization only)")
        for name in ("trials", "l_max", "chunk", "workers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.trace_trials < 0:
            raise ConfigError("trace_trials must be non-negative")
        if not 0 < self.atc.get("eta", 1.95) < 2:
            raise ConfigError("atc.eta must lie in (0, 2)")

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        if "kind" not in data:
            raise ConfigError("config needs a 'kind'")
        return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in self.__dict__.items()}


# --------------------------------------------------------------------------
# explicit model documents


def _mat(x):
    return np.atleast_2d(np.asarray(x, dtype=float))


def regressor_from_dict(data):
    if not data:
        return Regressor()
    return Regressor(data.get("kind", "constant"), float(data.get("variance", 0.0)),
                     None if data.get("left") is None else _mat(data["left"]),
                     None if data.get("right") is None else _mat(data["right"]))


def scenario_from_dict(data):
    """Explicit model: neighbors, per-edge matrices, truth and prior scales."""
    try:
        graph = NetworkGraph(tuple(data["neighbors"]))
        edges = {}
        for item in data["edges"]:
            i, j = item["edge"]
            edges[(int(i), int(j))] = EdgeModel(_mat(item["G"]), _mat(item["H"]), _mat(item["C"]),
                                                regressor_from_dict(item.get("regressor")))
        s = np.asarray(data["truth"], dtype=float)
        s0_hat = data.get("s0_hat")
        truth = GroundTruth(s, None if s0_hat is None else np.asarray(s0_hat, dtype=float),
                            float(data.get("alpha0", 0.0)))
        alpha = data.get("alpha")
        if alpha is None:
            alpha = max(1.0, validate_assumptions(graph, edges, 1.0).alpha_required)
        return Scenario(graph, edges, truth, float(alpha), bool(data.get("adaptive", True)))
    except KeyError as exc:
        raise ConfigError(f"model document is missing {exc}") from exc


def scenario_to_dict(scenario):
    out = {"neighbors": [sorted(b) for b in scenario.graph.neighbors], "edges": []}
    for (i, j), e in sorted(scenario.edges.items()):
        reg = {"kind": e.regressor.kind, "variance": e.regressor.variance}
        if e.regressor.kind == "diagonal":
            reg["left"], reg["right"] = e.regressor.left.tolist(), e.regressor.right.tolist()
        out["edges"].append({"edge": [i, j], "G": e.G.tolist(), "H": e.H.tolist(),
                             "C": e.C.tolist(), "regressor": reg})
    out.update(truth=scenario.truth.s.tolist(), s0_hat=scenario.truth.s0_hat.tolist(),
               alpha0=scenario.truth.alpha0, alpha=scenario.alpha, adaptive=scenario.adaptive)
    return out


def build_scenario(config):
    """Scenario (and, for localization, the scene and its traced paths)."""
    p = dict(config.scenario)
    if config.kind == "localization":
        if "scene_file" in p:
            scene = ScattererScene.load(p["scene_file"])
            obs = observe_scene(scene, include_los=p.get("include_los", False),
                                min_gap=math.radians(p.get("min_gap_deg", 20.0)), warn=False)
            if not obs.graph.is_connected():
                raise ConfigError("scene file yields a disconnected measurement graph")
        else:
            scene, obs = generate_scene(
                seed=p.get("scene_seed", 0), n_sensors=p.get("n_sensors", 25),
                size=p.get("size", 100.0), comm_radius=p.get("comm_radius", 40.0),
                interior_walls=p.get("interior_walls", 4),
                include_los=p.get("include_los", False),
                min_gap=math.radians(p.get("min_gap_deg", 20.0)))
        sigma = float(p.get("sigma", 1.0))
        alpha = p.get("alpha", 0.25 * float(p.get("size", 100.0)) ** 2)
        return scene_scenario(scene, obs, sigma, alpha), (scene, obs)
    if "model" in p:
        return scenario_from_dict(p["model"]), None
    if config.kind in ("regular-graph-estimation", "analysis-only"):
        if "k" not in p:
            raise ConfigError("scenario needs 'k' (graph degree) or an explicit 'model'")
        sc = regular_graph_scenario(
            int(p["k"]), seed=p.get("graph_seed", 0), node_count=p.get("node_count", 8),
            g_scale=p.get("g_scale", 15.0), h_scale=p.get("h_scale", 10.0),
            regressor_variance=p.get("regressor_variance", 2.0),
            noise_variance=p.get("noise_variance", REGULAR_NOISE_VARIANCE),
            alpha=p.get("alpha", 10.0), truth_scale=p.get("truth_scale", 1.0),
            adaptive=p.get("adaptive", True))
        return sc, None
    raise ConfigError(f"kind {config.kind!r} takes no scenario")


# --------------------------------------------------------------------------
# trial execution


def trial_rngs(seed, trials):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(trials)]


@dataclass
class ChunkResult:
    trials: list
    sq: dict  # algorithm -> (L+1, n+1) summed squared error over the chunk's trials
    final_sq: dict  # algorithm -> (B, n+1) squared error at the last iteration
    converged_at: dict  # algorithm -> (B,)
    broadcasts: dict  # algorithm -> (L, n+1)
    traces: dict  # algorithm -> (mu (L+1, T, n+1, d), P (L+1, n+1, d, d) | None)
    errors: dict  # algorithm -> message


def _s0_hats(scenario, rngs):
    d = scenario.d
    if scenario.truth.alpha0 == 0:
        return np.broadcast_to(scenario.truth.s0_hat, (len(rngs), d)).copy()
    return np.array([scenario.truth.s[0] + math.sqrt(scenario.truth.alpha0)
                     * rng.standard_normal(d) for rng in rngs])


def run_chunk(config, scenario, extra, trial_ids):
    """Run every algorithm on a block of trials that share nothing but the model."""
    rngs = trial_rngs(config.seed, config.trials)
    rngs = [rngs[t] for t in trial_ids]
    s0 = _s0_hats(scenario, rngs)
    if config.kind == "localization":
        scene, obs = extra
        sampler = LinkSampler(obs, scenario.arrays.edges, config.scenario.get("sigma", 1.0),
                              config.scenario.get("reciprocal", True))
        d = np.array([sampler.sample(rng) for rng in rngs])
        stream = FixedStream(scenario, d)
    else:
        stream = StackedStream([MeasurementStream(scenario, rng) for rng in rngs])
    truth = scenario.truth.s
    n_trace = sum(1 for t in trial_ids if t < config.trace_trials)
    res = ChunkResult(list(trial_ids), {}, {}, {}, {}, {}, {})
    B = len(trial_ids)
    for algo in config.algorithms:
        try:
            if algo == "gspawn":
                state = gspawn.init_for_scenario(scenario, batch_shape=(B,), s0_hat=s0)
                tr = gspawn.run(state, scenario, stream, config.l_max, config.eps,
                                stop_early=False)
                est, P, conv, bc = tr.mu, tr.P, tr.converged_at, tr.messages
            elif algo == "atc":
                tr = diffusion.run(scenario, stream, config.l_max, config.eps,
                                   eta=config.atc.get("eta", 1.95),
                                   policy=config.atc.get("policy", "relative-degree"),
                                   s0_hat=s0, batch_shape=(B,), stop_early=False)
                est, P, conv, bc = tr.estimates, None, tr.converged_at, tr.broadcasts
            else:
                obs_d = {e: EdgeObservation(e, None, None, d[:, k], None)
                         for k, e in enumerate(scenario.arrays.edges)}
                pp = localize_peer_to_peer(extra[0], scenario.graph, obs_d)
                est = pp.positions
                pad = config.l_max + 1 - est.shape[0]
                if pad > 0:
                    est = np.concatenate([est, np.repeat(est[-1:], pad, axis=0)])
                est = est[:config.l_max + 1]
                P, conv = None, pp.converged_at
                bc = np.zeros((config.l_max, scenario.graph.node_count), dtype=int)
                bc[:pp.broadcasts.shape[0], 1:] = 1
        except SpawnlabError as exc:
            res.errors[algo] = str(exc)
            continue
        sq = ((est - truth) ** 2).sum(-1)
        res.sq[algo] = sq.sum(axis=1)
        res.final_sq[algo] = sq[-1]
        res.converged_at[algo] = np.asarray(conv)
        res.broadcasts[algo] = bc
        res.traces[algo] = (est[:, :n_trace], P)
    return res


def _chunks(config):
    ids = list(range(config.trials))
    return [ids[a:a + config.chunk] for a in range(0, config.trials, config.chunk)]


# --------------------------------------------------------------------------
# summaries


def steady_iteration(curve, tol, relative=True, window=None):
    """First iteration after which ``curve`` stays within ``tol`` of its last value.

    None when the curve is still moving inside the final ``window`` iterations
    (default a tenth of the run, at least 10), i.e. no steady state was seen.
    """
    curve = np.asarray(curve, dtype=float)
    final = curve[-1]
    band = tol * abs(final) if relative else tol
    bad = np.flatnonzero(~(np.abs(curve - final) <= band))
    it = 0 if bad.size == 0 else int(bad[-1]) + 1
    window = max(10, (len(curve) - 1) // 10) if window is None else window
    return it if it <= len(curve) - 1 - window else None


def first_stay_below(values, eps):
    """First index after which ``values`` stay below ``eps``; None if never."""
    values = np.asarray(values)
    bad = np.flatnonzero(~(values < eps))
    if bad.size and bad[-1] == values.size - 1:
        return None
    return 0 if bad.size == 0 else int(bad[-1]) + 1


def mean_path_iterations(scenario, algorithm, l_max, eps, atc=None):
    """Iterations until the expected per-sensor error stays below ``eps``.

    Uses the deterministic mean recursions (mean regressors, zero initial
    estimates); average over sensors of the expected error norm.
    """
    d, n = scenario.d, scenario.graph.n
    if algorithm == "gspawn":
        Ps, _ = gspawn.covariance_trace(scenario, l_max)
        u = mean_error_recursion(scenario, Ps).u.reshape(l_max + 1, n, d)
        return first_stay_below(np.linalg.norm(u, axis=-1).mean(-1), eps)
    if algorithm == "atc":
        setup = diffusion.AtcSetup(scenario)
        cfg = diffusion.make_config(scenario, (atc or {}).get("eta", 1.95),
                                    (atc or {}).get("policy", "relative-degree"), setup)
        B = diffusion.recursion_matrix(setup, cfg)
        e = np.tile(-scenario.truth.s[1:].ravel(), n)
        idx = np.arange(n)
        per = []
        for _ in range(l_max + 1):
            own = e.reshape(n, n, d)[idx, idx]
            per.append(np.linalg.norm(own, axis=-1).mean())
            e = B @ e
        return first_stay_below(per, eps)
    return None


def report_messages(broadcasts, iterations_to_converge=None, degrees=None):
    """Broadcast accounting per algorithm.

    ``broadcasts`` maps algorithm -> ``(L, n+1)`` per-node counters.  gSPAWN
    counters hold messages, so the mean and covariance count separately.
    """
    out = {}
    for algo, bc in broadcasts.items():
        bc = np.asarray(bc)
        active = bc[:, 1:]
        per_iter = float(active.mean()) if active.size else 0.0
        if algo == "peer-to-peer":
            # counted only while the wavefront is moving
            rows = active[active.sum(axis=1) > 0]
            per_iter = float(rows.mean()) if rows.size else 0.0
        entry = {"per_sensor_per_iteration": per_iter, "rule": BROADCAST_RULE[algo]}
        if degrees is not None and algo == "atc":
            entry["per_sensor_per_iteration_by_node"] = [float(x) for x in active.mean(axis=0)]
        if iterations_to_converge and iterations_to_converge.get(algo) is not None:
            entry["total_per_sensor"] = per_iter * iterations_to_converge[algo]
        out[algo] = entry
    return out


def paired_bootstrap(final_a, final_b, rng, resamples=2000, level=0.95):
    """CI for avg-RMSE(a) - avg-RMSE(b) from per-trial squared errors ``(T, n+1)``."""
    T = final_a.shape[0]

    def avg_rmse(sq):
        return np.sqrt(sq[..., 1:].mean(axis=-2)).mean(axis=-1)

    idx = rng.integers(T, size=(resamples, T))
    diffs = avg_rmse(final_a[idx]) - avg_rmse(final_b[idx])
    lo, hi = np.quantile(diffs, [(1 - level) / 2, (1 + level) / 2])
    return {"difference": float(avg_rmse(final_a) - avg_rmse(final_b)),
            "ci_low": float(lo), "ci_high": float(hi), "level": level}


def _crlb_snapshots(config, scenario, count=50):
    """Realized regressors from trial 0's stream (static scenarios: mean regressors)."""
    if not scenario.adaptive or not scenario.random_regressors:
        return None
    stream = MeasurementStream(scenario, trial_rngs(config.seed, 1)[0])
    return [stream.round(l)[1] for l in range(1, min(count, config.l_max) + 1)]


def _finite(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


@dataclass
class ResultSummary:
    data: dict
    curves: dict  # algorithm -> avg RMSE per iteration
    trace_rows: list

    def to_json(self):
        return json.dumps(self.data, indent=2, sort_keys=True)


def run_experiment(config, write=True):
    """Run the configured experiment; writes ``summary.json``, ``trace.csv``, ``curve.csv``."""
    if config.kind == "appendix-a":
        report = appendix_a_check()
        summary = ResultSummary({"kind": config.kind, "appendix_a": report.as_dict()}, {}, [])
        if write and config.out_dir:
            _write(config, summary)
        return summary

    scenario, extra = build_scenario(config)
    if config.kind == "analysis-only":
        summary = ResultSummary({"kind": config.kind, **analysis_report(scenario, config.l_max)},
                                {}, [])
        if write and config.out_dir:
            _write(config, summary)
        return summary

    chunks = _chunks(config)
    if config.workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            parts = list(pool.map(run_chunk, [config] * len(chunks), [scenario] * len(chunks),
                                  [extra] * len(chunks), chunks))
    else:
        parts = [run_chunk(config, scenario, extra, ids) for ids in chunks]

    n1 = scenario.graph.node_count
    algos = [a for a in config.algorithms if all(a in p.sq for p in parts)]
    failed = {a: sum(len(p.trials) for p in parts if a in p.errors) for a in config.algorithms}
    errors = {a: next((p.errors[a] for p in parts if a in p.errors), None)
              for a in config.algorithms}
    curves, finals, conv = {}, {}, {}
    for a in algos:
        sq = sum(p.sq[a] for p in parts) / config.trials
        curves[a] = np.sqrt(sq[:, 1:]).mean(axis=1)
        finals[a] = np.concatenate([p.final_sq[a] for p in parts])
        conv[a] = np.concatenate([p.converged_at[a] for p in parts])

    iters = {}
    for a in algos:
        if scenario.adaptive:
            iters[a] = mean_path_iterations(scenario, a, config.l_max, config.eps, config.atc)
        else:
            iters[a] = steady_iteration(curves[a], config.steady_tol)
    crit = ("expected error below eps (mean recursion)" if scenario.adaptive
            else "average RMSE within steady_tol of its final value")

    radii = {}
    if "gspawn" in algos:
        fp = solve_P_infinity(scenario, tol=1e-10)
        radii["gspawn"] = spectral_radius(build_Q_infinity(scenario, fp.P))
    if "atc" in algos:
        setup = diffusion.AtcSetup(scenario)
        cfg = diffusion.make_config(scenario, config.atc.get("eta", 1.95),
                                    config.atc.get("policy", "relative-degree"), setup)
        radii["atc"] = spectral_radius(diffusion.recursion_matrix(setup, cfg))

    try:
        links = extra[1].links() if (extra and config.scenario.get("reciprocal", True)) else None
        bound = crlb(scenario, _crlb_snapshots(config, scenario), edges=links)
        crlb_info = {"trace": bound.trace, "avg_rmse_bound": bound.avg_rmse_bound}
    except SpawnlabError as exc:
        crlb_info = {"error": str(exc)}

    messages = report_messages({a: parts[0].broadcasts[a] for a in algos},
                               iters, degrees=True)
    per_algo = {}
    for a in config.algorithms:
        if a not in algos:
            per_algo[a] = {"failed_trials": failed[a], "error": errors[a]}
            continue
        msd = finals[a][:, 1:].sum(axis=1)
        c = conv[a]
        per_algo[a] = {
            "avg_rmse_final": float(curves[a][-1]),
            "msd_final": float(msd.mean()),
            "msd_final_stderr": float(msd.std(ddof=1) / math.sqrt(len(msd))) if len(msd) > 1 else None,
            "iterations_to_converge": iters[a],
            "convergence_criterion": crit,
            "per_trial_change_below_eps": {
                "fraction": float((c >= 0).mean()),
                "median": float(np.median(c[c >= 0])) if (c >= 0).any() else None,
                "max": int(c.max()) if (c >= 0).all() else None,
            },
            "messages": messages[a],
            "spectral_radius": radii.get(a),
            "failed_trials": failed[a],
        }
    data = {
        "kind": config.kind,
        "seed": config.seed,
        "trials": config.trials,
        "l_max": config.l_max,
        "nodes": n1,
        "dimension": scenario.d,
        "mean_degree": float(np.mean([scenario.graph.degree(i) for i in range(1, n1)])),
        "algorithms": per_algo,
        "crlb": crlb_info,
    }
    if "gspawn" in algos and "peer-to-peer" in algos:
        data["gspawn_minus_peer_to_peer"] = paired_bootstrap(
            finals["gspawn"], finals["peer-to-peer"], np.random.default_rng(config.seed))
    rows = _trace_rows(config, scenario, parts, algos)
    summary = ResultSummary(data, curves, rows)
    if write and config.out_dir:
        _write(config, summary)
    return summary


def analysis_report(scenario, l_max=200):
    """Fixed point, steady-state radius, assumption verdicts, MSD series and CRLB."""
    report = validate_assumptions(scenario.graph, scenario.edges, scenario.alpha,
                                  scenario.truth.alpha0)
    fp = solve_P_infinity(scenario)
    Q = build_Q_infinity(scenario, fp.P)
    r = spectral_radius(Q)
    out = {
        "assumptions": report.as_dict(),
        "P_infinity": [p.tolist() for p in fp.P[1:]],
        "fixed_point": {"iterations": fp.iterations, "converged": fp.converged,
                        "monotone": fp.monotone, "max_residual": float(fp.residuals.max())},
        "spectral_radius": r,
        "assumption3_holds": bool(r < 1.0),
    }
    Ps, _ = gspawn.covariance_trace(scenario, l_max)
    try:
        msd = msd_recursion(scenario, Ps)
        out["msd"] = {"exact": msd.exact, "series": [float(x) for x in msd.msd]}
    except SpawnlabError as exc:
        out["msd"] = {"error": str(exc)}
    try:
        b = crlb(scenario)
        out["crlb"] = {"trace": b.trace, "avg_rmse_bound": b.avg_rmse_bound}
    except SpawnlabError as exc:
        out["crlb"] = {"error": str(exc)}
    return out


def _trace_rows(config, scenario, parts, algos):
    d = scenario.d
    truth = scenario.truth.s
    rows = []
    for a in algos:
        for p in parts:
            est, P = p.traces[a]
            bc = p.broadcasts[a]
            for t in range(est.shape[1]):
                trial = p.trials[t]
                for l in range(est.shape[0]):
                    err = np.linalg.norm(est[l, t] - truth, axis=-1)
                    for i in range(est.shape[2]):
                        row = [a, trial, l, i] + [float(x) for x in est[l, t, i]]
                        if P is not None:
                            row += [float(x) for x in P[l, i].ravel()]
                        else:
                            row += [""] * (d * d)
                        row += [float(err[i]), int(bc[l - 1, i]) if l > 0 else 0]
                        rows.append(row)
    return rows


def trace_header(d):
    return (TRACE_HEADER_PREFIX + [f"mu_{k}" for k in range(d)]
            + [f"P_{a}{b}" for a in range(d) for b in range(d)] + ["error", "messages"])


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return buf.getvalue()


def _write(config, summary):
    os.makedirs(config.out_dir, exist_ok=True)
    data = json.loads(json.dumps(summary.data, default=float), parse_constant=lambda c: None)
    with open(os.path.join(config.out_dir, "summary.json"), "w") as fh:
        json.dump(_clean(data), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if summary.trace_rows:
        d = summary.data["dimension"]
        with open(os.path.join(config.out_dir, "trace.csv"), "w") as fh:
            fh.write(_csv_text(trace_header(d), summary.trace_rows))
    if summary.curves:
        algos = list(summary.curves)
        L = len(next(iter(summary.curves.values())))
        rows = [[l] + [float(summary.curves[a][l]) for a in algos] for l in range(L)]
        with open(os.path.join(config.out_dir, "curve.csv"), "w") as fh:
            fh.write(_csv_text(["iteration"] + [f"avg_rmse_{a}" for a in algos], rows))


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_clean(v) for v in x]
    if isinstance(x, float):
        return _finite(x)
    return x


def rmse_from_trace(path, algorithm, iteration=None):
    """Average RMSE over sensors recomputed from the ``error`` column of ``trace.csv``.

    Uses the last iteration unless ``iteration`` is given.  Only equals the
    summary value when every trial was traced.
    """
    with open(path) as fh:
        rows = [r for r in csv.DictReader(fh) if r["algorithm"] == algorithm]
    if not rows:
        raise ConfigError(f"no trace rows for {algorithm!r}")
    if iteration is None:
        iteration = max(int(r["iteration"]) for r in rows)
    sq = {}
    for r in rows:
        node = int(r["node"])
        if int(r["iteration"]) == iteration and node > 0:
            sq.setdefault(node, []).append(float(r["error"]) ** 2)
    return float(np.mean([math.sqrt(np.mean(v)) for v in sq.values()]))
