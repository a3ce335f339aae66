"""Command-line entry point.

Exit codes: 0 success, 1 a check reported failure, 2 bad configuration,
3 any other model or algorithm error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .exceptions import ConfigError, SpawnlabError
from .harness import ExperimentConfig, analysis_report, build_scenario, run_experiment
from .model import validate_assumptions

DEFAULT_KIND = {"simulate": "regular-graph-estimation", "localize": "localization",
                "analyze": "analysis-only", "appendix-a": "appendix-a",
                "validate": "analysis-only"}


def _parser():
    p = argparse.ArgumentParser(prog="spawnlab", description="Cooperative estimation experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("simulate", "Monte-Carlo run on a regular-graph or explicit model"),
                        ("localize", "Monte-Carlo cooperative localization run"),
                        ("analyze", "fixed point, spectral radius, MSD series and CRLB"),
                        ("appendix-a", "rebuild the divergence counterexample"),
                        ("validate", "check model assumptions")]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON experiment config")
        s.add_argument("--seed", type=int)
        s.add_argument("--trials", type=int)
        s.add_argument("--out-dir")
        s.add_argument("--algorithms", help="comma separated: gspawn,atc,peer-to-peer")
        s.add_argument("--l-max", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("--k", type=int, help="degree of the regular graph (simulate/analyze)")
        s.add_argument("--scene", help="scene JSON file (localize)")
        s.add_argument("--sigma", type=float, help="path-length noise std (localize)")
    return p


def _config(args):
    data = {}
    if args.config:
        with open(args.config) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: {exc}") from exc
    data.setdefault("kind", DEFAULT_KIND[args.command])
    if args.command == "localize" and "algorithms" not in data:
        data["algorithms"] = ["gspawn", "atc", "peer-to-peer"]
    for key in ("seed", "trials", "out_dir", "l_max", "workers"):
        val = getattr(args, key)
        if val is not None:
            data[key] = val
    if args.algorithms:
        data["algorithms"] = [a.strip() for a in args.algorithms.split(",") if a.strip()]
    scen = dict(data.get("scenario", {}))
    if args.k is not None:
        scen["k"] = args.k
    if args.scene:
        scen["scene_file"] = args.scene
    if args.sigma is not None:
        scen["sigma"] = args.sigma
    if data["kind"] in ("regular-graph-estimation", "analysis-only") and not scen:
        scen["k"] = 3
    data["scenario"] = scen
    return ExperimentConfig.from_dict(data)


def _fmt(x):
    return "n/a" if x is None else (f"{x:.6g}" if isinstance(x, float) else str(x))


def _print_summary(data, out=None):
    out = sys.stdout if out is None else out
    print(f"kind: {data['kind']}  trials: {data.get('trials')}  seed: {data.get('seed')}", file=out)
    crlb = data.get("crlb", {})
    if "avg_rmse_bound" in crlb:
        print(f"CRLB: trace {_fmt(crlb['trace'])}  avg RMSE bound {_fmt(crlb['avg_rmse_bound'])}",
              file=out)
    for name, a in data.get("algorithms", {}).items():
        if "avg_rmse_final" not in a:
            print(f"{name:>13}: FAILED on {a['failed_trials']} trials: {a['error']}", file=out)
            continue
        m = a["messages"]
        print(f"{name:>13}: avg RMSE {_fmt(a['avg_rmse_final'])}  "
              f"iterations {_fmt(a['iterations_to_converge'])}  "
              f"radius {_fmt(a['spectral_radius'])}  "
              f"msgs/sensor/iter {_fmt(m['per_sensor_per_iteration'])}  "
              f"total {_fmt(m.get('total_per_sensor'))}", file=out)
    if "gspawn_minus_peer_to_peer" in data:
        b = data["gspawn_minus_peer_to_peer"]
        print(f"gSPAWN - peer-to-peer avg RMSE: {_fmt(b['difference'])} "
              f"[{_fmt(b['ci_low'])}, {_fmt(b['ci_high'])}]", file=out)


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        config = _config(args)
        if args.command == "validate":
            scenario, _ = build_scenario(config)
            report = validate_assumptions(scenario.graph, scenario.edges, scenario.alpha,
                                          scenario.truth.alpha0)
            print(json.dumps(report.as_dict(), indent=2))
            return 0 if report.ok else 1
        if args.command == "analyze" and not config.out_dir:
            scenario, _ = build_scenario(config)
            rep = analysis_report(scenario, config.l_max)
            rep.pop("P_infinity")
            msd = rep.get("msd", {})
            if "series" in msd:
                msd["series"] = msd["series"][-1:]
            print(json.dumps(rep, indent=2))
            return 0
        summary = run_experiment(config)
        data = summary.data
        if args.command == "appendix-a":
            rep = data["appendix_a"]
            print(f"spectral radius {rep['spectral_radius']:.7f}  "
                  f"max fixed-point residual {rep['max_fixed_point_residual']:.2e}  "
                  f"max Q deviation {rep['max_Q_deviation']:.2e}")
            for msg in rep["mismatches"]:
                print(f"mismatch: {msg}")
            return 0 if rep["ok"] else 1
        if args.command == "analyze":
            print(json.dumps({k: v for k, v in data.items() if k != "P_infinity"}, indent=2))
            return 0
        _print_summary(data)
        if config.out_dir:
            print(f"wrote {config.out_dir}/summary.json")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SpawnlabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
