import json

import numpy as np
import pytest

from spawnlab import diffusion, gspawn
from spawnlab.cli import main
from spawnlab.exceptions import ConfigError
from spawnlab.harness import (ExperimentConfig, first_stay_below, report_messages,
                              rmse_from_trace, run_experiment, scenario_from_dict,
                              scenario_to_dict, steady_iteration, trial_rngs)
from spawnlab.model import MeasurementStream, Regressor
from spawnlab.scenarios import diagonal_form_scenario, regular_graph_scenario


def small(tmp_path=None, **kw):
    base = dict(kind="regular-graph-estimation", scenario={"k": 3}, trials=6, l_max=25,
                trace_trials=6, chunk=4)
    base.update(kw)
    if tmp_path is not None:
        base["out_dir"] = str(tmp_path)
    return ExperimentConfig(**base)


@pytest.mark.parametrize("bad", [
    {"kind": "nope"},
    {"kind": "regular-graph-estimation", "trials": 0},
    {"kind": "regular-graph-estimation", "algorithms": ["magic"]},
    {"kind": "regular-graph-estimation", "algorithms": ["peer-to-peer"]},
    {"kind": "regular-graph-estimation", "surprise": 1},
    {"kind": "regular-graph-estimation", "atc": {"eta": 2.5}},
    {"trials": 3},
])
def test_config_rejects_bad_input(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_config_load(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"kind": "appendix-a"}))
    assert ExperimentConfig.load(p).kind == "appendix-a"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)


def test_trial_seeds_do_not_depend_on_count():
    a = [r.standard_normal() for r in trial_rngs(5, 3)]
    b = [r.standard_normal() for r in trial_rngs(5, 10)][:3]
    assert a == b


def test_same_seed_gives_identical_files(tmp_path):
    run_experiment(small(tmp_path / "a"))
    run_experiment(small(tmp_path / "b"))
    for name in ("trace.csv", "curve.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_chunking_and_workers_do_not_change_results(tmp_path):
    run_experiment(small(tmp_path / "a", chunk=1))
    run_experiment(small(tmp_path / "b", chunk=100))
    run_experiment(small(tmp_path / "c", chunk=2, workers=2))
    ref = (tmp_path / "a" / "trace.csv").read_bytes()
    assert ref == (tmp_path / "b" / "trace.csv").read_bytes()
    assert ref == (tmp_path / "c" / "trace.csv").read_bytes()


def test_algorithms_share_each_trials_measurements():
    cfg = small()
    res = run_experiment(cfg, write=False)
    sc = regular_graph_scenario(3, seed=0)
    rows = res.trace_rows
    for t, rng in enumerate(trial_rngs(cfg.seed, cfg.trials)):
        stream = MeasurementStream(sc, rng)
        g = gspawn.run(gspawn.init_for_scenario(sc), sc, stream, cfg.l_max, stop_early=False)
        a = diffusion.run(sc, stream, cfg.l_max, stop_early=False)
        for algo, est in (("gspawn", g.mu), ("atc", a.estimates)):
            got = np.array([r[4:6] for r in rows if r[0] == algo and r[1] == t
                            and r[2] == cfg.l_max])
            assert np.allclose(got, est[-1])


def test_summary_rmse_equals_trace_recomputation(tmp_path):
    res = run_experiment(small(tmp_path))
    for algo in ("gspawn", "atc"):
        recomputed = rmse_from_trace(tmp_path / "trace.csv", algo)
        assert recomputed == pytest.approx(res.data["algorithms"][algo]["avg_rmse_final"], rel=1e-12)
        assert res.data["algorithms"][algo]["avg_rmse_final"] >= 0


def test_trace_header_is_stable(tmp_path):
    run_experiment(small(tmp_path, trials=1, trace_trials=1))
    header = (tmp_path / "trace.csv").read_text().splitlines()[0]
    assert header == ("algorithm,trial,iteration,node,mu_0,mu_1,P_00,P_01,P_10,P_11,"
                      "error,messages")


def test_summary_contents():
    res = run_experiment(small(scenario={"k": 4}), write=False)
    data = res.data
    g, a = data["algorithms"]["gspawn"], data["algorithms"]["atc"]
    assert g["messages"]["per_sensor_per_iteration"] == 2
    assert a["messages"]["per_sensor_per_iteration"] == 4
    assert 0.45 <= g["spectral_radius"] <= 0.75
    assert 0.84 <= a["spectral_radius"] < 1
    assert data["crlb"]["trace"] > 0


def test_report_messages():
    bc = {"gspawn": np.tile([0, 2, 2, 2], (5, 1)), "atc": np.tile([0, 2, 3, 1], (5, 1)),
          "peer-to-peer": np.array([[0, 1, 1, 1], [0, 1, 1, 1], [0, 0, 0, 0]])}
    out = report_messages(bc, {"gspawn": 10, "atc": 4, "peer-to-peer": 2}, degrees=True)
    assert out["gspawn"]["per_sensor_per_iteration"] == 2
    assert out["gspawn"]["total_per_sensor"] == 20
    assert out["atc"]["per_sensor_per_iteration_by_node"] == [2, 3, 1]
    assert out["peer-to-peer"]["per_sensor_per_iteration"] == 1
    assert out["peer-to-peer"]["total_per_sensor"] == 2


def test_steady_and_threshold_helpers():
    curve = np.r_[np.linspace(10, 1, 20), np.ones(30)]
    assert steady_iteration(curve, 0.01) == 19
    assert steady_iteration(np.linspace(10, 1, 50), 0.01) is None
    assert first_stay_below([1, 0.1, 1e-6, 1e-7], 1e-5) == 2
    assert first_stay_below([1, 1e-6, 1], 1e-5) is None


def test_explicit_model_roundtrip():
    rng = np.random.default_rng(0)
    sc = diagonal_form_scenario(rng, n=3, regressor_variance=0.1)
    doc = json.loads(json.dumps(scenario_to_dict(sc)))
    back = scenario_from_dict(doc)
    assert back.graph.neighbors == sc.graph.neighbors
    for e, em in sc.edges.items():
        assert np.allclose(back.edges[e].G, em.G) and np.allclose(back.edges[e].C, em.C)
        assert back.edges[e].regressor.kind == "diagonal"
    with pytest.raises(ConfigError):
        scenario_from_dict({"neighbors": [[1], [0]]})


def test_algorithm_failure_is_recorded():
    model = {"neighbors": [[1], [0]],
             "edges": [{"edge": [1, 0], "G": [[1.0, 0.0]], "H": [[0.0, 0.0]], "C": [[1.0]]}],
             "truth": [[0, 0], [1, 1]], "alpha": 1.0, "adaptive": False}
    cfg = ExperimentConfig(kind="regular-graph-estimation", scenario={"model": model}, trials=3,
                           l_max=5)
    data = run_experiment(cfg, write=False).data
    assert data["algorithms"]["gspawn"]["failed_trials"] == 3
    assert "singular" in data["algorithms"]["gspawn"]["error"]
    assert "avg_rmse_final" in data["algorithms"]["atc"]
    assert "error" in data["crlb"]


def test_analysis_only_and_counterexample_kinds(tmp_path):
    data = run_experiment(ExperimentConfig(kind="analysis-only", scenario={"k": 3}, l_max=40,
                                           out_dir=str(tmp_path))).data
    assert data["assumption3_holds"] and len(data["msd"]["series"]) == 41
    assert json.loads((tmp_path / "summary.json").read_text())["kind"] == "analysis-only"
    rep = run_experiment(ExperimentConfig(kind="appendix-a")).data["appendix_a"]
    assert abs(rep["spectral_radius"] - 1.017) < 1e-3


def test_localization_run_small(tmp_path):
    cfg = ExperimentConfig(kind="localization", scenario={"scene_seed": 1, "n_sensors": 12},
                           algorithms=["gspawn", "peer-to-peer"], trials=20, l_max=60,
                           trace_trials=2, out_dir=str(tmp_path))
    data = run_experiment(cfg).data
    assert data["algorithms"]["peer-to-peer"]["messages"]["per_sensor_per_iteration"] == 1
    assert data["algorithms"]["gspawn"]["messages"]["per_sensor_per_iteration"] == 2
    assert "gspawn_minus_peer_to_peer" in data
    assert (tmp_path / "curve.csv").read_text().startswith("iteration,avg_rmse_gspawn")


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["appendix-a"]) == 0
    assert "1.0171" in capsys.readouterr().out
    assert main(["validate", "--k", "3"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"kind": "regular-graph-estimation", "trials": -1}))
    assert main(["simulate", "--config", str(bad)]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == 3
    assert main(["simulate", "--trials", "2", "--l-max", "10", "--seed", "4",
                 "--out-dir", str(tmp_path / "o"), "--algorithms", "gspawn"]) == 0
    out = capsys.readouterr().out
    assert "gspawn" in out and "avg RMSE" in out
    assert (tmp_path / "o" / "trace.csv").exists()
    model = {"neighbors": [[1], [0]],
             "edges": [{"edge": [1, 0], "G": [[1.0]], "H": [[0.5]], "C": [[1.0]]}],
             "truth": [[0.0], [1.0]]}
    cfg = tmp_path / "m.json"
    cfg.write_text(json.dumps({"kind": "analysis-only", "scenario": {"model": model}}))
    assert main(["validate", "--config", str(cfg)]) == 0
    assert main(["analyze", "--config", str(cfg)]) == 0
