import numpy as np
import pytest

from spawnlab import diffusion
from spawnlab.exceptions import ModelError
from spawnlab.model import FixedStream, Measurement, MeasurementStream, Regressor, StackedStream
from spawnlab.scenarios import (chain_scenario, random_compliant_scenario, regular_graph_scenario)


def noiseless(sc):
    arr = sc.arrays
    s = sc.truth.s
    return np.einsum("eab,eb->ea", arr.G, s[arr.src]) - np.einsum("eab,eb->ea", arr.H, s[arr.dst])


@pytest.mark.parametrize("policy", diffusion.WEIGHT_POLICIES)
def test_weights_row_stochastic_on_neighborhood(policy):
    sc = regular_graph_scenario(3, seed=1)
    A = diffusion.combination_weights(sc.graph, policy)
    assert np.allclose(A.sum(1), 1) and (A >= 0).all()
    for i in range(1, sc.graph.node_count):
        hood = diffusion.combination_neighborhood(sc.graph, i)
        support = {j + 1 for j in np.flatnonzero(A[i - 1])}
        assert support == set(hood)
    if policy == "metropolis":
        assert np.allclose(A, A.T)


def test_unknown_policy_rejected():
    with pytest.raises(ModelError):
        diffusion.combination_weights(chain_scenario().graph, "nope")


def test_build_stacked_reproduces_measurements():
    rng = np.random.default_rng(0)
    sc = random_compliant_scenario(rng, n=4)
    d = noiseless(sc)
    meas = {e: Measurement(e, 1, d[k], sc.arrays.H[k]) for k, e in enumerate(sc.arrays.edges)}
    for i in range(1, sc.graph.node_count):
        sr = diffusion.build_stacked(sc.graph, sc.edges, meas, i)
        assert np.allclose(sr.W @ sc.truth.s.ravel(), sr.d)


def test_single_node_lms_by_hand():
    # n=1: the combine step is trivial and ATC is plain LMS
    sc = chain_scenario(n=1, d=2, G=np.eye(2), H=0.5 * np.eye(2), adaptive=False)
    d = np.array([[1.0, -2.0]])
    cfg = diffusion.make_config(sc, eta=1.0)
    # R = G^T G = I, so xi = 1 and LMS lands on the solution in one step
    assert cfg.step_sizes[0] == pytest.approx(1.0)
    tr = diffusion.run(sc, FixedStream(sc, d), 3, config=cfg, stop_early=False)
    want = d[0] + 0.5 * sc.truth.s[0]
    assert np.allclose(tr.estimates[1, 1], want)


def test_recursion_matrix_predicts_noiseless_error():
    rng = np.random.default_rng(7)
    sc = random_compliant_scenario(rng, n=5, adaptive=False)
    setup = diffusion.AtcSetup(sc)
    cfg = diffusion.make_config(sc, setup=setup)
    B = diffusion.recursion_matrix(setup, cfg)
    tr = diffusion.run(sc, FixedStream(sc, noiseless(sc)), 30, config=cfg, stop_early=False)
    n, dim = sc.graph.n, sc.d
    e = np.tile(-sc.truth.s[1:].ravel(), n)
    idx = np.arange(n)
    for l in range(31):
        own = e.reshape(n, n, dim)[idx, idx]
        assert np.allclose(tr.estimates[l, 1:] - sc.truth.s[1:], own, atol=1e-9)
        e = B @ e


def test_gram_matches_monte_carlo():
    sc = regular_graph_scenario(4, seed=2)
    for i in (1, 3):
        exact = diffusion.step_size_bound(sc, i)
        mc = diffusion.step_size_bound(sc, i, trials=40_000, rng=0, method="monte-carlo")
        assert mc == pytest.approx(exact, rel=0.02)


def test_step_sizes_respect_bound():
    sc = regular_graph_scenario(3, seed=0)
    setup = diffusion.AtcSetup(sc)
    cfg = diffusion.make_config(sc, eta=1.95, setup=setup)
    for i in range(1, sc.graph.node_count):
        assert cfg.step_sizes[i - 1] * diffusion.step_size_bound(sc, i, setup=setup) < 2


def test_eta_out_of_range():
    with pytest.raises(ModelError):
        diffusion.make_config(chain_scenario(), eta=2.5)


def test_mean_error_follows_recursion_with_random_regressors():
    sc = regular_graph_scenario(3, seed=4, noise_variance=1.0)
    setup = diffusion.AtcSetup(sc)
    cfg = diffusion.make_config(sc, setup=setup)
    B = diffusion.recursion_matrix(setup, cfg)
    T = 3000
    streams = StackedStream([MeasurementStream(sc, np.random.default_rng(k)) for k in range(T)])
    tr = diffusion.run(sc, streams, 15, config=cfg, batch_shape=(T,), stop_early=False)
    n, dim = sc.graph.n, sc.d
    e = np.tile(-sc.truth.s[1:].ravel(), n)
    for _ in range(15):
        e = B @ e
    own = e.reshape(n, n, dim)[np.arange(n), np.arange(n)]
    emp = (tr.estimates[-1, :, 1:] - sc.truth.s[1:]).mean(0)
    se = (tr.estimates[-1, :, 1:] - sc.truth.s[1:]).std(0) / np.sqrt(T)
    assert np.all(np.abs(emp - own) < 4 * se + 1e-3)


def test_broadcasts_equal_degree():
    sc = regular_graph_scenario(5, seed=0)
    tr = diffusion.run(sc, MeasurementStream(sc, np.random.default_rng(0)), 5, stop_early=False)
    assert np.all(tr.messages[:, 1:] == 5)
    assert tr.messages_per_sensor_per_iteration() == 5
