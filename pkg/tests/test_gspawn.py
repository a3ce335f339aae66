import numpy as np
import pytest

from spawnlab import gspawn
from spawnlab.exceptions import SingularInformationError
from spawnlab.model import (EdgeModel, FixedStream, GroundTruth, MeasurementStream, NetworkGraph,
                            Regressor, Scenario, sample_round)
from spawnlab.scenarios import chain_scenario, random_compliant_scenario


def reference_round(scenario, mu, P, d, H):
    """Plain per-node loop written from the update equations."""
    n1 = scenario.graph.node_count
    mu_new, P_new = mu.copy(), P.copy()
    index = {e: k for k, e in enumerate(scenario.arrays.edges)}
    for i in range(1, n1):
        info = 0
        h = 0
        for j in sorted(scenario.graph.neighbors[i]):
            em = scenario.edges[(i, j)]
            k = index[(i, j)]
            Pi_inv = np.linalg.inv(em.C + em.H @ P[j] @ em.H.T)
            info = info + em.G.T @ Pi_inv @ em.G
            h = h + em.G.T @ Pi_inv @ (d[k] + H[k] @ mu[j])
        P_new[i] = np.linalg.inv(info)
        mu_new[i] = P_new[i] @ h
    return mu_new, P_new


def test_initial_covariance_by_degree():
    assert np.allclose(gspawn.initial_covariance(1, 2.0, 2), 8.0 * np.eye(2))
    assert np.allclose(gspawn.initial_covariance(2, 2.0, 2), 6.0 * np.eye(2))
    assert np.allclose(gspawn.initial_covariance(5, 3.0, 2), 5.0 * np.eye(2))


def test_init_pins_reference_and_warns():
    g = NetworkGraph.from_edges(3, [(0, 1), (1, 2)])
    st = gspawn.init_beliefs(g, alpha=1.0, alpha0=2.0, s0_hat=[1.0, 2.0], alpha_min=5.0)
    assert np.allclose(st.mu[0], [1, 2]) and np.allclose(st.mu[1:], 0)
    assert np.allclose(st.P[0], 2 * np.eye(2))
    assert len(st.warnings) == 2


def test_step_matches_reference_loop():
    rng = np.random.default_rng(3)
    for _ in range(10):
        sc = random_compliant_scenario(rng, regressor=Regressor("gaussian", 0.05))
        st = gspawn.init_for_scenario(sc)
        st.mu[1:] = rng.standard_normal(st.mu[1:].shape)
        for _ in range(4):
            d, H = sample_round(sc, rng)
            want_mu, want_P = reference_round(sc, st.mu, st.P, d, H)
            st = gspawn.step(st, sc, d, H)
            assert np.allclose(st.P, want_P, rtol=1e-9, atol=1e-12)
            assert np.allclose(st.mu, want_mu, rtol=1e-9, atol=1e-10)


def test_update_order_does_not_matter():
    rng = np.random.default_rng(5)
    sc = random_compliant_scenario(rng, n=6)
    st = gspawn.init_for_scenario(sc)
    d, H = sample_round(sc, rng)
    vec = gspawn.step(st, sc, d, H)
    for _ in range(3):
        order = list(rng.permutation(sc.graph.node_count))
        seq = gspawn.step(st, sc, d, H, order=order)
        assert np.allclose(seq.mu, vec.mu) and np.allclose(seq.P, vec.P)


def test_single_sensor_first_iteration():
    # with an exact reference, one round gives P_1 = C and mu_1 = d + H s0
    g = NetworkGraph.from_edges(2, [(0, 1)])
    em = EdgeModel([[2.0]], [[0.5]], [[0.3]])
    sc = Scenario(g, {(1, 0): em}, GroundTruth([[1.5], [4.0]]), alpha=1.0)
    st = gspawn.init_for_scenario(sc)
    d = np.array([[7.0]])
    out = gspawn.step(st, sc, d)
    assert out.P[1, 0, 0] == pytest.approx(0.3 / 4.0)
    assert out.mu[1, 0] == pytest.approx((7.0 + 0.5 * 1.5) / 2.0)


def test_noiseless_static_converges_to_truth():
    rng = np.random.default_rng(11)
    sc = random_compliant_scenario(rng, n=7, adaptive=False)
    arr = sc.arrays
    s = sc.truth.s
    d = np.einsum("eab,eb->ea", arr.G, s[arr.src]) - np.einsum("eab,eb->ea", arr.H, s[arr.dst])
    tr = gspawn.run(gspawn.init_for_scenario(sc), sc, FixedStream(sc, d), 2000, eps=1e-13)
    assert np.abs(tr.mu[-1] - s).max() < 1e-9


def test_batched_run_equals_individual_runs():
    rng = np.random.default_rng(2)
    sc = random_compliant_scenario(rng, n=4, regressor=Regressor("gaussian", 0.1))
    streams = [MeasurementStream(sc, np.random.default_rng(k)) for k in range(3)]
    from spawnlab.model import StackedStream
    batch = gspawn.run(gspawn.init_for_scenario(sc, batch_shape=(3,)), sc,
                       StackedStream(streams), 20, stop_early=False)
    for k in range(3):
        single = gspawn.run(gspawn.init_for_scenario(sc), sc, streams[k], 20, stop_early=False)
        assert np.allclose(batch.mu[:, k], single.mu)


def test_message_counter_is_two_per_sensor():
    sc = chain_scenario(n=3)
    tr = gspawn.run(gspawn.init_for_scenario(sc), sc,
                    MeasurementStream(sc, np.random.default_rng(0)), 15, stop_early=False)
    assert tr.messages.shape == (15, 4)
    assert np.all(tr.messages[:, 1:] == 2) and np.all(tr.messages[:, 0] == 0)
    assert tr.messages_per_sensor_per_iteration() == 2


def test_covariance_trace_matches_run():
    rng = np.random.default_rng(4)
    sc = random_compliant_scenario(rng, n=5)
    Ps, _ = gspawn.covariance_trace(sc, 12)
    tr = gspawn.run(gspawn.init_for_scenario(sc), sc,
                    MeasurementStream(sc, np.random.default_rng(0)), 12, stop_early=False)
    assert np.allclose(Ps, tr.P)


def test_singular_information_is_reported():
    g = NetworkGraph.from_edges(2, [(0, 1)])
    G = np.array([[1.0, 0.0]])
    sc = Scenario(g, {(1, 0): EdgeModel(G, 0 * G, [[1.0]])}, GroundTruth(np.zeros((2, 2))), 1.0)
    with pytest.raises(SingularInformationError) as info:
        gspawn.step(gspawn.init_for_scenario(sc), sc, np.zeros((1, 1)))
    assert info.value.node == 1 and info.value.iteration == 1
