import math

import numpy as np
import pytest

from qfilter.filters import FilterTrajectory, innovations, run_filter
from qfilter.master import TimeGrid, integrate_master
from qfilter.operators import EXCITED, GROUND, SIGMA_MINUS, SIGMA_X, SIGMA_Z, SystemModel
from qfilter.simulator import (
    MASK64,
    SimulationSpec,
    derive_seed,
    ensemble_average,
    simulate,
    simulate_counting,
    simulate_ensemble,
    simulate_homodyne,
    simulate_increments,
)

Z2 = np.zeros((2, 2))
OBS = {"sigma_z": SIGMA_Z, "sigma_x": SIGMA_X}


def rabi_spec(n_traj=6, n_steps=200, seed=11, detection="homodyne"):
    m = SystemModel(SIGMA_X, SIGMA_MINUS, GROUND, detection)
    return SimulationSpec(m, TimeGrid(0, 1e-2, n_steps), n_traj, seed, OBS)


def test_derive_seed_reference_values():
    # pure integer arithmetic, so these hold on every platform
    assert derive_seed(0, 0) == derive_seed(0, 0)
    assert 0 <= derive_seed(MASK64, MASK64) <= MASK64
    with pytest.raises(ValueError):
        derive_seed(-1, 0)
    with pytest.raises(ValueError):
        derive_seed(0, 2**64)


def test_derive_seed_has_no_collisions():
    for master in (0, 12345, MASK64):
        seeds = {derive_seed(master, i) for i in range(10**6)}
        assert len(seeds) == 10**6


def test_derive_seed_avalanche():
    a = np.array([derive_seed(7, i) for i in range(1000)], dtype=np.uint64)
    b = np.array([derive_seed(8, i) for i in range(1000)], dtype=np.uint64)
    assert np.all(a != b)
    flipped = np.unpackbits((a ^ b).view(np.uint8)).mean()
    assert abs(flipped - 0.5) < 0.02


def test_spec_validation():
    m = SystemModel(Z2, SIGMA_MINUS, EXCITED)
    grid = TimeGrid(0, 1e-2, 10)
    with pytest.raises(ValueError):
        SimulationSpec(m, grid, 0, 1)
    with pytest.raises(ValueError):
        SimulationSpec(m, grid, 1, -1)
    with pytest.raises(ValueError, match="Hermitian"):
        SimulationSpec(m, grid, 1, 1, {"bad": SIGMA_MINUS})


def test_replay_is_order_and_worker_independent():
    spec = rabi_spec(n_traj=7)
    serial = simulate(spec)
    for kwargs in ({"workers": 2, "chunk_size": 3}, {"chunk_size": 1}):
        other = simulate(spec, **kwargs)
        for (r1, t1), (r2, t2) in zip(serial, other):
            assert r1.increments.tobytes() == r2.increments.tobytes()
            assert t1.states.tobytes() == t2.states.tobytes()
    reversed_run = simulate(spec, indices=[6, 3, 0])
    for (rec, _), i in zip(reversed_run, (6, 3, 0)):
        assert rec.traj_index == i
        assert np.array_equal(rec.increments, serial[i][0].increments)


def test_simulator_self_consistency():
    spec = rabi_spec()
    for rec, traj in simulate_homodyne(spec):
        assert np.array_equal(innovations(spec.model, rec, traj), traj.noise)
        assert np.array_equal(run_filter(spec.model, rec).states, traj.states)


def test_counting_replay():
    spec = rabi_spec(detection="counting")
    for rec, traj in simulate_counting(spec):
        assert set(np.unique(rec.increments)) <= {0.0, 1.0}
        assert np.array_equal(run_filter(spec.model, rec).states, traj.states)


def test_increment_batch_matches_full_run():
    spec = rabi_spec()
    batch = simulate_increments(spec, chunk_size=4)
    for i, (rec, traj) in enumerate(simulate(spec)):
        assert np.array_equal(batch.increments[i], rec.increments)
        assert np.array_equal(batch.noise[i], traj.noise)
        assert np.array_equal(batch.observables[i, :, 0], traj.expectation(SIGMA_Z))
    assert np.all(batch.diverged_at == -1)


def test_uncoupled_homodyne_record_is_the_noise():
    spec = SimulationSpec(SystemModel(SIGMA_X, Z2, EXCITED), TimeGrid(0, 1e-2, 50), 3, 5)
    for rec, traj in simulate(spec):
        assert np.array_equal(rec.increments, traj.noise)


def test_uncoupled_counting_never_jumps():
    spec = SimulationSpec(SystemModel(SIGMA_X, Z2, EXCITED, "counting"),
                          TimeGrid(0, 1e-2, 100), 20, 5)
    assert not simulate_increments(spec).increments.any()


def test_counting_rate_guard():
    m = SystemModel(Z2, 5 * SIGMA_MINUS, EXCITED, "counting")
    spec = SimulationSpec(m, TimeGrid(0, 1e-2, 10), 2, 1)
    with pytest.raises(ValueError, match="reduce dt"):
        simulate(spec)


def test_wrong_detection_entry_points():
    with pytest.raises(ValueError):
        simulate_counting(rabi_spec())
    with pytest.raises(ValueError):
        simulate_homodyne(rabi_spec(detection="counting"))


def test_ensemble_of_one():
    spec = rabi_spec(n_traj=1)
    res = ensemble_average(simulate(spec), OBS)
    traj = simulate(spec)[0][1]
    assert res.n_used == 1
    assert np.array_equal(res.observable_stderr["sigma_z"], np.zeros(spec.grid.n_steps + 1))
    assert np.allclose(res.observable_means["sigma_z"], traj.expectation(SIGMA_Z), atol=1e-15)


def test_uncoupled_ensemble_is_the_closed_trajectory():
    m = SystemModel(0.5 * SIGMA_X, Z2, EXCITED)
    grid = TimeGrid(0, 1e-2, 100)
    res = simulate_ensemble(SimulationSpec(m, grid, 8, 2, OBS))
    ref = integrate_master(m, grid)
    assert np.allclose(res.observable_means["sigma_z"], ref.expectation(SIGMA_Z), atol=1e-8)
    assert np.allclose(res.observable_stderr["sigma_z"], 0, atol=1e-12)


def test_streamed_ensemble_matches_ensemble_average():
    spec = rabi_spec(n_traj=9)
    streamed = simulate_ensemble(spec, keep_records=3, chunk_size=4)
    full = ensemble_average(simulate(spec), OBS)
    for name in OBS:
        assert np.allclose(streamed.observable_means[name], full.observable_means[name],
                           atol=1e-14)
        assert np.allclose(streamed.observable_stderr[name], full.observable_stderr[name],
                           atol=1e-12)
    assert len(streamed.records) == 3
    assert [r.traj_index for r, _ in streamed.records] == [0, 1, 2]


def test_ensemble_excludes_diverged():
    spec = rabi_spec(n_traj=3)
    runs = simulate(spec)
    rec, traj = runs[1]
    runs[1] = (rec, FilterTrajectory(traj.grid, traj.kind, traj.states, diverged_at=17))
    res = ensemble_average(runs, OBS)
    assert res.n_used == 2 and res.diverged == [(1, 17)]
    expected = (runs[0][1].expectation(SIGMA_Z) + runs[2][1].expectation(SIGMA_Z)) / 2
    assert np.allclose(res.observable_means["sigma_z"], expected, atol=1e-15)


def test_ensemble_grid_mismatch():
    a = simulate(rabi_spec(n_steps=10))
    b = simulate(rabi_spec(n_steps=12))
    with pytest.raises(ValueError, match="grid"):
        ensemble_average(a + b)


def test_small_decay_ensemble_tracks_master():
    m = SystemModel(Z2, SIGMA_MINUS, EXCITED)
    grid = TimeGrid(0, 1e-2, 100)
    res = simulate_ensemble(SimulationSpec(m, grid, 400, 3, {"sigma_z": SIGMA_Z}))
    ref = integrate_master(m, grid).expectation(SIGMA_Z)
    err = res.observable_stderr["sigma_z"][1:]
    z = np.abs(res.observable_means["sigma_z"][1:] - ref[1:]) / err
    assert z.max() <= 5
    assert math.isclose(res.mean_states.states[0, 0, 0].real, 1.0)
