import math

import numpy as np
import pytest

from qfilter.errors import DivergenceError
from qfilter.master import TimeGrid, integrate_master
from qfilter.operators import (
    EXCITED,
    GROUND,
    SIGMA_MINUS,
    SIGMA_X,
    SIGMA_Z,
    SystemModel,
    lindblad_schrodinger,
    trace_distance,
)

Z2 = np.zeros((2, 2))


def decay(gamma=1.0, rho=EXCITED):
    return SystemModel(Z2, math.sqrt(gamma) * SIGMA_MINUS, rho)


def test_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid(0.0, 0.0, 10)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 0.1, 0)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1e308, 10)
    g = TimeGrid.span(2.0, 1e-3)
    assert g.n_steps == 2000 and len(g.times) == 2001


def test_trivial_dynamics_is_constant():
    rho = 0.5 * np.array([[1, 0.5], [0.5, 1]], dtype=complex)
    traj = integrate_master(SystemModel(Z2, Z2, rho), TimeGrid(0, 0.1, 20))
    assert np.array_equal(traj.states, np.broadcast_to(rho, traj.states.shape))


def test_decay_endpoint():
    traj = integrate_master(decay(), TimeGrid(0, 1e-3, 1000))
    assert abs(traj.states[-1, 0, 0].real - math.exp(-1)) <= 1e-6
    assert abs(traj.states[-1, 0, 0].real - 0.367879) <= 1e-6


def test_closed_rabi():
    omega = 2 * math.pi
    m = SystemModel(0.5 * omega * SIGMA_X, Z2, EXCITED)
    traj = integrate_master(m, TimeGrid(0, 1e-3, 1000))
    sz = traj.expectation(SIGMA_Z)
    assert abs(sz[-1] - 1.0) <= 1e-6
    assert np.allclose(sz, np.cos(omega * traj.grid.times), atol=1e-8)


def test_rk4_fourth_order():
    # below dt ~ 1e-2 the error is at roundoff, so the slope is measured on coarser steps
    dts = (0.1, 0.05, 0.025)
    errs = [abs(integrate_master(decay(), TimeGrid.span(1.0, dt), repair=False).states[-1, 0, 0].real
                - math.exp(-1)) for dt in dts]
    slopes = np.diff(np.log2(errs)) / np.diff(np.log2(dts))
    assert np.all((slopes >= 3.5) & (slopes <= 4.5))
    fine = integrate_master(decay(), TimeGrid.span(1.0, 1e-3), repair=False).states[-1, 0, 0].real
    assert abs(fine - math.exp(-1)) <= 1e-12


def test_euler_first_order():
    dts = (0.02, 0.01, 0.005)
    errs = [abs(integrate_master(decay(), TimeGrid.span(1.0, dt), "euler").states[-1, 0, 0].real
                - math.exp(-1)) for dt in dts]
    slopes = np.diff(np.log2(errs)) / np.diff(np.log2(dts))
    assert np.all((slopes >= 0.9) & (slopes <= 1.1))


@pytest.mark.parametrize("model", [
    decay(),
    SystemModel(SIGMA_X, SIGMA_MINUS, GROUND),
    SystemModel(Z2, math.sqrt(0.5) * np.eye(2), EXCITED),
])
def test_trace_and_positivity_before_repair(model):
    traj = integrate_master(model, TimeGrid(0, 1e-2, 400), repair=False)
    tr = np.trace(traj.states, axis1=-2, axis2=-1)
    assert np.abs(tr - 1).max() <= 1e-9
    assert np.linalg.eigvalsh(traj.states).min() >= -1e-8


def test_decay_fixed_point():
    traj = integrate_master(decay(), TimeGrid.span(20.0, 1e-2))
    assert trace_distance(traj.states[-1], GROUND) <= 1e-8


def test_rk4_step_matches_generator():
    m = SystemModel(SIGMA_X, SIGMA_MINUS, EXCITED)
    dt = 1e-2
    rho = EXCITED.astype(complex)
    k1 = lindblad_schrodinger(m, rho)
    k2 = lindblad_schrodinger(m, rho + dt / 2 * k1)
    k3 = lindblad_schrodinger(m, rho + dt / 2 * k2)
    k4 = lindblad_schrodinger(m, rho + dt * k3)
    expected = rho + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    got = integrate_master(m, TimeGrid(0, dt, 1), repair=False).states[1]
    assert np.allclose(got, expected, atol=1e-15)


def test_divergence_reports_step():
    big = SystemModel(Z2, 1e3 * SIGMA_MINUS, EXCITED)
    with pytest.raises(DivergenceError) as info:
        with np.errstate(over="ignore", invalid="ignore"):
            integrate_master(big, TimeGrid(0, 1.0, 200), "euler", repair=False)
    assert 40 < info.value.step < 200


def test_unknown_method():
    with pytest.raises(ValueError, match="unknown method"):
        integrate_master(decay(), TimeGrid(0, 0.1, 1), "midpoint")
