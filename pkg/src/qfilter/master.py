"""Deterministic integration of the unconditional Lindblad master equation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError
from .operators import SystemModel, lindblad_schrodinger, nearest_density


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0, t0 + dt, ..., t0 + n_steps * dt``."""

    t0: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not (isinstance(self.n_steps, (int, np.integer)) and self.n_steps >= 1):
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps!r}")
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ValueError(f"dt must be positive and finite, got {self.dt!r}")
        if not math.isfinite(self.t0 + self.n_steps * self.dt):
            raise ValueError("grid end time is not finite")
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @classmethod
    def span(cls, t_end: float, dt: float, t0: float = 0.0) -> TimeGrid:
        return cls(t0, dt, int(round((t_end - t0) / dt)))

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def t_end(self) -> float:
        return self.t0 + self.n_steps * self.dt


@dataclass(frozen=True, eq=False)
class StateTrajectory:
    grid: TimeGrid
    states: np.ndarray  # (n_steps + 1, d, d)

    def __post_init__(self):
        if len(self.states) != self.grid.n_steps + 1:
            raise ValueError(
                f"expected {self.grid.n_steps + 1} states, got {len(self.states)}")

    def expectation(self, x: np.ndarray) -> np.ndarray:
        return np.trace(self.states @ x, axis1=-2, axis2=-1).real


def _rk4(model, rho, dt):
    k1 = lindblad_schrodinger(model, rho)
    k2 = lindblad_schrodinger(model, rho + 0.5 * dt * k1)
    k3 = lindblad_schrodinger(model, rho + 0.5 * dt * k2)
    k4 = lindblad_schrodinger(model, rho + dt * k3)
    return rho + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _euler(model, rho, dt):
    return rho + dt * lindblad_schrodinger(model, rho)


_METHODS = {"rk4": _rk4, "euler": _euler}


def integrate_master(model: SystemModel, grid: TimeGrid, method: str = "rk4",
                     repair: bool = True) -> StateTrajectory:
    """Integrate d rho/dt = L*(rho) on ``grid`` starting from the model's state.

    Each step is followed by :func:`nearest_density` unless ``repair`` is off
    (used to inspect raw integration error).
    """
    try:
        step = _METHODS[method.lower()]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; expected one of {sorted(_METHODS)}") from None
    states = np.empty((grid.n_steps + 1, model.dim, model.dim), dtype=complex)
    rho = model.initial_state.copy()
    states[0] = rho
    for k in range(grid.n_steps):
        rho = step(model, rho, grid.dt)
        if not np.all(np.isfinite(rho)):
            raise DivergenceError("non-finite state in master equation", step=k + 1)
        if repair:
            try:
                rho = nearest_density(rho)
            except DivergenceError as exc:
                raise DivergenceError(str(exc), step=k + 1) from exc
        states[k + 1] = rho
    return StateTrajectory(grid, states)
