"""Quantum filtering equations in Schrödinger (density matrix) form.

Normalized filters (innovations form):

* homodyne:  d rho = L*(rho) dt + (L rho + rho L† - m rho) dW,
  with m = tr[(L + L†) rho] and innovation dW = dy - m dt;
* counting:  d rho = L*(rho) dt + (L rho L† / n - rho)(dN - n dt),
  with rate n = tr[L† L rho].

Linear (unnormalized) homodyne filter: d sigma = L*(sigma) dt + (L sigma + sigma L†) dy,
normalized afterwards by its trace.

The simulator and :func:`run_filter` share the batched kernels in
``qfilter._kernels``, so replaying a simulated record reproduces its
trajectory bit for bit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from .errors import DivergenceError, ImpossibleJumpError, RecordError
from .master import TimeGrid
from .operators import (
    Detection,
    SystemModel,
    as_density,
    expectation_real,
    nearest_density,
    project_densities,
    trace,
    trace_distance,
)

JUMP_FLOOR = _k.JUMP_FLOOR
SCHEMES = ("milstein", "euler")


class FilterKind(str, enum.Enum):
    NORMALIZED = "normalized"
    LINEAR = "linear"


@dataclass(frozen=True, eq=False)
class ObservationRecord:
    """Discrete observation increments on a grid.

    ``increments`` holds dy_k (homodyne) or dN_k in {0, 1} (counting) for
    the interval ``[t_k, t_k + dt)``.
    """

    grid: TimeGrid
    detection: Detection
    increments: np.ndarray
    master_seed: int | None = None
    traj_index: int | None = None

    def __post_init__(self):
        det = Detection(self.detection)
        inc = np.array(self.increments, dtype=float)
        if inc.shape != (self.grid.n_steps,):
            raise RecordError(
                f"record length mismatch: expected {self.grid.n_steps} steps, found {inc.size}")
        if not np.all(np.isfinite(inc)):
            raise RecordError("record increments must be finite")
        if det is Detection.COUNTING and not np.all((inc == 0) | (inc == 1)):
            raise RecordError("counting increments must be 0 or 1")
        inc.setflags(write=False)
        object.__setattr__(self, "detection", det)
        object.__setattr__(self, "increments", inc)

    @property
    def path(self) -> np.ndarray:
        """Integrated observation y_k (or N_k) at every grid point, starting at 0."""
        return np.concatenate([[0.0], np.cumsum(self.increments)])


@dataclass(frozen=True, eq=False)
class FilterTrajectory:
    """Conditional states on a grid.

    ``norms`` is only set for the linear filter (tr sigma_k).  ``noise`` holds
    the Wiener increments a homodyne simulation fed into the filter, and
    ``diverged_at`` the step at which a simulated trajectory blew up.
    """

    grid: TimeGrid
    kind: FilterKind
    states: np.ndarray
    norms: np.ndarray | None = None
    noise: np.ndarray | None = field(default=None, repr=False)
    diverged_at: int | None = None

    def expectation(self, x: np.ndarray) -> np.ndarray:
        vals = expectation_real(self.states, x)
        if self.kind is FilterKind.LINEAR:
            vals = vals / self.norms
        return vals

    def normalized_states(self) -> np.ndarray:
        if self.kind is FilterKind.NORMALIZED:
            return self.states
        tr = _k.trace_re(_k.split(self.states)[0])
        if not np.all(tr > 0):
            raise ValueError("cannot normalize: nonpositive trace")
        out, ok = project_densities(self.states / tr[:, None, None])
        if not np.all(ok):
            raise DivergenceError("cannot normalize a non-finite linear state")
        return out


def homodyne_drift(model: SystemModel, rho: np.ndarray) -> np.ndarray:
    """Predicted observation rate tr[(L + L†) rho] for a state or a stack of states."""
    rho = np.asarray(rho, dtype=complex)
    stack = rho if rho.ndim == 3 else rho[None]
    out = _k.homodyne_drift(model, *_k.split(stack))
    return out if rho.ndim == 3 else out[0]


def counting_rate(model: SystemModel, rho: np.ndarray) -> np.ndarray:
    """Expected count rate tr[L† L rho] for a state or a stack of states."""
    rho = np.asarray(rho, dtype=complex)
    stack = rho if rho.ndim == 3 else rho[None]
    out = _k.counting_rate(model, *_k.split(stack))
    return out if rho.ndim == 3 else out[0]


def _check_step_args(model, state, dt, name):
    if not (math.isfinite(dt) and dt > 0):
        raise ValueError(f"dt must be positive and finite, got {dt!r}")
    if np.shape(state) != (model.dim, model.dim):
        raise ValueError(f"{name}: shape {np.shape(state)} does not match dim {model.dim}")


def _check_scheme(scheme):
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


# --- single-step API ------------------------------------------------------------

def homodyne_sme_step(model: SystemModel, rho: np.ndarray, dy: float, dt: float,
                      scheme: str = "milstein", repair: bool = True) -> np.ndarray:
    """Advance the diffusive filter by one observation increment ``dy``.

    ``scheme="euler"`` is the plain Euler-Maruyama update.  The default
    ``"milstein"`` adds the correction ``(1/2) b'b (dW^2 - dt)``, which keeps
    pure states pure to higher order so that clamping does not bias the
    ensemble, and advances the deterministic part with the RK4 (fourth-order
    Taylor) map of ``L*``, so the ensemble mean follows the RK4 master
    equation.  ``repair`` projects the result with :func:`nearest_density`.
    """
    _check_step_args(model, rho, dt, "rho")
    _check_scheme(scheme)
    rho = as_density(rho, "rho")
    if not math.isfinite(dy):
        raise ValueError(f"dy must be finite, got {dy!r}")
    re, im = _k.homodyne_update(model, *_k.split(rho[None]), np.array([float(dy)]), dt,
                                scheme == "milstein")
    out = _k.join(re, im)[0]
    return nearest_density(out) if repair else out


def counting_sme_step(model: SystemModel, rho: np.ndarray, dn: int, dt: float,
                      repair: bool = True) -> np.ndarray:
    """Advance the counting filter over one interval with ``dn`` counts (0 or 1)."""
    _check_step_args(model, rho, dt, "rho")
    rho = as_density(rho, "rho")
    if dn not in (0, 1):
        raise ValueError(f"dN must be 0 or 1, got {dn!r}")
    re, im, impossible = _k.counting_update(model, *_k.split(rho[None]),
                                            np.array([float(dn)]), dt)
    out = _k.join(re, im)
    if impossible[0]:
        raise ImpossibleJumpError(
            f"count recorded with rate tr[L†L rho] = {counting_rate(model, rho):.3g}"
            f" <= {JUMP_FLOOR:g}")
    return nearest_density(out[0]) if repair else out[0]


def zakai_step(model: SystemModel, sigma: np.ndarray, dy: float, dt: float,
               scheme: str = "milstein") -> np.ndarray:
    """Advance the linear (unnormalized) homodyne filter; no normalization or repair.

    ``scheme`` has the same meaning as in :func:`homodyne_sme_step`.
    """
    _check_step_args(model, sigma, dt, "sigma")
    _check_scheme(scheme)
    if not (math.isfinite(dy) and np.all(np.isfinite(sigma))):
        raise ValueError("zakai_step: non-finite input")
    re, im = _k.zakai_update(model, *_k.split(np.asarray(sigma, dtype=complex)[None]),
                             np.array([float(dy)]), dt, scheme == "milstein")
    out = _k.join(re, im)[0]
    if not trace(out).real > 0:
        raise DivergenceError(
            f"unnormalized trace {trace(out).real:.3g} <= 0; dt too large for this record")
    return out


def normalize_linear(sigma: np.ndarray) -> np.ndarray:
    """Normalize an unnormalized filter state: nearest_density(sigma / tr sigma)."""
    tr = trace(sigma).real
    if not tr > 0:
        raise ValueError(f"cannot normalize: trace {tr:.3g} is not positive")
    return nearest_density(sigma / tr)


# --- whole records --------------------------------------------------------------

def run_filter(model: SystemModel, record: ObservationRecord,
               kind: FilterKind | str = FilterKind.NORMALIZED,
               scheme: str = "milstein", repair: bool = True) -> FilterTrajectory:
    """Run a filter over a whole observation record.

    The linear filter is only defined for homodyne records.  Errors raised
    inside a step carry the step index.
    """
    return run_filters(model, [record], kind, scheme, repair)[0]


def run_filters(model: SystemModel, records, kind: FilterKind | str = FilterKind.NORMALIZED,
                scheme: str = "milstein", repair: bool = True) -> list[FilterTrajectory]:
    """Run one filter over several records on the same grid, advanced together.

    Each trajectory is bitwise identical to :func:`run_filter` on its record.
    Errors carry the step and the position of the offending record.
    """
    kind = FilterKind(kind)
    _check_scheme(scheme)
    records = list(records)
    if not records:
        return []
    grid = records[0].grid
    for r in records:
        if r.detection is not model.detection:
            raise RecordError(
                f"detection mismatch: model is {model.detection.value}, "
                f"record is {r.detection.value}")
        if r.grid != grid:
            raise RecordError(f"grid mismatch: {r.grid} vs {grid}")
    detection = model.detection
    if kind is FilterKind.LINEAR and detection is not Detection.HOMODYNE:
        raise ValueError("the linear filter is only implemented for homodyne detection")

    b, n, d, dt = len(records), grid.n_steps, model.dim, grid.dt
    incs = np.stack([r.increments for r in records], axis=1)  # (n, b)
    st_re = np.empty((n + 1, d, d, b))
    st_im = np.empty((n + 1, d, d, b))
    re, im = _k.split(np.broadcast_to(model.initial_state, (b, d, d)))
    st_re[0], st_im[0] = re, im
    linear = kind is FilterKind.LINEAR
    norms = np.empty((n + 1, b)) if linear else None
    if linear:
        norms[0] = _k.trace_re(re)
    milstein = scheme == "milstein"

    def fail(exc_type, msg, bad, step):
        if b > 1:
            msg = f"{msg} in record {int(np.flatnonzero(bad)[0])}"
        raise exc_type(msg, step=step)

    with np.errstate(all="ignore"):
        for k in range(n):
            inc = incs[k]
            if linear:
                re, im = _k.zakai_update(model, re, im, inc, dt, milstein)
                tr = _k.trace_re(re)
                bad = ~(np.isfinite(re).all(axis=(0, 1)) & np.isfinite(im).all(axis=(0, 1))
                        & (tr > 0))
                if np.any(bad):
                    fail(DivergenceError, "linear filter lost positive trace", bad, k + 1)
                norms[k + 1] = tr
            else:
                if detection is Detection.HOMODYNE:
                    re, im = _k.homodyne_update(model, re, im, inc, dt, milstein)
                else:
                    re, im, impossible = _k.counting_update(model, re, im, inc, dt)
                    if np.any(impossible):
                        fail(ImpossibleJumpError, "count recorded where the model rate is zero",
                             impossible, k)
                if repair:
                    re, im, ok = _k.project(re, im)
                    bad = ~ok
                else:
                    bad = ~(np.isfinite(re).all(axis=(0, 1)) & np.isfinite(im).all(axis=(0, 1)))
                if np.any(bad):
                    fail(DivergenceError, "filter state diverged", bad, k + 1)
            st_re[k + 1], st_im[k + 1] = re, im
    states = np.empty((b, n + 1, d, d), dtype=complex)
    states.real = np.moveaxis(st_re, -1, 0)
    states.imag = np.moveaxis(st_im, -1, 0)
    return [FilterTrajectory(grid, kind, states[i], None if norms is None else norms[:, i].copy())
            for i in range(b)]


def innovations(model: SystemModel, record: ObservationRecord,
                traj: FilterTrajectory) -> np.ndarray:
    """Observation increments minus their prediction from the pre-step state.

    Homodyne: dw_k = dy_k - tr[(L + L†) rho_k] dt.
    Counting: dm_k = dN_k - tr[L† L rho_k] dt.
    """
    if traj.kind is not FilterKind.NORMALIZED:
        raise ValueError("innovations need a normalized filter trajectory")
    n = record.grid.n_steps
    if len(traj.states) != n + 1:
        raise RecordError(
            f"length mismatch: record has {n} steps, trajectory has {len(traj.states)} states")
    pre = traj.states[:-1]
    dt = record.grid.dt
    if record.detection is Detection.HOMODYNE:
        return record.increments - homodyne_drift(model, pre) * dt
    return record.increments - counting_rate(model, pre) * dt


def filter_distance(normalized: FilterTrajectory, linear: FilterTrajectory) -> np.ndarray:
    """Pointwise trace distance between a normalized and a normalized-linear trajectory."""
    if len(normalized.states) != len(linear.states):
        raise ValueError("trajectories have different lengths")
    return trace_distance(normalized.states, linear.normalized_states())

