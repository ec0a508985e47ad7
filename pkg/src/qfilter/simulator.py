"""Self-consistent quantum trajectory simulation and ensemble statistics.

The conditional state is simulated in its innovations representation: at
each step the observation increment is drawn from its predicted law given the
current conditional state, and the filter is advanced with that increment.

Trajectory ``i`` draws all of its randomness from a Philox4x64-10 stream keyed
by ``derive_seed(master_seed, i)``.  Trajectories are processed in chunks of
fixed size; chunk partial sums are combined in chunk order, so results do not
depend on how many worker processes run the chunks.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _kernels as _k
from .errors import DivergenceError
from .filters import (
    FilterKind,
    FilterTrajectory,
    ObservationRecord,
)
from .master import StateTrajectory, TimeGrid
from .operators import (
    Detection,
    SystemModel,
    as_operator,
    expectation_real,
    hermiticity_error,
    project_densities,
)

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
INDEX_SALT = 0x632BE59BD9B4E019
MAX_RATE_DT = 0.1
MAX_DIVERGED_FRACTION = 1e-3
DEFAULT_CHUNK = 1000


def _mix64(z: int) -> int:
    # SplitMix64 finalizer (Stafford "Mix13" constants)
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, index: int) -> int:
    """Per-trajectory 64-bit seed.

    ``mix64(mix64(master ^ (index * GOLDEN_GAMMA + INDEX_SALT)))`` modulo 2**64.
    Each stage is a bijection on 64-bit words, so distinct indices below
    2**64 always give distinct seeds for a fixed master seed, and vice versa.
    """
    if not (0 <= master_seed <= MASK64 and 0 <= index <= MASK64):
        raise ValueError("master_seed and index must be unsigned 64-bit integers")
    x = master_seed ^ ((index * GOLDEN_GAMMA + INDEX_SALT) & MASK64)
    return _mix64(_mix64(x))


def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_seed(master_seed, index)))


@dataclass(frozen=True, eq=False)
class SimulationSpec:
    model: SystemModel
    grid: TimeGrid
    n_traj: int
    master_seed: int
    observables: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (isinstance(self.n_traj, (int, np.integer)) and self.n_traj >= 1):
            raise ValueError(f"n_traj must be a positive integer, got {self.n_traj!r}")
        if not 0 <= self.master_seed <= MASK64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")
        obs = {}
        for name, x in self.observables.items():
            x = as_operator(x, f"observable {name}")
            if x.shape[0] != self.model.dim:
                raise ValueError(f"observable {name}: dim {x.shape[0]} != model dim {self.model.dim}")
            if hermiticity_error(x) > 1e-10:
                raise ValueError(f"observable {name}: not Hermitian")
            obs[name] = x
        object.__setattr__(self, "observables", obs)


@dataclass
class _Chunk:
    """Raw output of simulating a contiguous block of trajectories."""

    indices: np.ndarray
    increments: np.ndarray            # (b, n)
    noise: np.ndarray | None          # (b, n), homodyne only
    obs: np.ndarray                   # (b, n + 1, n_obs)
    states: np.ndarray | None         # (b, n + 1, d, d) when kept
    state_sum: np.ndarray             # (n + 1, d, d), all rows
    diverged_at: np.ndarray           # (b,), -1 when fine


def _check_rate_bound(model: SystemModel, dt: float):
    top = float(np.max(np.linalg.eigvalsh(model.coupling_sq)))
    if top * dt > MAX_RATE_DT:
        raise ValueError(
            f"max count rate * dt = {top * dt:.3g} exceeds {MAX_RATE_DT}; reduce dt")


def _simulate_chunk(spec: SimulationSpec, indices: np.ndarray, keep_states: bool,
                    scheme: str) -> _Chunk:
    model, grid = spec.model, spec.grid
    n, dt, d, b = grid.n_steps, grid.dt, model.dim, len(indices)
    homodyne = model.detection is Detection.HOMODYNE
    obs_ops = list(spec.observables.values())

    gens = [trajectory_rng(spec.master_seed, int(i)) for i in indices]
    if homodyne:
        draws = np.stack([g.standard_normal(n) for g in gens]) * math.sqrt(dt)
    else:
        draws = np.stack([g.random(n) for g in gens])

    re, im = _k.split(np.broadcast_to(model.initial_state, (b, d, d)))
    increments = np.empty((b, n))
    noise = np.empty((b, n)) if homodyne else None
    obs = np.empty((b, n + 1, len(obs_ops)))
    st_re = np.empty((n + 1, d, d, b)) if keep_states else None
    st_im = np.empty((n + 1, d, d, b)) if keep_states else None
    state_sum = np.empty((n + 1, d, d), dtype=complex)
    diverged_at = np.full(b, -1)
    alive = np.ones(b, dtype=bool)
    milstein = scheme == "milstein"

    def record_state(k, re, im):
        for j, x in enumerate(obs_ops):
            obs[:, k, j] = _k.expect(re, im, x)
        if keep_states:
            st_re[k], st_im[k] = re, im
        state_sum[k].real = re.sum(axis=-1)
        state_sum[k].imag = im.sum(axis=-1)

    record_state(0, re, im)
    with np.errstate(all="ignore"):
        for k in range(n):
            if homodyne:
                drift = _k.homodyne_drift(model, re, im) * dt
                dy = drift + draws[:, k]
                nre, nim = _k.homodyne_update(model, re, im, dy, dt, milstein)
                noise[:, k] = dy - drift
                increments[:, k] = dy
            else:
                p = _k.counting_rate(model, re, im) * dt
                if np.any(p[alive] > 1):
                    raise ValueError(
                        f"count probability {p.max():.3g} > 1 at step {k}; reduce dt")
                dn = (draws[:, k] < p).astype(float)
                nre, nim, _ = _k.counting_update(model, re, im, dn, dt)
                increments[:, k] = dn
            nre, nim, ok = _k.project(nre, nim)
            fresh = alive & ~ok
            if np.any(fresh):
                for i in np.flatnonzero(fresh):
                    log.warning("trajectory %d diverged at step %d", indices[i], k + 1)
                diverged_at[fresh] = k + 1
                alive &= ok
                nre = np.where(alive, nre, re)
                nim = np.where(alive, nim, im)
            re, im = nre, nim
            record_state(k + 1, re, im)
    states = None
    if keep_states:
        states = np.empty((b, n + 1, d, d), dtype=complex)
        states.real = np.moveaxis(st_re, -1, 0)
        states.imag = np.moveaxis(st_im, -1, 0)
    return _Chunk(indices, increments, noise, obs, states, state_sum, diverged_at)


def _chunk_bounds(indices: np.ndarray, chunk_size: int):
    return [indices[i:i + chunk_size] for i in range(0, len(indices), chunk_size)]


def _run_chunks(spec, indices, keep_states, scheme, workers, chunk_size):
    chunks = _chunk_bounds(np.asarray(indices, dtype=np.int64), chunk_size)
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            yield from pool.map(_simulate_chunk, [spec] * len(chunks), chunks,
                                [keep_states] * len(chunks), [scheme] * len(chunks))
    else:
        for c in chunks:
            yield _simulate_chunk(spec, c, keep_states, scheme)


def _unpack(spec: SimulationSpec, chunk: _Chunk):
    out = []
    kind = FilterKind.NORMALIZED
    for r, i in enumerate(chunk.indices):
        rec = ObservationRecord(spec.grid, spec.model.detection, chunk.increments[r],
                                master_seed=spec.master_seed, traj_index=int(i))
        div = int(chunk.diverged_at[r])
        traj = FilterTrajectory(
            spec.grid, kind, chunk.states[r],
            noise=None if chunk.noise is None else chunk.noise[r],
            diverged_at=None if div < 0 else div)
        out.append((rec, traj))
    return out


def simulate(spec: SimulationSpec, indices=None, workers: int = 1, scheme: str = "milstein",
             chunk_size: int = DEFAULT_CHUNK) -> list[tuple[ObservationRecord, FilterTrajectory]]:
    """Simulate trajectories ``indices`` (default ``range(n_traj)``) of ``spec``.

    Dispatches on the model's detection type.  Diverged trajectories stay in
    the list with ``diverged_at`` set.
    """
    if spec.model.detection is Detection.COUNTING:
        _check_rate_bound(spec.model, spec.grid.dt)
    if indices is None:
        indices = range(spec.n_traj)
    out = []
    for chunk in _run_chunks(spec, list(indices), True, scheme, workers, chunk_size):
        out.extend(_unpack(spec, chunk))
    return out


class RecordBatch(NamedTuple):
    increments: np.ndarray          # (n_traj, n_steps)
    noise: np.ndarray | None        # (n_traj, n_steps), homodyne only
    observables: np.ndarray         # (n_traj, n_steps + 1, n_obs)
    diverged_at: np.ndarray         # (n_traj,), -1 when fine


def simulate_increments(spec: SimulationSpec, workers: int = 1, scheme: str = "milstein",
                        chunk_size: int = DEFAULT_CHUNK) -> RecordBatch:
    """Observation increments and tracked observables without keeping the states.

    Row ``i`` holds the record :func:`simulate` would give for trajectory
    ``i``; ``noise`` is the Wiener increments the filter consumed.
    """
    if spec.model.detection is Detection.COUNTING:
        _check_rate_bound(spec.model, spec.grid.dt)
    chunks = list(_run_chunks(spec, np.arange(spec.n_traj), False, scheme, workers, chunk_size))
    return RecordBatch(
        np.concatenate([c.increments for c in chunks]),
        None if chunks[0].noise is None else np.concatenate([c.noise for c in chunks]),
        np.concatenate([c.obs for c in chunks]),
        np.concatenate([c.diverged_at for c in chunks]))


def simulate_homodyne(spec: SimulationSpec, **kwargs):
    """Homodyne trajectories: dy_k = tr[(L + L†) rho_k] dt + dW_k, dW_k ~ N(0, dt).

    ``FilterTrajectory.noise`` holds the Wiener increments exactly as the
    filter consumed them (dy_k minus the predicted drift).
    """
    if spec.model.detection is not Detection.HOMODYNE:
        raise ValueError("simulate_homodyne needs a homodyne model")
    return simulate(spec, **kwargs)


def simulate_counting(spec: SimulationSpec, **kwargs):
    """Counting trajectories with dN_k ~ Bernoulli(tr[L† L rho_k] dt)."""
    if spec.model.detection is not Detection.COUNTING:
        raise ValueError("simulate_counting needs a counting model")
    return simulate(spec, **kwargs)


@dataclass(frozen=True, eq=False)
class EnsembleResult:
    mean_states: StateTrajectory
    observable_means: dict[str, np.ndarray]
    observable_stderr: dict[str, np.ndarray]
    n_used: int
    diverged: list[tuple[int, int]]  # (trajectory index, step)
    records: list[tuple[ObservationRecord, FilterTrajectory]] = field(default_factory=list)

    @property
    def diverged_fraction(self) -> float:
        total = self.n_used + len(self.diverged)
        return len(self.diverged) / total if total else 0.0


class _Accumulator:
    def __init__(self, grid: TimeGrid, dim: int, names: list[str]):
        self.grid = grid
        self.names = names
        self.state_sum = np.zeros((grid.n_steps + 1, dim, dim), dtype=complex)
        self.mean = np.zeros((grid.n_steps + 1, len(names)))
        self.m2 = np.zeros((grid.n_steps + 1, len(names)))
        self.n = 0
        self.diverged: list[tuple[int, int]] = []

    def add(self, indices, obs, state_sum, diverged_at):
        ok = diverged_at < 0
        for i, step in zip(indices[~ok], diverged_at[~ok]):
            self.diverged.append((int(i), int(step)))
        good = obs[ok]
        self.state_sum += state_sum
        nb = len(good)
        if nb == 0:
            return
        # centred sums merged chunk by chunk, so a zero spread gives exactly zero
        mean_b = good.sum(axis=0) / nb
        m2_b = ((good - mean_b) ** 2).sum(axis=0)
        n = self.n + nb
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + m2_b + delta * delta * (self.n * nb / n)
        self.n = n

    def result(self, records) -> EnsembleResult:
        if self.n == 0:
            raise DivergenceError("every trajectory diverged")
        mean = self.mean
        if self.n > 1:
            err = np.sqrt(self.m2 / (self.n - 1) / self.n)
        else:
            err = np.zeros_like(mean)
        states, _ = project_densities(self.state_sum / self.n)
        return EnsembleResult(
            StateTrajectory(self.grid, states),
            {name: mean[:, j] for j, name in enumerate(self.names)},
            {name: err[:, j] for j, name in enumerate(self.names)},
            self.n, self.diverged, records)


def simulate_ensemble(spec: SimulationSpec, workers: int = 1, keep_records: int = 0,
                      scheme: str = "milstein", chunk_size: int = DEFAULT_CHUNK) -> EnsembleResult:
    """Stream all ``n_traj`` trajectories into ensemble means without storing them.

    The first ``keep_records`` trajectories are returned in full.  Raises
    :class:`DivergenceError` when more than 0.1% of trajectories diverge.
    """
    if spec.model.detection is Detection.COUNTING:
        _check_rate_bound(spec.model, spec.grid.dt)
    acc = _Accumulator(spec.grid, spec.model.dim, list(spec.observables))
    kept = []
    indices = np.arange(spec.n_traj)
    for chunk in _run_chunks(spec, indices, keep_records > len(kept), scheme, workers, chunk_size):
        if len(kept) < keep_records:
            kept.extend(_unpack(spec, chunk)[:keep_records - len(kept)])
        bad = chunk.diverged_at >= 0
        state_sum = chunk.state_sum
        if np.any(bad):
            # trajectories do not interact, so rerunning the survivors reproduces them exactly
            survivors = chunk.indices[~bad]
            state_sum = (_simulate_chunk(spec, survivors, False, scheme).state_sum
                         if len(survivors) else np.zeros_like(state_sum))
        acc.add(chunk.indices, chunk.obs, state_sum, chunk.diverged_at)
    result = acc.result(kept)
    if result.diverged_fraction > MAX_DIVERGED_FRACTION:
        raise DivergenceError(
            f"{len(result.diverged)} of {spec.n_traj} trajectories diverged "
            f"(limit {MAX_DIVERGED_FRACTION:.1%})")
    return result


def ensemble_average(results, observables: dict[str, np.ndarray] | None = None,
                     chunk_size: int = DEFAULT_CHUNK) -> EnsembleResult:
    """Average a list of ``(record, trajectory)`` pairs.

    Diverged trajectories are excluded and listed.  Standard errors are the
    sample standard deviation over sqrt(n); zero for a single trajectory.
    """
    results = list(results)
    if not results:
        raise ValueError("no trajectories to average")
    grid = results[0][1].grid
    for _, traj in results:
        if traj.grid != grid:
            raise ValueError(f"grid mismatch: {traj.grid} vs {grid}")
    observables = observables or {}
    dim = results[0][1].states.shape[-1]
    acc = _Accumulator(grid, dim, list(observables))
    for start in range(0, len(results), chunk_size):
        part = results[start:start + chunk_size]
        states = np.stack([t.normalized_states() for _, t in part])
        obs = np.empty((len(part), grid.n_steps + 1, len(observables)))
        for j, x in enumerate(observables.values()):
            obs[:, :, j] = expectation_real(states, x)
        div = np.array([-1 if t.diverged_at is None else t.diverged_at for _, t in part])
        idx = np.array([start + r if rec.traj_index is None else rec.traj_index
                        for r, (rec, _) in enumerate(part)])
        state_sum = np.where((div < 0)[:, None, None, None], states, 0).sum(axis=0)
        acc.add(idx, obs, state_sum, div)
    return acc.result([])
