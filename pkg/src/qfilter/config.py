"""Scenario configuration files.

The format is TOML restricted to flat dotted keys and inline arrays.  A
scenario either names a preset::

    preset = "rabi-decay"
    params.gamma = 1.0
    params.omega = 2.0

or spells the model out, with complex entries as ``[re, im]`` pairs (a bare
number means a real entry) listed row by row::

    model.dim = 2
    model.H = [0, [0.5, 0], [0.5, 0], 0]
    model.L = [0, 0, 1, 0]
    model.rho0 = [1, 0, 0, 0]

Both forms share ``detection``, ``grid.*``, ``n_traj``, ``master_seed``,
``observables`` and the optional ``output.*`` / ``run.*`` keys; see the
README for an annotated example.  Every problem found is reported, each
prefixed with the path of the offending key.
"""

from __future__ import annotations

import math
import re
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .master import TimeGrid
from .operators import (
    EXCITED,
    GROUND,
    IDENTITY2,
    MAX_DIM,
    SIGMA_MINUS,
    SIGMA_X,
    Detection,
    SystemModel,
    density_violations,
    hermiticity_error,
    named_observable,
)
from .simulator import MASK64, MAX_RATE_DT

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PRESETS = {
    "qubit-decay": {"gamma": 1.0},
    "rabi-decay": {"gamma": 1.0, "omega": 2.0},
    "constant-rate-counting": {"lambda": 0.5},
}

_TOP_KEYS = {"preset", "params", "model", "detection", "grid", "n_traj", "master_seed",
             "observables", "output", "run"}
_SECTION_KEYS = {
    "model": {"dim", "H", "L", "rho0"},
    "grid": {"t0", "dt", "n_steps"},
    "output": {"records", "plots"},
    "run": {"workers", "scheme"},
}


def preset_model(name: str, params: dict[str, float], detection) -> SystemModel:
    """Build one of the named qubit scenarios.

    * ``qubit-decay``: H = 0, L = sqrt(gamma) sigma_-, rho0 = |e><e|.
    * ``rabi-decay``: H = (omega/2) sigma_x, L = sqrt(gamma) sigma_-, rho0 = |g><g|.
    * ``constant-rate-counting``: H = 0, L = sqrt(lambda) I, rho0 = |e><e|.
    """
    p = {**PRESETS[name], **params}
    zero = np.zeros((2, 2), dtype=complex)
    if name == "qubit-decay":
        return SystemModel(zero, math.sqrt(p["gamma"]) * SIGMA_MINUS, EXCITED, detection)
    if name == "rabi-decay":
        return SystemModel(0.5 * p["omega"] * SIGMA_X, math.sqrt(p["gamma"]) * SIGMA_MINUS,
                           GROUND, detection)
    return SystemModel(zero, math.sqrt(p["lambda"]) * IDENTITY2, EXCITED, detection)


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    model: SystemModel
    grid: TimeGrid
    n_traj: int
    master_seed: int
    observables: dict[str, np.ndarray]
    preset: str | None = None
    params: dict[str, float] = field(default_factory=dict)
    observable_specs: dict[str, object] = field(default_factory=dict)
    records: int = 10
    plots: bool = True
    workers: int = 1
    scheme: str = "milstein"

    @property
    def detection(self) -> Detection:
        return self.model.detection

    def with_seed(self, seed: int) -> ScenarioConfig:
        if not 0 <= seed <= MASK64:
            raise ConfigError([f"--seed: must be an unsigned 64-bit integer (got {seed})"])
        return replace(self, master_seed=int(seed))

    def echo(self) -> dict:
        """Plain, deterministic description of the scenario for summaries."""
        out: dict = {}
        if self.preset is not None:
            out["preset"] = self.preset
            out["params"] = {k: float(v) for k, v in sorted({**PRESETS[self.preset],
                                                               **self.params}.items())}
        else:
            out["model"] = {
                "dim": self.model.dim,
                "H": _entries(self.model.hamiltonian),
                "L": _entries(self.model.coupling),
                "rho0": _entries(self.model.initial_state),
            }
        out["detection"] = self.detection.value
        out["grid"] = {"t0": self.grid.t0, "dt": self.grid.dt, "n_steps": self.grid.n_steps}
        out["n_traj"] = self.n_traj
        out["master_seed"] = self.master_seed
        out["observables"] = {name: (spec if isinstance(spec, str) else _entries(self.observables[name]))
                              for name, spec in self.observable_specs.items()}
        out["scheme"] = self.scheme
        return out


def _entries(a: np.ndarray) -> list:
    return [[float(z.real), float(z.imag)] for z in np.asarray(a).ravel()]


# --- parsing --------------------------------------------------------------

def _syntax_error(exc) -> str:
    line = getattr(exc, "lineno", None)
    msg = getattr(exc, "msg", str(exc))
    if line is None:
        m = re.search(r"line (\d+)", str(exc))
        line = int(m.group(1)) if m else "?"
    return f"syntax error at line {line}: {msg}"


def _number(v, path, errors, integer=False, positive=False, nonneg=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        errors.append(f"{path}: expected a number (got {v!r})")
        return None
    if integer and not isinstance(v, int):
        errors.append(f"{path}: expected an integer (got {v!r})")
        return None
    if not math.isfinite(v):
        errors.append(f"{path}: must be finite (got {v!r})")
        return None
    if positive and not v > 0:
        errors.append(f"{path}: must be positive (got {v!r})")
        return None
    if nonneg and v < 0:
        errors.append(f"{path}: must be nonnegative (got {v!r})")
        return None
    return v


def _matrix(v, dim, path, errors):
    if not isinstance(v, list):
        errors.append(f"{path}: expected a list of {dim * dim} entries")
        return None
    if dim is not None and len(v) != dim * dim:
        errors.append(f"{path}: expected {dim * dim} entries for dim {dim}, found {len(v)}")
        return None
    out = np.empty(len(v), dtype=complex)
    ok = True
    for i, e in enumerate(v):
        if isinstance(e, list) and len(e) == 2 and all(
                isinstance(c, (int, float)) and not isinstance(c, bool) for c in e):
            out[i] = complex(e[0], e[1])
        elif isinstance(e, (int, float)) and not isinstance(e, bool):
            out[i] = complex(e)
        else:
            errors.append(f"{path}[{i}]: expected a number or [re, im] pair (got {e!r})")
            ok = False
    if not ok:
        return None
    if not np.all(np.isfinite(out)):
        errors.append(f"{path}: entries must be finite")
        return None
    return out.reshape(dim, dim)


def _unknown_keys(doc, errors):
    for key, val in doc.items():
        if key not in _TOP_KEYS:
            errors.append(f"{key}: unknown key")
        elif key in _SECTION_KEYS:
            if not isinstance(val, dict):
                errors.append(f"{key}: expected dotted keys {key}.<name>")
                continue
            for sub in val:
                if sub not in _SECTION_KEYS[key]:
                    errors.append(f"{key}.{sub}: unknown key")


def _parse_model(doc, detection, errors):
    """Return (model, preset, params) or Nones after recording errors."""
    has_preset, has_model = "preset" in doc, "model" in doc
    if has_preset == has_model:
        errors.append("preset/model: exactly one of 'preset' or 'model.*' is required")
        return None, None, {}
    if has_preset:
        name = doc["preset"]
        if name not in PRESETS:
            errors.append(f"preset: unknown preset {name!r} (expected one of {sorted(PRESETS)})")
            return None, None, {}
        raw = doc.get("params", {})
        if not isinstance(raw, dict):
            errors.append("params: expected dotted keys params.<name>")
            return None, name, {}
        params = {}
        for k, v in raw.items():
            if k not in PRESETS[name]:
                errors.append(f"params.{k}: not a parameter of {name} "
                              f"(expected {sorted(PRESETS[name])})")
                continue
            x = _number(v, f"params.{k}", errors, nonneg=True)
            if x is not None:
                params[k] = float(x)
        if detection is None or len(errors):
            return None, name, params
        return preset_model(name, params, detection), name, params

    if "params" in doc:
        errors.append("params: only valid together with a preset")
    m = doc["model"] if isinstance(doc["model"], dict) else {}
    dim = None
    if "dim" not in m:
        errors.append("model.dim: required")
    else:
        dim = _number(m["dim"], "model.dim", errors, integer=True, positive=True)
        if dim is not None and dim > MAX_DIM:
            errors.append(f"model.dim: at most {MAX_DIM} (got {dim})")
            dim = None
    mats = {}
    for key in ("H", "L", "rho0"):
        if key not in m:
            errors.append(f"model.{key}: required")
        elif dim is not None:
            mats[key] = _matrix(m[key], dim, f"model.{key}", errors)
    h, rho = mats.get("H"), mats.get("rho0")
    if h is not None:
        dev = hermiticity_error(h)
        if dev > 1e-10:
            errors.append(f"model.H: not Hermitian (max |H - H†| = {dev:.3g})")
    if rho is not None:
        for v in density_violations(rho):
            errors.append(f"model.rho0: {v}")
    if detection is None or len(errors) or dim is None:
        return None, None, {}
    return SystemModel(mats["H"], mats["L"], mats["rho0"], detection), None, {}


def _parse_observables(raw, dim, errors):
    if raw is None:
        raw = ["sigma_z"] if dim == 2 else [f"population_{k}" for k in range(dim)]
    if isinstance(raw, list):
        raw = {name: name for name in raw} if all(isinstance(n, str) for n in raw) else raw
    if not isinstance(raw, dict):
        errors.append("observables: expected a list of names or observables.<name> = ...")
        return {}, {}
    ops, specs = {}, {}
    for name, spec in raw.items():
        path = f"observables.{name}"
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", name):
            errors.append(f"{path}: names must be identifiers")
            continue
        if isinstance(spec, str):
            try:
                x = named_observable(spec, dim)
            except ValueError as exc:
                errors.append(f"{path}: {exc}")
                continue
        else:
            x = _matrix(spec, dim, path, errors)
            if x is None:
                continue
            dev = hermiticity_error(x)
            if dev > 1e-10:
                errors.append(f"{path}: not Hermitian (max |X - X†| = {dev:.3g})")
                continue
        ops[name], specs[name] = x, spec
    if not ops and not errors:
        errors.append("observables: at least one observable is required")
    return ops, specs


def parse_config(text: str) -> ScenarioConfig:
    """Parse and validate a scenario; raises :class:`ConfigError` listing every problem."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([_syntax_error(exc)]) from None
    errors: list[str] = []
    _unknown_keys(doc, errors)

    detection = None
    if "detection" not in doc:
        errors.append("detection: required")
    else:
        try:
            detection = Detection(doc["detection"])
        except ValueError:
            errors.append(f"detection: expected 'homodyne' or 'counting' (got {doc['detection']!r})")

    model, preset, params = _parse_model(doc, detection, errors)
    dim = model.dim if model is not None else (2 if "preset" in doc else None)
    if dim is None and isinstance(doc.get("model"), dict):
        d = doc["model"].get("dim")
        dim = d if isinstance(d, int) and not isinstance(d, bool) and 0 < d <= MAX_DIM else None

    g = doc.get("grid", {}) if isinstance(doc.get("grid"), dict) else {}
    t0 = _number(g.get("t0", 0.0), "grid.t0", errors)
    dt = n_steps = None
    for key in ("dt", "n_steps"):
        if key not in g:
            errors.append(f"grid.{key}: required")
    if "dt" in g:
        dt = _number(g["dt"], "grid.dt", errors, positive=True)
    if "n_steps" in g:
        n_steps = _number(g["n_steps"], "grid.n_steps", errors, integer=True, positive=True)

    n_traj = None
    if "n_traj" not in doc:
        errors.append("n_traj: required")
    else:
        n_traj = _number(doc["n_traj"], "n_traj", errors, integer=True, positive=True)
    seed = None
    if "master_seed" not in doc:
        errors.append("master_seed: required")
    else:
        seed = _number(doc["master_seed"], "master_seed", errors, integer=True, nonneg=True)
        if seed is not None and seed > MASK64:
            errors.append(f"master_seed: must fit in 64 bits (got {seed})")

    ops, specs = ({}, {})
    if dim is not None:
        ops, specs = _parse_observables(doc.get("observables"), dim, errors)

    out = doc.get("output", {}) if isinstance(doc.get("output"), dict) else {}
    records = None
    if "records" in out:
        records = _number(out["records"], "output.records", errors, integer=True, nonneg=True)
    plots = out.get("plots", True)
    if not isinstance(plots, bool):
        errors.append(f"output.plots: expected true or false (got {plots!r})")
    run = doc.get("run", {}) if isinstance(doc.get("run"), dict) else {}
    workers = _number(run.get("workers", 1), "run.workers", errors, integer=True, positive=True)
    scheme = run.get("scheme", "milstein")
    if scheme not in ("milstein", "euler"):
        errors.append(f"run.scheme: expected 'milstein' or 'euler' (got {scheme!r})")

    grid = None
    if t0 is not None and dt is not None and n_steps is not None:
        try:
            grid = TimeGrid(float(t0), float(dt), int(n_steps))
        except ValueError as exc:
            errors.append(f"grid: {exc}")
    if model is not None and grid is not None and model.detection is Detection.COUNTING:
        top = float(np.max(np.linalg.eigvalsh(model.coupling_sq)))
        if top * grid.dt > MAX_RATE_DT:
            errors.append(f"grid.dt: max count rate * dt = {top * grid.dt:.3g} exceeds "
                          f"{MAX_RATE_DT}; reduce dt")
    if records is not None and n_traj is not None and records > n_traj:
        errors.append(f"output.records: {records} exceeds n_traj = {n_traj}")

    if errors:
        raise ConfigError(errors)
    if records is None:
        records = min(10, n_traj)
    return ScenarioConfig(model, grid, int(n_traj), int(seed), ops, preset, params, specs,
                          int(records), plots, int(workers), scheme)


def load_config(path) -> ScenarioConfig:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError([f"config: cannot read {path}: {exc.strerror}"]) from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError([f"config: not valid UTF-8 ({exc.reason} at byte {exc.start})"]) from None
    return parse_config(text)
