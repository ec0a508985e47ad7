"""Dense operator algebra on a finite-dimensional system Hilbert space.

Operators are plain complex ``numpy`` arrays of shape ``(d, d)``.  Most
functions also accept stacks of shape ``(..., d, d)`` so that a batch of
trajectories can be advanced with the same arithmetic as a single state.

Basis convention for qubits: index 0 is the excited state ``|e>`` and index 1
the ground state ``|g>``, so ``sigma_z |e> = +|e>`` and ``sigma_minus``
maps ``|e>`` to ``|g>``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DimensionError, DivergenceError

MAX_DIM = 64
HERMITIAN_ATOL = 1e-10
REPAIRABLE_ATOL = 1e-6
TRACE_ATOL = 1e-10
POSITIVITY_ATOL = 1e-10

IDENTITY2 = np.eye(2, dtype=complex)
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_MINUS = np.array([[0, 0], [1, 0]], dtype=complex)
SIGMA_PLUS = np.array([[0, 1], [0, 0]], dtype=complex)
EXCITED = np.array([[1, 0], [0, 0]], dtype=complex)
GROUND = np.array([[0, 0], [0, 1]], dtype=complex)

for _a in (IDENTITY2, SIGMA_X, SIGMA_Y, SIGMA_Z, SIGMA_MINUS, SIGMA_PLUS, EXCITED, GROUND):
    _a.setflags(write=False)
del _a


class Detection(str, enum.Enum):
    HOMODYNE = "homodyne"
    COUNTING = "counting"


def as_operator(a, name: str = "operator") -> np.ndarray:
    """Validate ``a`` as a square, finite complex matrix and return a copy."""
    arr = np.array(a, dtype=complex)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 1:
        raise DimensionError(f"{name}: expected a square matrix, got shape {arr.shape}")
    if arr.shape[0] > MAX_DIM:
        raise DimensionError(f"{name}: dimension {arr.shape[0]} exceeds the cap of {MAX_DIM}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: entries must be finite")
    return arr


def _check_dims(*ops: np.ndarray) -> None:
    d = ops[0].shape[-1]
    for op in ops[1:]:
        if op.shape[-1] != d or op.shape[-2] != d:
            raise DimensionError(
                f"dimension mismatch: {ops[0].shape[-2:]} vs {op.shape[-2:]}")


def adjoint(a: np.ndarray) -> np.ndarray:
    """Conjugate transpose over the last two axes."""
    return np.conj(np.swapaxes(a, -1, -2))


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_dims(a, b)
    return a @ b - b @ a


def trace(a: np.ndarray) -> np.ndarray:
    return np.trace(a, axis1=-2, axis2=-1)


def expectation(rho: np.ndarray, x: np.ndarray) -> complex:
    """Return ``tr(rho x)``; broadcasts over leading axes of ``rho``."""
    _check_dims(rho, x)
    return trace(rho @ x)


def _is_real(a: np.ndarray) -> bool:
    return a.ndim == 2 and not np.any(a.imag)


def matmul_exact(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes built from real elementwise ufuncs.

    Unlike ``@`` (BLAS or SIMD kernels chosen by size and layout), every entry
    is rounded the same way whatever the batch shape, so a trajectory
    advanced alone reproduces its value inside a large batch bit for bit.
    Intended for the small dimensions used here.
    """
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    _check_dims(a, b)
    ar, ai, br, bi = a.real, a.imag, b.real, b.imag
    a_real, b_real = _is_real(a), _is_real(b)
    re = im = None
    for k in range(a.shape[-1]):
        xr, xi = ar[..., :, k, None], ai[..., :, k, None]
        yr, yi = br[..., None, k, :], bi[..., None, k, :]
        if a_real:
            tr, ti = xr * yr, xr * yi
        elif b_real:
            tr, ti = xr * yr, xi * yr
        else:
            tr, ti = xr * yr - xi * yi, xr * yi + xi * yr
        re, im = (tr, ti) if re is None else (re + tr, im + ti)
    out = np.empty(re.shape, dtype=complex)
    out.real = re
    out.imag = im
    return out


def trace_exact(a: np.ndarray) -> np.ndarray:
    """Trace summed strictly in index order (layout-independent rounding)."""
    t = a[..., 0, 0]
    for i in range(1, a.shape[-1]):
        t = t + a[..., i, i]
    return t


def expectation_real(rho: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Re tr(rho x) summed in a fixed order; broadcasts over stacks of ``rho``."""
    _check_dims(rho, x)
    x = np.asarray(x, dtype=complex)
    rr, ri = rho.real, rho.imag
    total = None
    d = x.shape[-1]
    for i in range(d):
        for j in range(d):
            xr, xi = x[j, i].real, x[j, i].imag
            if xr == 0 and xi == 0:
                continue
            term = rr[..., i, j] * xr - ri[..., i, j] * xi
            total = term if total is None else total + term
    if total is None:
        return np.zeros(rho.shape[:-2])
    return total


def hermiticity_error(a: np.ndarray) -> float:
    return float(np.max(np.abs(a - adjoint(a)))) if a.size else 0.0


def is_hermitian(a: np.ndarray, atol: float = HERMITIAN_ATOL) -> bool:
    return hermiticity_error(a) <= atol


def density_violations(rho: np.ndarray, atol: float = HERMITIAN_ATOL) -> list[str]:
    """List the density-matrix invariants that ``rho`` violates (empty if valid)."""
    problems = []
    herm = hermiticity_error(rho)
    if herm > atol:
        problems.append(f"not Hermitian (max deviation {herm:.3g})")
    tr = trace(rho)
    if abs(tr - 1) > TRACE_ATOL:
        problems.append(f"trace {tr.real:.12g} != 1")
    if herm <= REPAIRABLE_ATOL:
        lo = float(np.min(np.linalg.eigvalsh(0.5 * (rho + adjoint(rho)))))
        if lo < -POSITIVITY_ATOL:
            problems.append(f"not positive semidefinite (min eigenvalue {lo:.3g})")
    return problems


def is_density(rho: np.ndarray) -> bool:
    return not density_violations(rho)


def as_density(a, name: str = "state") -> np.ndarray:
    rho = as_operator(a, name)
    problems = density_violations(rho)
    if problems:
        raise ValueError(f"{name}: " + "; ".join(problems))
    return rho


def pure_state(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    return np.outer(psi, psi.conj())


def _project_qubits(h: np.ndarray):
    # closed-form eigendecomposition through the Bloch vector:
    # h = (t I + x sx + y sy + z sz) / 2 has eigenvalues (t +- |r|) / 2
    t = (h[..., 0, 0] + h[..., 1, 1]).real
    z = (h[..., 0, 0] - h[..., 1, 1]).real
    x = 2.0 * h[..., 1, 0].real
    y = 2.0 * h[..., 1, 0].imag
    r = np.sqrt(x * x + y * y + z * z)
    ok = (t + r) > 0
    # clamping the lower eigenvalue leaves the top projector scaled by (t + r) / 2
    scale = np.where(t < r, r, t)
    scale = np.where(ok, scale, 1.0)
    x, y, z = x / scale, y / scale, z / scale
    out = np.empty(h.shape, dtype=complex)
    out[..., 0, 0] = 0.5 * (1.0 + z)
    out[..., 1, 1] = 0.5 * (1.0 - z)
    out[..., 1, 0] = 0.5 * (x + 1j * y)
    out[..., 0, 1] = 0.5 * (x - 1j * y)
    return out, ok


def _project_general(h: np.ndarray):
    w, v = np.linalg.eigh(h)
    w = np.clip(w, 0.0, None)
    total = w.sum(axis=-1, keepdims=True)
    ok = total[..., 0] > 0
    w = w / np.where(total > 0, total, 1.0)
    return matmul_exact(v * w[..., None, :], adjoint(v)), ok


def project_densities(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch form of :func:`nearest_density` that flags failures instead of raising.

    Returns ``(states, ok)``; rows where ``ok`` is false (non-finite input or
    nothing left after clamping) hold unspecified values.
    """
    a = np.asarray(a, dtype=complex)
    finite = np.all(np.isfinite(a), axis=(-2, -1))
    if not np.all(finite):
        a = np.where(finite[..., None, None], a, np.eye(a.shape[-1]))
    h = 0.5 * (a + adjoint(a))
    out, ok = _project_qubits(h) if h.shape[-1] == 2 else _project_general(h)
    return out, ok & finite


def nearest_density(a: np.ndarray) -> np.ndarray:
    """Project an approximately Hermitian matrix (or stack) onto density matrices.

    Hermitize, clamp negative eigenvalues to zero and renormalize the trace.
    Qubits use a closed-form Bloch-vector eigendecomposition; larger
    dimensions go through ``numpy.linalg.eigh``.

    Raises
    ------
    ValueError
        If ``a`` is further than 1e-6 from Hermitian.
    DivergenceError
        If entries are not finite, or nothing with positive trace survives
        the clamp.
    """
    a = np.asarray(a, dtype=complex)
    if not np.all(np.isfinite(a)):
        raise DivergenceError("non-finite entries in state")
    herm = hermiticity_error(a)
    if herm >= REPAIRABLE_ATOL:
        raise ValueError(f"matrix too far from Hermitian to repair (deviation {herm:.3g})")
    out, ok = project_densities(a)
    if not np.all(ok):
        raise DivergenceError("zero trace after clamping negative eigenvalues")
    return out


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Finite-dimensional system coupled to one bosonic probe channel.

    ``hamiltonian`` carries units of frequency (hbar = 1) and ``coupling``
    (the operator L) units of sqrt(frequency).  The scattering operator of
    the system-probe coupling is fixed to the identity.
    """

    hamiltonian: np.ndarray
    coupling: np.ndarray
    initial_state: np.ndarray
    detection: Detection = Detection.HOMODYNE

    def __post_init__(self):
        h = as_operator(self.hamiltonian, "hamiltonian")
        c = as_operator(self.coupling, "coupling")
        rho = as_density(self.initial_state, "initial_state")
        _check_dims(h, c, rho)
        herm = hermiticity_error(h)
        if herm > HERMITIAN_ATOL:
            raise ValueError(f"hamiltonian: not Hermitian (max deviation {herm:.3g})")
        for arr in (h, c, rho):
            arr.setflags(write=False)
        object.__setattr__(self, "hamiltonian", h)
        object.__setattr__(self, "coupling", c)
        object.__setattr__(self, "initial_state", rho)
        object.__setattr__(self, "detection", Detection(self.detection))

    @property
    def dim(self) -> int:
        return self.hamiltonian.shape[0]

    @cached_property
    def coupling_dag(self) -> np.ndarray:
        return adjoint(self.coupling)

    @cached_property
    def coupling_sq(self) -> np.ndarray:
        """L^dagger L."""
        return self.coupling_dag @ self.coupling

    @cached_property
    def drift_generator(self) -> np.ndarray:
        """K = -iH - L†L/2, so that L*(rho) = K rho + rho K† + L rho L†."""
        return -1j * self.hamiltonian - 0.5 * self.coupling_sq

    def with_detection(self, detection) -> SystemModel:
        return SystemModel(self.hamiltonian, self.coupling, self.initial_state, detection)


def lindblad_heisenberg(model: SystemModel, x: np.ndarray) -> np.ndarray:
    """Heisenberg-picture generator i[H,X] + L†XL - (L†L X + X L†L)/2."""
    _check_dims(model.hamiltonian, x)
    h, c, cd, csq = model.hamiltonian, model.coupling, model.coupling_dag, model.coupling_sq
    return 1j * (h @ x - x @ h) + cd @ x @ c - 0.5 * (csq @ x + x @ csq)


def lindblad_schrodinger(model: SystemModel, rho: np.ndarray) -> np.ndarray:
    """Trace-dual generator -i[H,rho] + L rho L† - (L†L rho + rho L†L)/2.

    Accepts a single matrix or a stack of them.
    """
    _check_dims(model.hamiltonian, rho)
    h, c, cd, csq = model.hamiltonian, model.coupling, model.coupling_dag, model.coupling_sq
    return -1j * (h @ rho - rho @ h) + c @ rho @ cd - 0.5 * (csq @ rho + rho @ csq)


def trace_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Half the trace norm of ``a - b`` (both Hermitian); broadcasts over stacks."""
    w = np.linalg.eigvalsh(a - b)
    return 0.5 * np.abs(w).sum(axis=-1)


def named_observable(name: str, dim: int) -> np.ndarray:
    """Resolve ``sigma_x|sigma_y|sigma_z`` (qubits) or ``population_k``."""
    paulis = {"sigma_x": SIGMA_X, "sigma_y": SIGMA_Y, "sigma_z": SIGMA_Z}
    if name in paulis:
        if dim != 2:
            raise DimensionError(f"{name} is only defined for dim 2 (got {dim})")
        return paulis[name].copy()
    if name.startswith("population_"):
        try:
            k = int(name[len("population_"):])
        except ValueError:
            raise ValueError(f"bad observable name {name!r}") from None
        if not 0 <= k < dim:
            raise DimensionError(f"{name}: level {k} out of range for dim {dim}")
        p = np.zeros((dim, dim), dtype=complex)
        p[k, k] = 1.0
        return p
    raise ValueError(f"unknown observable {name!r}")
