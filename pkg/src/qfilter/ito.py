"""Quantum Ito calculus with numeric operator coefficients.

An :class:`ItoExpression` is a finite sum ``sum_b C_b * b`` where ``b`` runs
over the unit and the fundamental increments dt, dA, dA† and dΛ, and the
coefficients ``C_b`` are system operators.  Coefficients are adapted, so they
commute with the forward increments and a product of two terms is
``(C1 C2) * (b1 b2)`` with ``b1 b2`` taken from the Ito table.

The system-probe unitary U is never stored: an expression ``E`` stands for the
differential ``dU = E U`` (a coefficient bundle acting on U from the left).
"""

from __future__ import annotations

import enum
import itertools

import numpy as np

from .errors import DimensionError
from .operators import SystemModel, adjoint, lindblad_heisenberg


class Basis(enum.Enum):
    UNIT = "1"
    DT = "dt"
    DA = "dA"
    DA_DAG = "dA†"
    DLAMBDA = "dΛ"


INCREMENTS = (Basis.DT, Basis.DA, Basis.DA_DAG, Basis.DLAMBDA)

# Vacuum Ito table: (left, right) -> (coefficient, product).  Products not
# listed vanish.  Tests patch this dict to check that the derivations notice.
ITO_TABLE: dict[tuple[Basis, Basis], tuple[complex, Basis]] = {
    (Basis.DA, Basis.DA_DAG): (1.0, Basis.DT),
    (Basis.DA, Basis.DLAMBDA): (1.0, Basis.DA),
    (Basis.DLAMBDA, Basis.DA_DAG): (1.0, Basis.DA_DAG),
    (Basis.DLAMBDA, Basis.DLAMBDA): (1.0, Basis.DLAMBDA),
}

_ADJOINT_BASIS = {
    Basis.UNIT: Basis.UNIT,
    Basis.DT: Basis.DT,
    Basis.DA: Basis.DA_DAG,
    Basis.DA_DAG: Basis.DA,
    Basis.DLAMBDA: Basis.DLAMBDA,
}


def ito_table(a: Basis, b: Basis) -> tuple[complex, Basis] | None:
    """Product of two fundamental increments as ``(coefficient, increment)``.

    Returns ``None`` when the product vanishes.
    """
    if a is Basis.UNIT or b is Basis.UNIT:
        raise ValueError("ito_table is defined on increments only")
    return ITO_TABLE.get((a, b))


def _basis_product(a: Basis, b: Basis) -> tuple[complex, Basis] | None:
    if a is Basis.UNIT:
        return 1.0, b
    if b is Basis.UNIT:
        return 1.0, a
    return ito_table(a, b)


class ItoExpression:
    """Immutable formal sum of operator coefficients times increments."""

    __slots__ = ("_terms", "_dim")

    def __init__(self, terms=None, dim=None):
        clean = {}
        for basis, coef in (terms or {}).items():
            coef = np.array(coef, dtype=complex)
            if coef.ndim != 2 or coef.shape[0] != coef.shape[1]:
                raise DimensionError(f"coefficient of {basis.value} is not square: {coef.shape}")
            if not np.all(np.isfinite(coef)):
                raise ValueError(f"coefficient of {basis.value} is not finite")
            if dim is None:
                dim = coef.shape[0]
            elif coef.shape[0] != dim:
                raise DimensionError(f"coefficient dims differ: {coef.shape[0]} vs {dim}")
            if np.any(coef):
                coef.setflags(write=False)
                clean[Basis(basis)] = coef
        self._terms = clean
        self._dim = dim

    @classmethod
    def term(cls, coef, basis: Basis) -> ItoExpression:
        return cls({basis: coef})

    @property
    def dim(self) -> int | None:
        return self._dim

    @property
    def terms(self) -> dict[Basis, np.ndarray]:
        return dict(self._terms)

    def coefficient(self, basis: Basis) -> np.ndarray:
        if basis in self._terms:
            return self._terms[basis]
        if self._dim is None:
            raise ValueError("empty expression has no dimension")
        return np.zeros((self._dim, self._dim), dtype=complex)

    def __bool__(self):
        return bool(self._terms)

    def __len__(self):
        return len(self._terms)

    def _merge_dim(self, other: ItoExpression) -> int | None:
        if self._dim is not None and other._dim is not None and self._dim != other._dim:
            raise DimensionError(f"dimension mismatch: {self._dim} vs {other._dim}")
        return self._dim if self._dim is not None else other._dim

    def __add__(self, other: ItoExpression) -> ItoExpression:
        if not isinstance(other, ItoExpression):
            return NotImplemented
        dim = self._merge_dim(other)
        out = dict(self._terms)
        for b, c in other._terms.items():
            out[b] = out[b] + c if b in out else c
        return ItoExpression(out, dim)

    def __neg__(self) -> ItoExpression:
        return ItoExpression({b: -c for b, c in self._terms.items()}, self._dim)

    def __sub__(self, other: ItoExpression) -> ItoExpression:
        if not isinstance(other, ItoExpression):
            return NotImplemented
        return self + (-other)

    def __mul__(self, other):
        if isinstance(other, ItoExpression):
            return expr_mul(self, other)
        if np.isscalar(other):
            return ItoExpression({b: other * c for b, c in self._terms.items()}, self._dim)
        return NotImplemented

    def __rmul__(self, other):
        if np.isscalar(other):
            return self * other
        return NotImplemented

    def adjoint(self) -> ItoExpression:
        """Conjugate coefficients and swap dA with dA†; dt and dΛ are self-adjoint."""
        return ItoExpression(
            {_ADJOINT_BASIS[b]: adjoint(c) for b, c in self._terms.items()}, self._dim)

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(c))) for c in self._terms.values()), default=0.0)

    def pruned(self, atol: float) -> ItoExpression:
        return ItoExpression(
            {b: c for b, c in self._terms.items() if np.max(np.abs(c)) > atol}, self._dim)

    def is_zero(self, atol: float = 1e-12) -> bool:
        return self.max_abs() <= atol

    def allclose(self, other: ItoExpression, atol: float = 1e-12) -> bool:
        return (self - other).is_zero(atol)

    def __repr__(self):
        return f"ItoExpression({format_expression(self)})"


def unit(x) -> ItoExpression:
    return ItoExpression.term(x, Basis.UNIT)


def expr_mul(e1: ItoExpression, e2: ItoExpression) -> ItoExpression:
    """Product of two expressions under the quantum Ito rule."""
    dim = e1._merge_dim(e2)
    out: dict[Basis, np.ndarray] = {}
    for (b1, c1), (b2, c2) in itertools.product(e1._terms.items(), e2._terms.items()):
        prod = _basis_product(b1, b2)
        if prod is None:
            continue
        k, b = prod
        c = k * (c1 @ c2)
        out[b] = out[b] + c if b in out else c
    return ItoExpression(out, dim)


def hp_differential(model: SystemModel) -> ItoExpression:
    """Coefficients of dU = (L dA† - L† dA - (L†L/2 + iH) dt) U."""
    return ItoExpression({
        Basis.DA_DAG: model.coupling,
        Basis.DA: -model.coupling_dag,
        Basis.DT: -(0.5 * model.coupling_sq + 1j * model.hamiltonian),
    }, model.dim)


def check_unitarity(model: SystemModel, atol: float = 1e-12) -> ItoExpression:
    """Expand d(U†U) = dU† U + U† dU + dU† dU; the result should be empty.

    With dU = E U this is U† (E† + E + E† E) U, so the bracket is returned,
    with coefficients below ``atol`` pruned.
    """
    e = hp_differential(model)
    ed = e.adjoint()
    return (ed + e + expr_mul(ed, e)).pruned(atol)


def flow_differential(model: SystemModel, x: np.ndarray) -> ItoExpression:
    """d j_t(X) for the flow j_t(X) = U† X U, pulled back to time zero.

    Expands dU† X U + U† X dU + dU† X dU by the Ito rule; the dt coefficient
    is the Lindblad generator, the dA† and dA coefficients are [X, L] and
    [L†, X].
    """
    if np.shape(x) != (model.dim, model.dim):
        raise DimensionError(f"observable shape {np.shape(x)} does not match dim {model.dim}")
    e = hp_differential(model)
    ed = e.adjoint()
    ux = unit(x) if np.any(x) else ItoExpression(dim=model.dim)
    return expr_mul(ed, ux) + expr_mul(ux, e) + expr_mul(expr_mul(ed, ux), e)


def flow_differential_closed_form(model: SystemModel, x: np.ndarray) -> ItoExpression:
    """The same differential written down directly from the generator."""
    c, cd = model.coupling, model.coupling_dag
    return ItoExpression({
        Basis.DT: lindblad_heisenberg(model, x),
        Basis.DA_DAG: x @ c - c @ x,
        Basis.DA: cd @ x - x @ cd,
    }, model.dim)


def vacuum_drift(e: ItoExpression) -> np.ndarray:
    """Vacuum expectation kills dA, dA† and dΛ, leaving the dt coefficient."""
    return e.coefficient(Basis.DT)


# --- pretty printing ------------------------------------------------------

_TERM_ORDER = (Basis.UNIT, Basis.DT, Basis.DA_DAG, Basis.DA, Basis.DLAMBDA)


def _fmt_real(v: float) -> str:
    s = f"{v:.6g}"
    return "0" if s == "-0" else s


def _fmt_scalar(c: complex) -> tuple[str, str]:
    """Split a scalar into (sign, magnitude) with a unit magnitude printed empty."""
    re, im = c.real, c.imag
    if abs(im) <= 1e-12 * max(1.0, abs(re)):
        mag = _fmt_real(abs(re))
        return ("-" if re < 0 else "+"), ("" if mag == "1" else mag)
    if abs(re) <= 1e-12 * max(1.0, abs(im)):
        mag = _fmt_real(abs(im))
        return ("-" if im < 0 else "+"), ("i" if mag == "1" else mag + "i")
    return "+", f"({_fmt_real(re)}{'+' if im >= 0 else '-'}{_fmt_real(abs(im))}i)"


def _scaled(mag: str, name: str) -> str:
    if not mag:
        return name
    return mag + name if mag == "i" else f"{mag} {name}"


def _decompose(coef: np.ndarray, labels: dict[str, np.ndarray], atol: float):
    """Sparsest combination (up to three labels) reproducing ``coef``."""
    names = list(labels)
    for k in (1, 2, 3):
        for combo in itertools.combinations(names, k):
            mats = np.stack([labels[n].reshape(-1) for n in combo], axis=1)
            sol, *_ = np.linalg.lstsq(mats, coef.reshape(-1), rcond=None)
            if np.max(np.abs(mats @ sol - coef.reshape(-1))) <= atol:
                return [(n, s) for n, s in zip(combo, sol) if abs(s) > atol]
    return None


def _fmt_matrix(coef: np.ndarray) -> str:
    def cell(z):
        if abs(z.imag) <= 1e-12:
            return _fmt_real(z.real)
        return f"{_fmt_real(z.real)}{'+' if z.imag >= 0 else '-'}{_fmt_real(abs(z.imag))}i"
    return "[" + ", ".join("[" + ", ".join(cell(z) for z in row) + "]" for row in coef) + "]"


def _fmt_combo(parts) -> tuple[str, str]:
    """Render a label combination; returns (leading sign, text)."""
    if len(parts) == 1:
        sign, mag = _fmt_scalar(parts[0][1])
        return sign, _scaled(mag, parts[0][0])
    pieces = []
    for name, s in parts:
        sign, mag = _fmt_scalar(s)
        text = _scaled(mag, name)
        if not pieces:
            pieces.append(("-" if sign == "-" else "") + text)
        else:
            pieces.append(f" {sign} {text}")
    return "+", "(" + "".join(pieces) + ")"


def format_expression(e: ItoExpression, labels: dict[str, np.ndarray] | None = None,
                      atol: float = 1e-12) -> str:
    """Render ``e`` as text such as ``(-0.5 L†L - iH)·dt + L·dA† - L†·dA``.

    Coefficients are written as the sparsest combination of ``labels`` that
    reproduces them, falling back to a matrix literal.  The empty expression
    renders as ``0``.
    """
    labels = labels or {}
    out = []
    for b in _TERM_ORDER:
        if b not in e._terms or np.max(np.abs(e._terms[b])) <= atol:
            continue
        coef = e._terms[b]
        parts = _decompose(coef, labels, atol) if labels else None
        if parts:
            sign, text = _fmt_combo(parts)
        else:
            sign, text = "+", _fmt_matrix(coef)
        term = text if b is Basis.UNIT else f"{text}·{b.value}"
        if not out:
            out.append(("-" if sign == "-" else "") + term)
        else:
            out.append(f" {sign} {term}")
    return "".join(out) if out else "0"
