import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_hermitian, random_model, random_operator
from qfilter.errors import DimensionError
from qfilter.ito import (
    INCREMENTS,
    Basis,
    ItoExpression,
    check_unitarity,
    expr_mul,
    flow_differential,
    flow_differential_closed_form,
    format_expression,
    hp_differential,
    ito_table,
    unit,
    vacuum_drift,
)
from qfilter.operators import SIGMA_MINUS, SIGMA_PLUS, SIGMA_X, SIGMA_Z, SystemModel, lindblad_heisenberg

I2 = np.eye(2)
Z2 = np.zeros((2, 2))
dt, dA, dAd, dL = Basis.DT, Basis.DA, Basis.DA_DAG, Basis.DLAMBDA

# written out by hand: left factor, right factor -> product
EXPECTED_TABLE = {(dA, dAd): dt, (dA, dL): dA, (dL, dAd): dAd, (dL, dL): dL}


def test_ito_table_exhaustive():
    for a, b in itertools.product(INCREMENTS, INCREMENTS):
        got = ito_table(a, b)
        if (a, b) in EXPECTED_TABLE:
            assert got == (1.0, EXPECTED_TABLE[(a, b)])
        else:
            assert got is None


def test_ito_table_examples():
    assert ito_table(dA, dAd) == (1.0, dt)
    assert ito_table(dAd, dA) is None
    assert ito_table(dL, dL) == (1.0, dL)
    with pytest.raises(ValueError):
        ito_table(Basis.UNIT, dA)


def test_expression_prunes_zero_and_rejects_bad_input():
    e = ItoExpression({dt: Z2, dA: I2})
    assert set(e.terms) == {dA}
    with pytest.raises(ValueError):
        ItoExpression({dt: np.array([[np.nan, 0], [0, 0]])})
    with pytest.raises(DimensionError):
        ItoExpression({dt: I2, dA: np.eye(3)})


def test_expr_mul_examples():
    rng = np.random.default_rng(0)
    x, y = random_operator(rng, 3), random_operator(rng, 3)
    assert np.allclose(expr_mul(unit(x), unit(y)).coefficient(Basis.UNIT), x @ y)
    out = expr_mul(ItoExpression.term(I2, dA), ItoExpression.term(I2, dAd))
    assert set(out.terms) == {dt} and np.array_equal(out.coefficient(dt), I2)
    l = random_operator(rng, 2)
    ld = l.conj().T
    e = ItoExpression({dAd: l, dA: -ld})
    sq = expr_mul(e, e)
    assert set(sq.terms) == {dt}
    assert np.allclose(sq.coefficient(dt), -ld @ l, atol=1e-15)
    assert not expr_mul(ItoExpression.term(I2, dt), ItoExpression.term(I2, dt))
    with pytest.raises(DimensionError):
        expr_mul(unit(I2), unit(np.eye(3)))


def test_hp_differential_examples():
    assert not hp_differential(SystemModel(Z2, Z2, I2 / 2))
    e = hp_differential(SystemModel(SIGMA_Z, Z2, I2 / 2))
    assert set(e.terms) == {dt} and np.allclose(e.coefficient(dt), -1j * SIGMA_Z)
    e = hp_differential(SystemModel(Z2, SIGMA_MINUS, I2 / 2))
    assert np.array_equal(e.coefficient(dAd), SIGMA_MINUS)
    assert np.array_equal(e.coefficient(dA), -SIGMA_PLUS)
    assert np.allclose(e.coefficient(dt), -0.5 * SIGMA_PLUS @ SIGMA_MINUS)


def test_unitarity_examples():
    assert not check_unitarity(SystemModel(Z2, SIGMA_MINUS, I2 / 2))
    assert not check_unitarity(SystemModel(SIGMA_X, Z2, I2 / 2))


@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_unitarity_random_models(d, seed):
    m = random_model(np.random.default_rng(seed), d)
    assert not check_unitarity(m)


def test_unitarity_notices_a_wrong_table(monkeypatch):
    from qfilter import ito
    monkeypatch.setitem(ito.ITO_TABLE, (dA, dAd), (-1.0, dt))
    out = check_unitarity(SystemModel(Z2, SIGMA_MINUS, I2 / 2))
    assert set(out.terms) == {dt}
    assert np.allclose(out.coefficient(dt), -2 * SIGMA_PLUS @ SIGMA_MINUS)


def test_flow_examples():
    gamma = 0.8
    m = SystemModel(Z2, np.sqrt(gamma) * SIGMA_MINUS, I2 / 2)
    assert not flow_differential(m, I2)
    e = flow_differential(m, SIGMA_Z)
    l, ld = m.coupling, m.coupling_dag
    assert np.allclose(e.coefficient(dt), -gamma * (I2 + SIGMA_Z), atol=1e-15)
    assert np.allclose(e.coefficient(dAd), SIGMA_Z @ l - l @ SIGMA_Z, atol=1e-15)
    assert np.allclose(e.coefficient(dA), ld @ SIGMA_Z - SIGMA_Z @ ld, atol=1e-15)
    with pytest.raises(DimensionError):
        flow_differential(m, np.eye(3))


@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_flow_drift_is_lindblad(d, seed):
    rng = np.random.default_rng(seed)
    m, x = random_model(rng, d), random_hermitian(rng, d)
    e = flow_differential(m, x)
    assert np.abs(vacuum_drift(e) - lindblad_heisenberg(m, x)).max() <= 1e-12
    assert e.allclose(flow_differential_closed_form(m, x), atol=1e-12)


def test_vacuum_drift_examples():
    rng = np.random.default_rng(1)
    x, y = random_operator(rng, 2), random_operator(rng, 2)
    assert np.array_equal(vacuum_drift(ItoExpression({dA: x, dAd: y})), Z2)
    assert np.array_equal(vacuum_drift(ItoExpression({dt: x, dL: y})), x)


def random_expression(rng, d):
    return ItoExpression({b: random_operator(rng, d) for b in (Basis.UNIT, *INCREMENTS)
                          if rng.random() < 0.8}, d)


@given(st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_expr_mul_associative(d, seed):
    rng = np.random.default_rng(seed)
    e1, e2, e3 = (random_expression(rng, d) for _ in range(3))
    lhs = expr_mul(expr_mul(e1, e2), e3)
    rhs = expr_mul(e1, expr_mul(e2, e3))
    assert (lhs - rhs).max_abs() <= 1e-12 * max(1.0, lhs.max_abs())


@given(st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_adjoint_reverses_products(d, seed):
    rng = np.random.default_rng(seed)
    e1, e2 = random_expression(rng, d), random_expression(rng, d)
    lhs = expr_mul(e1, e2).adjoint()
    rhs = expr_mul(e2.adjoint(), e1.adjoint())
    assert (lhs - rhs).max_abs() <= 1e-12 * max(1.0, lhs.max_abs())


def test_adjoint_swaps_creation_and_annihilation():
    rng = np.random.default_rng(2)
    x = random_operator(rng, 2)
    e = ItoExpression({dA: x, dL: x}).adjoint()
    assert np.array_equal(e.coefficient(dAd), x.conj().T)
    assert np.array_equal(e.coefficient(dL), x.conj().T)


def test_format_expression():
    m = SystemModel(Z2, SIGMA_MINUS, I2 / 2)
    labels = {"L": m.coupling, "L†": m.coupling_dag, "L†L": m.coupling_sq}
    assert format_expression(hp_differential(m), labels) == "-0.5 L†L·dt + L·dA† - L†·dA"
    assert format_expression(ItoExpression(dim=2)) == "0"
    assert format_expression(ItoExpression.term(np.diag([1.0, 2.0]), dt)) == "[[1, 0], [0, 2]]·dt"
