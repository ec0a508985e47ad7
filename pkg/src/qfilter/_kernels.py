"""Batched filter arithmetic in a batch-last, split real/imaginary layout.

A batch of ``b`` states is held as two float arrays ``(re, im)`` of shape
``(d, d, b)``.  Only real elementwise ufuncs touch the data and every sum is
taken in a fixed order, so each trajectory is rounded exactly the same way
whether it is advanced alone (``b = 1``) or inside a large batch.  Inputs are
assumed Hermitian; products of the form ``X + X†`` rely on that.
"""

from __future__ import annotations

import numpy as np

from .operators import project_densities

JUMP_FLOOR = 1e-12


def split(stack: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(b, d, d) complex -> batch-last (re, im)."""
    moved = np.moveaxis(np.asarray(stack, dtype=complex), 0, -1)
    return np.ascontiguousarray(moved.real), np.ascontiguousarray(moved.imag)


def join(re: np.ndarray, im: np.ndarray) -> np.ndarray:
    """Batch-last (re, im) -> (b, d, d) complex."""
    out = np.empty((re.shape[-1],) + re.shape[:2], dtype=complex)
    out.real = np.moveaxis(re, -1, 0)
    out.imag = np.moveaxis(im, -1, 0)
    return out


_PLANS: dict[tuple[int, str], tuple[np.ndarray, list]] = {}


def _plan(a: np.ndarray, side: str):
    """Nonzero columns (side "l") or rows (side "r") of a constant matrix.

    Cached per array object; the model matrices are read-only.
    """
    key = (id(a), side)
    hit = _PLANS.get(key)
    if hit is not None and hit[0] is a:
        return hit[1]
    real = not np.any(a.imag)
    terms = []
    for k in range(a.shape[0]):
        v = a[:, k] if side == "l" else a[k]
        if not np.any(v):
            continue
        if side == "l":
            terms.append((k, v.real[:, None, None].copy(), v.imag[:, None, None].copy()))
        else:
            terms.append((k, v.real[None, :, None].copy(), v.imag[None, :, None].copy()))
    plan = (real, terms)
    if len(_PLANS) > 4096:
        _PLANS.clear()
    _PLANS[key] = (a, plan)
    return plan


def lmul(a: np.ndarray, re, im):
    """Constant matrix ``a`` times the batch."""
    real, terms = _plan(a, "l")
    out_r = out_i = None
    for k, cr, ci in terms:
        xr, xi = re[k][None], im[k][None]
        if real:
            tr, ti = cr * xr, cr * xi
        else:
            tr, ti = cr * xr - ci * xi, cr * xi + ci * xr
        out_r, out_i = (tr, ti) if out_r is None else (out_r + tr, out_i + ti)
    if out_r is None:
        return np.zeros_like(re), np.zeros_like(im)
    return out_r, out_i


def rmul(re, im, a: np.ndarray):
    """Batch times constant matrix ``a``."""
    real, terms = _plan(a, "r")
    out_r = out_i = None
    for k, cr, ci in terms:
        xr, xi = re[:, k, None], im[:, k, None]
        if real:
            tr, ti = xr * cr, xi * cr
        else:
            tr, ti = xr * cr - xi * ci, xi * cr + xr * ci
        out_r, out_i = (tr, ti) if out_r is None else (out_r + tr, out_i + ti)
    if out_r is None:
        return np.zeros_like(re), np.zeros_like(im)
    return out_r, out_i


def herm(re, im):
    """X + X†."""
    return re + re.transpose(1, 0, 2), im - im.transpose(1, 0, 2)


def trace_re(re):
    t = re[0, 0]
    for i in range(1, re.shape[0]):
        t = t + re[i, i]
    return t


def expect(re, im, x: np.ndarray):
    """Re tr(rho x) per batch element; same summation order as
    :func:`qfilter.operators.expectation_real`."""
    total = None
    d = x.shape[0]
    for i in range(d):
        for j in range(d):
            xr, xi = x[j, i].real, x[j, i].imag
            if xr == 0 and xi == 0:
                continue
            term = re[i, j] * xr - im[i, j] * xi
            total = term if total is None else total + term
    if total is None:
        return np.zeros(re.shape[-1])
    return total


def gain(model, re, im):
    """(L rho, L rho + rho L†) for Hermitian rho."""
    lr = lmul(model.coupling, re, im)
    return lr, herm(*lr)


def generator(model, re, im, lr):
    """L*(rho) = K rho + (K rho)† + L rho L† with K = -iH - L†L/2."""
    kr = herm(*lmul(model.drift_generator, re, im))
    jr = rmul(*lr, model.coupling_dag)
    return kr[0] + jr[0], kr[1] + jr[1]


def homodyne_drift(model, re, im):
    """tr[(L + L†) rho]."""
    return trace_re(gain(model, re, im)[1][0])


def counting_rate(model, re, im):
    """tr[L† L rho]."""
    return trace_re(lmul(model.coupling_sq, re, im)[0])


def drift_step(model, re, im, lr, dt, taylor):
    """rho + L*(rho) dt, or its fourth-order Taylor (RK4) refinement.

    For the linear generator the RK4 map is the Taylor polynomial of
    exp(L* dt), evaluated here in Horner form.
    """
    ar, ai = generator(model, re, im, lr)
    if not taylor:
        return re + ar * dt, im + ai * dt
    vr, vi = re + ar * (dt / 4), im + ai * (dt / 4)
    for j in (3, 2, 1):
        ar, ai = generator(model, vr, vi, lmul(model.coupling, vr, vi))
        vr, vi = re + ar * (dt / j), im + ai * (dt / j)
    return vr, vi


def homodyne_update(model, re, im, dy, dt, milstein):
    lr, (gr, gi) = gain(model, re, im)
    m = trace_re(gr)
    dw = dy - m * dt
    br, bi = gr - m * re, gi - m * im
    lin_r, lin_i = drift_step(model, re, im, lr, dt, milstein)
    out_r = lin_r + br * dw
    out_i = lin_i + bi * dw
    if milstein:
        _, (hr, hi) = gain(model, br, bi)
        th = trace_re(hr)
        c = 0.5 * (dw * dw - dt)
        out_r = out_r + (hr - th * re - m * br) * c
        out_i = out_i + (hi - th * im - m * bi) * c
    return out_r, out_i


def zakai_update(model, re, im, dy, dt, milstein):
    lr, (gr, gi) = gain(model, re, im)
    lin_r, lin_i = drift_step(model, re, im, lr, dt, milstein)
    out_r = lin_r + gr * dy
    out_i = lin_i + gi * dy
    if milstein:
        _, (hr, hi) = gain(model, gr, gi)
        c = 0.5 * (dy * dy - dt)
        out_r = out_r + hr * c
        out_i = out_i + hi * c
    return out_r, out_i


def counting_update(model, re, im, dn, dt):
    """No-jump evolution over dt, then the jump map where ``dn`` is 1.

    Returns ``(re, im, impossible)`` where ``impossible`` flags requested
    jumps whose rate is at or below ``JUMP_FLOOR``.
    """
    rate = trace_re(lmul(model.coupling_sq, re, im)[0])
    kr, ki = herm(*lmul(model.drift_generator, re, im))
    # L*(rho) - L rho L† + rate rho = K rho + (K rho)† + rate rho
    sr = re + (kr + rate * re) * dt
    si = im + (ki + rate * im) * dt
    jumps = dn == 1
    if not np.any(jumps):
        return sr, si, np.zeros(jumps.shape, dtype=bool)
    jr, ji = rmul(*lmul(model.coupling, sr, si), model.coupling_dag)
    rate_s = trace_re(jr)
    impossible = jumps & ((rate <= JUMP_FLOOR) | (rate_s <= JUMP_FLOOR))
    safe = np.where(rate_s > JUMP_FLOOR, rate_s, 1.0)
    return (np.where(jumps, jr / safe, sr), np.where(jumps, ji / safe, si), impossible)


def project(re, im):
    """Batch-last nearest_density; returns (re, im, ok)."""
    if re.shape[0] != 2:
        out, ok = project_densities(join(re, im))
        r, i = split(out)
        return r, i, ok
    # same Bloch-vector formulas as operators._project_qubits
    h00, h11 = re[0, 0], re[1, 1]
    h10r = 0.5 * (re[1, 0] + re[0, 1])
    h10i = 0.5 * (im[1, 0] - im[0, 1])
    t = h00 + h11
    z = h00 - h11
    x = 2.0 * h10r
    y = 2.0 * h10i
    r = np.sqrt(x * x + y * y + z * z)
    ok = (t + r) > 0
    scale = np.where(t < r, r, t)
    scale = np.where(ok, scale, 1.0)
    x, y, z = x / scale, y / scale, z / scale
    out_r = np.empty_like(re)
    out_i = np.empty_like(im)
    out_r[0, 0] = 0.5 * (1.0 + z)
    out_r[1, 1] = 0.5 * (1.0 - z)
    out_r[1, 0] = out_r[0, 1] = 0.5 * x
    out_i[0, 0] = out_i[1, 1] = 0.0
    out_i[1, 0] = 0.5 * y
    out_i[0, 1] = -0.5 * y
    return out_r, out_i, ok & np.isfinite(t + r)
