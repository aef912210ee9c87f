"""Constant-curvature geometry in ambient coordinates.

Points of curvature ``kappa`` live on

* the hypersphere ``{x in R^{d+1} : <x, x>_2 = 1/kappa}`` for ``kappa > 0``,
* the upper sheet of the hyperboloid ``{x : <x, x>_L = 1/kappa, x_0 > 0}`` for
  ``kappa < 0`` (Minkowski product ``diag(-1, 1, ..., 1)``),
* plain ``R^d`` when ``|kappa| < KAPPA_EPS``.

Every function accepts ``kappa`` as a float or a :class:`~riemtg.tensor.Tensor`
(scalar, or one value per row with shape ``(n, 1)``), so curvature can carry
gradients.  Rows sharing one call must all be curved or all be flat.

Coordinates are stored as ``Tensor`` arrays with the coordinate axis last.
Functions ending in ``0`` work at the origin ``(1/sqrt|kappa|, 0, ..., 0)`` and
take or return only the ``d`` spatial tangent coordinates (the time component
of a tangent vector at the origin is always 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_tensor, make_op

KAPPA_EPS = 1e-6
KAPPA_MAX = 10.0
INJECTIVITY_MARGIN = 1e-6
STEREO_EPS = 1e-12
# cosh overflows near 710; geodesic radii past this are numerically meaningless
HYPERBOLIC_R_MAX = 40.0
_SERIES = 1e-4


class GeometryError(ValueError):
    """Raised when an input violates a manifold precondition."""


# -- curvature helpers ------------------------------------------------------------


def kappa_tensor(kappa) -> Tensor:
    k = as_tensor(kappa)
    if not np.all(np.isfinite(k.value)):
        raise GeometryError("curvature must be finite")
    return k


def is_flat(kappa) -> bool:
    k = np.asarray(kappa.value if isinstance(kappa, Tensor) else kappa)
    small = np.abs(k) < KAPPA_EPS
    if small.all():
        return True
    if small.any():
        raise GeometryError("rows mix flat and curved curvature; nudge kappa away from 0 first")
    return False


def _sign(k: Tensor) -> np.ndarray:
    return np.where(k.value < 0, -1.0, 1.0)


def sqrt_abs(k: Tensor) -> Tensor:
    return T.sqrt(T.abs_(k))


def nudge(kappa) -> Tensor:
    """Push ``|kappa|`` up to ``KAPPA_EPS`` keeping its sign (0 maps to +eps).

    Inside the window the gradient is zero.
    """
    k = as_tensor(kappa)
    kv = k.value
    inside = np.abs(kv) < KAPPA_EPS
    if not inside.any():
        return k
    floor = np.where(kv < 0, -KAPPA_EPS, KAPPA_EPS)
    return T.where(inside, Tensor(floor), k)


def clamp_kappa(kappa, kmax: float = KAPPA_MAX) -> Tensor:
    return T.clamp(as_tensor(kappa), -kmax, kmax)


# -- curvature-aware trig primitives (per-row sign) -----------------------------------


def kcos(r: Tensor, s: np.ndarray) -> Tensor:
    """``cosh(r)`` on rows with negative curvature sign, ``cos(r)`` elsewhere."""
    a = r.value
    neg = np.broadcast_to(s < 0, a.shape)
    y = np.where(neg, np.cosh(a), np.cos(a))
    return make_op(y, (r,), lambda g: (g * np.where(neg, np.sinh(a), -np.sin(a)),))


def ksin(r: Tensor, s: np.ndarray) -> Tensor:
    a = r.value
    neg = np.broadcast_to(s < 0, a.shape)
    y = np.where(neg, np.sinh(a), np.sin(a))
    return make_op(y, (r,), lambda g: (g * np.where(neg, np.cosh(a), np.cos(a)),))


def ksinc(r: Tensor, s: np.ndarray) -> Tensor:
    """``sin_k(r) / r`` with the removable singularity at 0 filled in."""
    a = r.value
    neg = np.broadcast_to(s < 0, a.shape)
    sg = np.where(neg, 1.0, -1.0)
    small = np.abs(a) < _SERIES
    safe = np.where(small, 1.0, a)
    a2 = a * a
    with np.errstate(over="ignore"):
        full = np.where(neg, np.sinh(safe), np.sin(safe)) / safe
        dfull = (safe * np.where(neg, np.cosh(safe), np.cos(safe)) - np.where(neg, np.sinh(safe), np.sin(safe))) / (safe * safe)
    y = np.where(small, 1.0 + sg * a2 / 6.0 + a2 * a2 / 120.0, full)
    dy = np.where(small, sg * a / 3.0 + a2 * a / 30.0, dfull)
    return make_op(y, (r,), lambda g: (g * dy,))


def kangle_ratio(r: Tensor, c: Tensor, s: np.ndarray) -> Tensor:
    """Geodesic angle over ``r`` where ``r = sin_k(theta)`` and ``c = cos_k(theta)``.

    Hyperbolic rows use ``asinh(r) / r``; spherical rows use ``atan2(r, c) / r``,
    which stays accurate all the way to the antipode.
    """
    rv, cv = r.value, c.value
    shape = np.broadcast_shapes(rv.shape, cv.shape)
    rv = np.broadcast_to(rv, shape)
    cv = np.broadcast_to(cv, shape)
    neg = np.broadcast_to(s < 0, shape)
    small = rv < _SERIES * np.maximum(np.abs(cv), 1e-300)
    small &= neg | (cv > 0)
    safe = np.where(small | (rv <= 0), 1.0, rv)
    r2 = rv * rv
    theta_h = np.arcsinh(safe)
    theta_s = np.arctan2(safe, cv)
    theta = np.where(neg, theta_h, theta_s)
    full = theta / safe
    denom = safe * safe + cv * cv
    dr_h = (safe / np.sqrt(1.0 + safe * safe) - theta_h) / (safe * safe)
    dr_s = (cv * safe / denom - theta_s) / (safe * safe)
    dc_s = -1.0 / denom
    cpos = np.where(cv > 0, cv, 1.0)
    ser_h = 1.0 - r2 / 6.0
    ser_s = 1.0 / cpos - r2 / (3.0 * cpos ** 3)
    y = np.where(small, np.where(neg, ser_h, ser_s), full)
    dr = np.where(small, np.where(neg, -rv / 3.0, -2.0 * rv / (3.0 * cpos ** 3)), np.where(neg, dr_h, dr_s))
    dc = np.where(neg, 0.0, np.where(small, -1.0 / (cpos * cpos) + r2 / (cpos ** 4), dc_s))
    return make_op(y, (r, c), lambda g: (g * dr, g * dc))


def atan2(y: Tensor, x: Tensor) -> Tensor:
    yv, xv = y.value, x.value
    out = np.arctan2(yv, xv)
    den = yv * yv + xv * xv
    den = np.where(den > 0, den, 1.0)
    return make_op(out, (y, x), lambda g: (g * xv / den, -g * yv / den))


def ktrig(kind: str, x, kappa) -> float:
    """Scalar ``cos_k``, ``sin_k`` or ``arccos_k`` (the flat case is rejected)."""
    k = float(kappa)
    if abs(k) < KAPPA_EPS:
        raise GeometryError("curvature-aware trig is undefined at kappa = 0; use the Euclidean branch")
    x = float(x)
    if kind == "cos":
        return math.cosh(x) if k < 0 else math.cos(x)
    if kind == "sin":
        return math.sinh(x) if k < 0 else math.sin(x)
    if kind == "arccos":
        if k < 0:
            return math.acosh(max(x, 1.0))
        return math.acos(min(max(x, -1.0 + 1e-12), 1.0 - 1e-12))
    raise ValueError(f"unknown trig kind {kind!r}")


# -- products, norms -------------------------------------------------------------


def _metric(k: Tensor, dim: int) -> np.ndarray:
    s = _sign(k)
    if s.ndim == 0:
        g = np.ones(dim)
        g[0] = s
        return g
    return np.concatenate([s, np.ones(s.shape[:-1] + (dim - 1,))], axis=-1)


def inner(x, y, kappa) -> Tensor:
    """``<x, y>_k``: Minkowski for ``kappa < 0``, Euclidean otherwise."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape[-1] != y.shape[-1]:
        raise T.ShapeError(f"inner: coordinate dimensions differ ({x.shape} vs {y.shape})")
    k = kappa_tensor(kappa)
    if is_flat(k):
        return (x * y).sum(axis=-1, keepdims=True)
    return (x * y * _metric(k, x.shape[-1])).sum(axis=-1, keepdims=True)


def tangent_norm(v, kappa) -> Tensor:
    q = inner(v, v, kappa)
    return T.sqrt(T.clamp(q, lo=0.0))


def euclid_norm(v) -> Tensor:
    """``||v||_2`` over the last axis; the gradient at 0 is taken as 0."""
    v = as_tensor(v)
    a = v.value
    n = np.sqrt(np.einsum("...i,...i->...", a, a))[..., None]

    def bw(g):
        return (a * (g / np.where(n > 0, n, np.inf)),)

    return make_op(n, (v,), bw)


def origin(d: int, kappa) -> Tensor:
    k = kappa_tensor(kappa)
    rows = k.shape[:-1] if k.ndim else ()
    if is_flat(k):
        return Tensor(np.zeros(rows + (d,)))
    o0 = 1.0 / sqrt_abs(k)
    if k.ndim == 0:
        o0 = o0.reshape(1)
    return T.concat([o0, Tensor(np.zeros(rows + (d,)))], axis=-1)


# -- exponential / logarithmic maps ------------------------------------------------


def _radius_limit(s: np.ndarray, k: Tensor) -> np.ndarray:
    sph = (math.pi - INJECTIVITY_MARGIN) * np.ones_like(k.value)
    return np.where(s < 0, HYPERBOLIC_R_MAX, sph)


def _clamped_coeff(r: Tensor, s: np.ndarray, k: Tensor):
    """Return ``(cos_k(rc), sin_k(rc)/r)`` with ``rc = min(r, limit)``."""
    limit = np.broadcast_to(_radius_limit(s, k), r.shape)
    over = r.value > limit
    if not over.any():
        return kcos(r, s), ksinc(r, s)
    rc = T.where(over, Tensor(limit), r)
    rsafe = T.where(over, r, Tensor(1.0))
    coeff = T.where(over, ksin(rc, s) / rsafe, ksinc(rc, s))
    return kcos(rc, s), coeff


def expmap(x, v, kappa, check: bool = True) -> Tensor:
    """Exponential map at ``x``: ``cos_k(r) x + (sin_k(r)/r) v`` with ``r = sqrt|k| ||v||_k``."""
    x, v = as_tensor(x), as_tensor(v)
    k = kappa_tensor(kappa)
    if is_flat(k):
        return x + v
    if check:
        check_point(x, k)
        check_tangent(x, v, k)
    s = _sign(k)
    r = sqrt_abs(k) * tangent_norm(v, k)
    cos_r, coeff = _clamped_coeff(r, s, k)
    return project(cos_r * x + coeff * v, k)


def logmap(x, y, kappa, check: bool = True) -> Tensor:
    """Logarithmic map at ``x``; the inverse of :func:`expmap`."""
    x, y = as_tensor(x), as_tensor(y)
    k = kappa_tensor(kappa)
    if is_flat(k):
        return y - x
    s = _sign(k)
    c = k * inner(x, y, k)
    u = y - c * x
    r = sqrt_abs(k) * tangent_norm(u, k)
    if check:
        check_point(x, k)
        check_point(y, k)
        if np.any((s > 0) & (c.value < -1.0 + 1e-10) & (r.value < 1e-6)):
            raise GeometryError("logarithm undefined for antipodal points")
    return kangle_ratio(r, c, s) * u


def expmap0(u, kappa) -> Tensor:
    """Map spatial tangent coordinates at the origin onto the manifold."""
    u = as_tensor(u)
    k = kappa_tensor(kappa)
    if is_flat(k):
        return u
    s = _sign(k)
    ska = sqrt_abs(k)
    r = ska * euclid_norm(u)
    cos_r, coeff = _clamped_coeff(r, s, k)
    return T.concat([cos_r / ska, coeff * u], axis=-1)


def logmap0(x, kappa) -> Tensor:
    """Spatial tangent coordinates at the origin of the point ``x``."""
    x = as_tensor(x)
    k = kappa_tensor(kappa)
    if is_flat(k):
        return x
    s = _sign(k)
    ska = sqrt_abs(k)
    xs = x[..., 1:]
    c = ska * x[..., 0:1]
    r = ska * euclid_norm(xs)
    return kangle_ratio(r, c, s) * xs


def distance(x, y, kappa) -> Tensor:
    """Geodesic distance, computed from chord lengths so it is exactly symmetric."""
    x, y = as_tensor(x), as_tensor(y)
    k = kappa_tensor(kappa)
    if is_flat(k):
        return euclid_norm(x - y)
    ska = sqrt_abs(k)
    s = _sign(k)
    diff = x - y
    chord = ska * tangent_norm(diff, k)
    if np.all(s < 0):
        theta = 2.0 * T.asinh(chord * 0.5)
    elif np.all(s > 0):
        theta = 2.0 * atan2(chord, ska * euclid_norm(x + y))
    else:
        neg = np.broadcast_to(s < 0, chord.shape)
        plus = ska * tangent_norm(x + y, k)
        theta = T.where(neg, 2.0 * T.asinh(chord * 0.5), 2.0 * atan2(chord, plus))
    return theta / ska


def project(x, kappa) -> Tensor:
    """Rescale ``x`` so that ``<x, x>_k = 1/k`` exactly (drift control)."""
    x = as_tensor(x)
    k = kappa_tensor(kappa)
    if is_flat(k):
        return x
    q = T.abs_(inner(x, x, k))
    target = 1.0 / T.abs_(k)
    return x * T.sqrt(target / q)


# -- Table-1 operations -----------------------------------------------------------------


def scalar_mul(r, x, kappa) -> Tensor:
    return expmap0(as_tensor(r) * logmap0(x, kappa), kappa)


def matrix_mul(m, x, kappa) -> Tensor:
    """``M (x)_k``: apply ``M`` (shape ``(d_out, d_in)``) to the origin tangent of ``x``."""
    m = as_tensor(m)
    u = logmap0(x, kappa)
    if m.shape[-1] != u.shape[-1]:
        raise T.ShapeError(f"matrix_mul: matrix {m.shape} does not act on tangent of size {u.shape[-1]}")
    return expmap0(T.matmul(u, m.T), kappa)


def apply_fn(fn: Callable[[Tensor], Tensor], x, kappa) -> Tensor:
    return expmap0(fn(logmap0(x, kappa)), kappa)


def neg(x, kappa) -> Tensor:
    """Gyro-inverse ``(-1) (x)_k x``."""
    return scalar_mul(-1.0, x, kappa)


# -- stereographic bridge and gyrovector addition ------------------------------------


def stereo(x, kappa, check: bool = True) -> Tensor:
    """Ambient point to the stereographic (gyrovector) model."""
    x = as_tensor(x)
    k = kappa_tensor(kappa)
    if is_flat(k):
        raise GeometryError("stereographic projection needs kappa != 0")
    den = 1.0 + sqrt_abs(k) * x[..., 0:1]
    if check and np.any(np.abs(den.value) <= STEREO_EPS):
        raise GeometryError("point sits at the projection pole")
    den = T.where(np.abs(den.value) > STEREO_EPS, den, Tensor(STEREO_EPS))
    return x[..., 1:] / den


def stereo_inv(xp, kappa) -> Tensor:
    xp = as_tensor(xp)
    k = kappa_tensor(kappa)
    if is_flat(k):
        raise GeometryError("stereographic projection needs kappa != 0")
    den = 1.0 + k * (xp * xp).sum(axis=-1, keepdims=True)
    den = T.where(np.abs(den.value) > STEREO_EPS, den, Tensor(STEREO_EPS))
    lam = 2.0 / den
    return T.concat([(lam - 1.0) / sqrt_abs(k), lam * xp], axis=-1)


def conformal_factor(xp, kappa) -> Tensor:
    xp = as_tensor(xp)
    return 2.0 / (1.0 + as_tensor(kappa) * (xp * xp).sum(axis=-1, keepdims=True))


def mobius_add(xp, yp, kappa) -> Tensor:
    """Gyrovector addition in the stereographic model (one fused node)."""
    xp, yp = as_tensor(xp), as_tensor(yp)
    k = as_tensor(kappa)
    x, y, kv = xp.value, yp.value, k.value
    dot = lambda a, b: np.einsum("...i,...i->...", a, b)[..., None]
    xy, x2, y2 = dot(x, y), dot(x, x), dot(y, y)
    a = 1.0 - 2.0 * kv * xy - kv * y2
    b = 1.0 + kv * x2
    den = 1.0 - 2.0 * kv * xy + kv * kv * x2 * y2
    den = np.where(np.abs(den) > STEREO_EPS, den, STEREO_EPS)
    out = (a * x + b * y) / den

    def bw(g):
        gn = g / den
        gd = -dot(g, out) / den
        gnx, gny = dot(gn, x), dot(gn, y)
        k2 = 2.0 * kv
        dx = dy = dk = None
        if xp.requires_grad:
            dx = a * gn + (k2 * gny + k2 * kv * y2 * gd) * x - (k2 * gnx + k2 * gd) * y
        if yp.requires_grad:
            cx = -(k2 * gnx + k2 * gd)
            dy = b * gn + cx * x + (k2 * kv * x2 * gd - k2 * gnx) * y
        if k.requires_grad:
            dk = gnx * (-2.0 * xy - y2) + gny * x2 + gd * (-2.0 * xy + 2.0 * kv * x2 * y2)
        return (dx, dy, dk)

    return make_op(out, (xp, yp, k), bw)


def gyro_add(x, y, kappa) -> Tensor:
    """``x (+)_k y``: stereographic projection, gyro addition, and back."""
    k = kappa_tensor(kappa)
    if is_flat(k):
        return as_tensor(x) + y
    return project(stereo_inv(mobius_add(stereo(x, k, check=False), stereo(y, k, check=False), k), k), k)


def gyro_distance(xp, yp, kappa) -> Tensor:
    """Distance evaluated in the stereographic model."""
    k = kappa_tensor(kappa)
    ska = sqrt_abs(k)
    a = ska * euclid_norm(mobius_add(-as_tensor(xp), yp, k))
    av = a.value
    if np.all(k.value < 0):
        inv = make_op(np.arctanh(av), (a,), lambda g: (g / (1.0 - av * av),))
    else:
        inv = make_op(np.arctan(av), (a,), lambda g: (g / (1.0 + av * av),))
    return 2.0 * inv / ska


# -- ball chart ---------------------------------------------------------------------
#
# The stereographic coordinates of the gyrovector model, used directly (d numbers per
# point instead of d + 1).  Formulas are written with ``kappa`` so the same code is
# exact at ``kappa = 0``, where the chart is ``R^d`` scaled by 1/2 relative to the
# origin tangent coordinates.

_BALL_SERIES = 1e-2
# artanh(1 - 1e-12) ~ 14.2; the hyperbolic chart saturates there
BALL_Z_MAX = 1.0 - 1e-12


def ktanc(r: Tensor, s: np.ndarray) -> Tensor:
    """``tan_k(r) / r``: ``tanh(r)/r`` on negative-sign rows, ``tan(r)/r`` elsewhere."""
    a = r.value
    neg = np.broadcast_to(s < 0, a.shape)
    sg = np.where(neg, -1.0, 1.0)
    small = np.abs(a) < _BALL_SERIES
    safe = np.where(small, 1.0, a)
    tv = np.where(neg, np.tanh(safe), np.tan(safe))
    full = tv / safe
    dfull = ((1.0 + sg * tv * tv) * safe - tv) / (safe * safe)
    a2 = a * a
    y = np.where(small, 1.0 + sg * a2 / 3.0 + 2.0 * a2 * a2 / 15.0 + sg * 17.0 * a2 ** 3 / 315.0, full)
    dy = np.where(small, sg * 2.0 * a / 3.0 + 8.0 * a2 * a / 15.0 + sg * 102.0 * a2 * a2 * a / 315.0, dfull)
    return make_op(y, (r,), lambda g: (g * dy,))


def kartanc(z: Tensor, s: np.ndarray) -> Tensor:
    """``artan_k(z) / z``: ``artanh(z)/z`` on negative-sign rows, ``arctan(z)/z`` elsewhere.

    Hyperbolic rows are clipped at :data:`BALL_Z_MAX` (zero gradient past it).
    """
    a = z.value
    neg = np.broadcast_to(s < 0, a.shape)
    over = neg & (a > BALL_Z_MAX)
    a = np.where(over, BALL_Z_MAX, a)
    sg = np.where(neg, 1.0, -1.0)
    small = np.abs(a) < _BALL_SERIES
    safe = np.where(small, 0.5, a)
    at = np.where(neg, np.arctanh(np.where(neg, safe, 0.0)), np.arctan(safe))
    full = at / safe
    dfull = (safe / (1.0 - sg * safe * safe) - at) / (safe * safe)
    a2 = a * a
    y = np.where(small, 1.0 + sg * a2 / 3.0 + a2 * a2 / 5.0 + sg * a2 ** 3 / 7.0, full)
    dy = np.where(small, sg * 2.0 * a / 3.0 + 4.0 * a2 * a / 5.0 + sg * 6.0 * a2 * a2 * a / 7.0, dfull)
    dy = np.where(over, 0.0, dy)
    return make_op(y, (z,), lambda g: (g * dy,))


def _tan_coeff(r: Tensor, s: np.ndarray) -> Tensor:
    """``tan_k(min(r, limit)) / r``; the limit keeps sphere rows short of the pole."""
    limit = np.where(s < 0, HYPERBOLIC_R_MAX / 2, (math.pi - INJECTIVITY_MARGIN) / 2)
    limit = np.broadcast_to(limit, r.shape)
    over = r.value > limit
    if not over.any():
        return ktanc(r, s)
    rc = T.where(over, Tensor(limit), r)
    rsafe = T.where(over, r, Tensor(1.0))
    return T.where(over, ktanc(rc, s) * rc / rsafe, ktanc(rc, s))


def ball_exp0(u, kappa) -> Tensor:
    """Chart coordinates of ``exp_O(u)`` for origin tangent coordinates ``u``."""
    u = as_tensor(u)
    k = kappa_tensor(kappa)
    s = _sign(k)
    r = 0.5 * sqrt_abs(k) * euclid_norm(u)
    return (0.5 * _tan_coeff(r, s)) * u


def ball_log0(p, kappa) -> Tensor:
    """Origin tangent coordinates of the chart point ``p``; inverse of :func:`ball_exp0`."""
    p = as_tensor(p)
    k = kappa_tensor(kappa)
    z = sqrt_abs(k) * euclid_norm(p)
    return (2.0 * kartanc(z, _sign(k))) * p


def ball_log(x, y, kappa) -> Tensor:
    """Logarithmic map at chart point ``x`` (chart tangent vectors)."""
    x, y = as_tensor(x), as_tensor(y)
    k = kappa_tensor(kappa)
    w = mobius_add(-x, y, k)
    lam = conformal_factor(x, k)
    z = sqrt_abs(k) * euclid_norm(w)
    return (2.0 * kartanc(z, _sign(k)) / lam) * w


def ball_exp(x, v, kappa) -> Tensor:
    """Exponential map at chart point ``x``; inverse of :func:`ball_log`."""
    x, v = as_tensor(x), as_tensor(v)
    k = kappa_tensor(kappa)
    lam = conformal_factor(x, k)
    r = 0.5 * sqrt_abs(k) * lam * euclid_norm(v)
    return mobius_add(x, (0.5 * lam * _tan_coeff(r, _sign(k))) * v, k)


def ball_distance(x, y, kappa) -> Tensor:
    """Geodesic distance between chart points; ``2 ||y - x||`` when flat."""
    x, y = as_tensor(x), as_tensor(y)
    k = kappa_tensor(kappa)
    w = mobius_add(-x, y, k)
    n = euclid_norm(w)
    return 2.0 * kartanc(sqrt_abs(k) * n, _sign(k)) * n


def ball_to_ambient(p, kappa) -> Tensor:
    """Chart point to ambient coordinates (``R^d`` itself when flat)."""
    k = kappa_tensor(kappa)
    if is_flat(k):
        return 2.0 * as_tensor(p)
    return project(stereo_inv(p, k), k)


# -- validation ---------------------------------------------------------------------


def check_point(x, kappa, tol: float = 1e-8) -> None:
    x = as_tensor(x)
    k = kappa_tensor(kappa)
    if is_flat(k):
        return
    q = inner(x, x, k).value
    target = 1.0 / k.value
    err = np.abs(q - target)
    if np.any(err > tol * np.maximum(1.0, np.abs(target))):
        raise GeometryError(f"point off the manifold: |<x,x> - 1/k| = {err.max():.3g}")
    if np.any(k.value < 0) and np.any(x.value[..., 0] <= 0):
        raise GeometryError("hyperboloid point on the lower sheet")


def check_tangent(x, v, kappa, tol: float = 1e-8) -> None:
    k = kappa_tensor(kappa)
    if is_flat(k):
        return
    ip = np.abs(inner(x, v, k).value)
    scale = np.maximum(1.0, euclid_norm(v).value * euclid_norm(x).value)
    if np.any(ip > tol * scale):
        raise GeometryError(f"vector not tangent at base point: |<x,v>| = {ip.max():.3g}")


@dataclass(frozen=True)
class ManifoldPoint:
    """A validated point with its curvature."""

    coords: np.ndarray
    kappa: float

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        object.__setattr__(self, "coords", c)
        if not math.isfinite(self.kappa) or abs(self.kappa) > KAPPA_MAX:
            raise GeometryError(f"curvature {self.kappa} outside [-{KAPPA_MAX}, {KAPPA_MAX}]")
        check_point(Tensor(c), self.kappa)

    @property
    def model(self) -> str:
        if abs(self.kappa) < KAPPA_EPS:
            return "euclidean"
        return "hyperboloid" if self.kappa < 0 else "hypersphere"

    @property
    def dim(self) -> int:
        return self.coords.shape[-1] - (0 if self.model == "euclidean" else 1)
