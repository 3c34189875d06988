"""Concave polynomial power-voltage models for PV arrays.

Curves are fitted by least squares subject to ``c''(v) <= 0`` on a grid of
the voltage domain.  The constrained fit is solved through its dual, which is
a nonnegative least-squares problem solved exactly by an active-set method.

Internally each curve is held in a scaled variable ``s = (v - mid) / half``
in [-1, 1]; ``PvCurve.beta`` reports the raw coefficients in volts.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial

from .optcore import solve_nnls

CONSTRAINT_GRID = 64
CERTIFICATE_GRID = 512
CONCAVITY_TOL = 1e-9
TRACK_TOL = 1e-8
MIN_CAPACITY = 1e-4
CURVATURE_MARGIN = 1e-8


class FitError(ValueError):
    """Too few samples or an unidentifiable (degenerate) design."""


class InfeasibleTarget(ValueError):
    """Requested power cannot be realized on the high-voltage side of the curve."""


@dataclass(frozen=True)
class PvCurve:
    coef_scaled: np.ndarray  # coefficients in s = (v - mid) / half, increasing powers
    v_min: float
    v_max: float
    window: int = 0
    rmse: float = 0.0
    beta: np.ndarray = field(default=None, compare=False)

    def __post_init__(self):
        coef = np.asarray(self.coef_scaled, dtype=float)
        object.__setattr__(self, "coef_scaled", coef)
        if self.beta is None:
            raw = self._poly().convert().coef
            beta = np.zeros(coef.size)
            beta[: raw.size] = raw
            object.__setattr__(self, "beta", beta)

    @classmethod
    def from_raw(cls, beta, v_min, v_max, **kw):
        """Build a curve from raw coefficients ``beta`` (power in pu, voltage in volts)."""
        beta = np.asarray(beta, dtype=float)
        p = Polynomial(beta).convert(domain=[v_min, v_max], window=[-1.0, 1.0])
        coef = np.zeros(beta.size)
        coef[: p.coef.size] = p.coef
        return cls(coef, float(v_min), float(v_max), beta=beta.copy(), **kw)

    @property
    def degree(self):
        return self.coef_scaled.size - 1

    @property
    def mid(self):
        return 0.5 * (self.v_min + self.v_max)

    @property
    def half(self):
        return 0.5 * (self.v_max - self.v_min)

    def _poly(self):
        return Polynomial(self.coef_scaled, domain=[self.v_min, self.v_max], window=[-1.0, 1.0])

    def __call__(self, v):
        return self._poly()(v)

    def derivative(self, v, order=1):
        return self._poly().deriv(order)(v)

    def concavity_certificate(self, points=CERTIFICATE_GRID, tol=CONCAVITY_TOL):
        """True when ``c''(v) <= tol`` at every point of a uniform grid over the domain."""
        grid = np.linspace(self.v_min, self.v_max, points)
        return bool(np.all(self.derivative(grid, 2) <= tol))


def _second_derivative_rows(s, degree):
    rows = np.zeros((np.size(s), degree + 1))
    for l in range(2, degree + 1):
        rows[:, l] = l * (l - 1) * np.asarray(s) ** (l - 2)
    return rows


def fit_concave_poly(samples, degree, domain, grid_points=CONSTRAINT_GRID):
    """Least-squares degree-``degree`` polynomial through ``samples`` that is concave on ``domain``.

    ``samples`` is a sequence of ``(v, p)`` pairs, ``domain`` a ``(v_min, v_max)`` pair.
    """
    data = np.asarray(samples, dtype=float).reshape(-1, 2)
    v, p = data[:, 0], data[:, 1]
    lo, hi = float(domain[0]), float(domain[1])
    if not hi > lo:
        raise FitError("empty voltage domain")
    if v.size < degree + 1:
        raise FitError(f"need at least {degree + 1} samples, got {v.size}")
    span = hi - lo
    if np.any(v < lo - 1e-9 * span) or np.any(v > hi + 1e-9 * span):
        raise FitError("sample voltage outside the domain")

    mid, half = 0.5 * (lo + hi), 0.5 * span
    s = (v - mid) / half
    X = np.vander(s, degree + 1, increasing=True)
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise FitError("degenerate design: sample voltages do not identify the polynomial")
    Q, R = np.linalg.qr(X)

    if degree < 2:
        coef = np.linalg.solve(R, Q.T @ p)
    else:
        # Fit against a small fixed curvature offset so the returned curve
        # satisfies c'' <= -CURVATURE_MARGIN (scaled units) rather than <= 0 + solver slack.
        offset = np.zeros(degree + 1)
        offset[2] = -0.5 * CURVATURE_MARGIN
        z = Q.T @ (p - X @ offset)
        grid = np.linspace(-1.0, 1.0, grid_points)
        coef = None
        for _ in range(4):
            D = _second_derivative_rows(grid, degree)
            G = np.linalg.solve(R.T, D.T).T  # D R^-1
            mu = solve_nnls(G.T, z)
            coef = np.linalg.solve(R, z - G.T @ mu) + offset
            # tighten with any certificate-grid violations (c'' may bulge between grid points)
            cert = np.linspace(-1.0, 1.0, CERTIFICATE_GRID)
            curv = _second_derivative_rows(cert, degree) @ coef / half**2
            bad = cert[curv > CONCAVITY_TOL]
            if bad.size == 0:
                break
            grid = np.unique(np.concatenate([grid, bad]))
    resid = X @ coef - p
    return PvCurve(coef, lo, hi, window=int(v.size), rmse=float(np.sqrt(np.mean(resid**2))))


def rescale_curve(curve, samples):
    """Scale ``curve`` so its mean over the sample voltages matches the mean sampled power.

    Used when a window is degenerate (one distinct voltage): irradiance scales
    power multiplicatively, and a positive factor preserves concavity.  Falls
    back to a vertical shift when the curve is not positive at the samples.
    """
    data = np.asarray(samples, dtype=float).reshape(-1, 2)
    model = float(np.mean(curve(data[:, 0])))
    measured = float(np.mean(data[:, 1]))
    coef = curve.coef_scaled.copy()
    if model > MIN_CAPACITY and measured >= 0:
        coef *= measured / model
    else:
        coef[0] += measured - model
    resid = np.polynomial.polynomial.polyval((data[:, 0] - curve.mid) / curve.half, coef) - data[:, 1]
    return PvCurve(coef, curve.v_min, curve.v_max, window=int(data.shape[0]),
                   rmse=float(np.sqrt(np.mean(resid**2))))


def estimate_capacity(curve):
    """Maximizer and maximum ``(v_hat, p_bar)`` of the curve over its domain."""
    poly = Polynomial(curve.coef_scaled)
    cands = [-1.0, 1.0]
    if curve.degree >= 2:
        for r in poly.deriv().roots():
            if abs(r.imag) <= 1e-9 and -1.0 <= r.real <= 1.0:
                cands.append(float(r.real))
    vals = poly(np.array(cands))
    k = int(np.argmax(vals))
    return curve.mid + curve.half * cands[k], float(vals[k])


def track_voltage(curve, target, tol=TRACK_TOL, max_iter=100):
    """Voltage on the high-voltage side of the maximum where the curve equals ``target``.

    Newton iteration started at the upper voltage limit, safeguarded by
    bisection on ``[v_hat, v_max]``.
    """
    v_hat, p_bar = estimate_capacity(curve)
    if target > p_bar + 1e-12:
        raise InfeasibleTarget(f"target {target:.6g} exceeds estimated capacity {p_bar:.6g}")
    f_hi = float(curve(curve.v_max)) - target
    if f_hi > tol:
        raise InfeasibleTarget(f"target {target:.6g} below the curve at the upper voltage limit")
    if abs(f_hi) <= tol:
        return float(curve.v_max)
    if p_bar - target <= tol:
        return float(v_hat)

    poly = curve._poly()
    dpoly = poly.deriv()
    a, b = v_hat, curve.v_max  # f(a) > 0 > f(b)
    v = b
    for _ in range(max_iter):
        f = float(poly(v)) - target
        if abs(f) <= 0.01 * tol:
            return float(v)
        if f > 0:
            a = v
        else:
            b = v
        df = float(dpoly(v))
        step_ok = df < 0.0
        if step_ok:
            v_new = v - f / df
            step_ok = a < v_new < b
        if not step_ok:
            v_new = 0.5 * (a + b)
        if v_new == v:
            break
        v = v_new
    if abs(float(poly(v)) - target) <= tol:
        return float(v)
    raise InfeasibleTarget(f"voltage tracking did not converge for target {target:.6g}")
