"""Hot inner loops, each with a numba path and a pure-numpy path.

The public names (``box_qp_pg``, ``rls_step``, ``rls_sequence``) dispatch on
``ddsec._accel.USE_NUMBA``.  Both paths run the same algorithm; results agree
to rounding, not bit-for-bit.
"""

import math

import numpy as np

from ._accel import USE_NUMBA

# ---------------------------------------------------------------------------
# Box-constrained quadratic:  minimize  x'Hx - 2 g'x   s.t.  lo <= x <= hi
# Monotone accelerated projected gradient (FISTA with function-value restart).
# ---------------------------------------------------------------------------


def _box_qp_pg_loops(H, g, lo, hi, x0, L, tol, max_iter):
    n = H.shape[0]
    x = np.empty(n)
    for i in range(n):
        x[i] = min(max(x0[i], lo[i]), hi[i])
    y = x.copy()
    z = np.empty(n)
    Hv = np.empty(n)
    inv_l = 1.0 / L

    # f(x) = x'Hx - 2 g'x
    for i in range(n):
        s = 0.0
        for j in range(n):
            s += H[i, j] * x[j]
        Hv[i] = s
    fx = 0.0
    for i in range(n):
        fx += x[i] * Hv[i] - 2.0 * g[i] * x[i]

    t = 1.0
    pg = math.inf
    it = 0
    while it < max_iter:
        it += 1
        # gradient step from the extrapolated point
        for i in range(n):
            s = 0.0
            for j in range(n):
                s += H[i, j] * y[j]
            gi = 2.0 * (s - g[i])
            z[i] = min(max(y[i] - inv_l * gi, lo[i]), hi[i])
        for i in range(n):
            s = 0.0
            for j in range(n):
                s += H[i, j] * z[j]
            Hv[i] = s
        fz = 0.0
        for i in range(n):
            fz += z[i] * Hv[i] - 2.0 * g[i] * z[i]

        if fz > fx:
            # restart: plain projected step from x guarantees descent
            t = 1.0
            for i in range(n):
                s = 0.0
                for j in range(n):
                    s += H[i, j] * x[j]
                gi = 2.0 * (s - g[i])
                z[i] = min(max(x[i] - inv_l * gi, lo[i]), hi[i])
            for i in range(n):
                s = 0.0
                for j in range(n):
                    s += H[i, j] * z[j]
                Hv[i] = s
            fz = 0.0
            for i in range(n):
                fz += z[i] * Hv[i] - 2.0 * g[i] * z[i]

        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        mom = (t - 1.0) / t_new
        for i in range(n):
            y[i] = z[i] + mom * (z[i] - x[i])
            x[i] = z[i]
        fx = fz
        t = t_new

        # projected-gradient norm at x (unit step); Hv holds H x
        pg2 = 0.0
        for i in range(n):
            gi = 2.0 * (Hv[i] - g[i])
            d = x[i] - min(max(x[i] - gi, lo[i]), hi[i])
            pg2 += d * d
        pg = math.sqrt(pg2)
        if pg <= tol:
            break
    return x, it, pg


def _box_qp_pg_numpy(H, g, lo, hi, x0, L, tol, max_iter):
    x = np.clip(x0, lo, hi)
    y = x.copy()
    fx = x @ H @ x - 2.0 * g @ x
    t = 1.0
    pg = math.inf
    it = 0
    while it < max_iter:
        it += 1
        z = np.clip(y - 2.0 * (H @ y - g) / L, lo, hi)
        Hz = H @ z
        fz = z @ Hz - 2.0 * g @ z
        if fz > fx:
            t = 1.0
            z = np.clip(x - 2.0 * (H @ x - g) / L, lo, hi)
            Hz = H @ z
            fz = z @ Hz - 2.0 * g @ z
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = z + ((t - 1.0) / t_new) * (z - x)
        x, fx, t = z, fz, t_new
        grad = 2.0 * (Hz - g)
        pg = float(np.linalg.norm(x - np.clip(x - grad, lo, hi)))
        if pg <= tol:
            break
    return x, it, pg


# ---------------------------------------------------------------------------
# Exponentially weighted RLS, one regressor, matrix-valued parameter S (r x n).
# ---------------------------------------------------------------------------


def _rls_step_loops(S, F, du, dy, lam):
    r, n = S.shape
    Fdu = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(n):
            s += F[i, j] * du[j]
        Fdu[i] = s
    q = 0.0
    for i in range(n):
        q += du[i] * Fdu[i]
    inv_lam = 1.0 / lam
    denom = 1.0 + inv_lam * q
    h = np.empty(n)
    for i in range(n):
        h[i] = inv_lam * Fdu[i] / denom

    S_new = np.empty((r, n))
    for a in range(r):
        pred = 0.0
        for j in range(n):
            pred += S[a, j] * du[j]
        err = dy[a] - pred
        for j in range(n):
            S_new[a, j] = S[a, j] + err * h[j]

    # F <- F/lam - h (F du)'/lam, then symmetrize
    F_new = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            F_new[i, j] = inv_lam * F[i, j] - inv_lam * h[i] * Fdu[j]
    for i in range(n):
        for j in range(i + 1, n):
            m = 0.5 * (F_new[i, j] + F_new[j, i])
            F_new[i, j] = m
            F_new[j, i] = m
    return S_new, F_new


def _rls_step_numpy(S, F, du, dy, lam):
    Fdu = F @ du
    h = (Fdu / lam) / (1.0 + (du @ Fdu) / lam)
    S_new = S + np.outer(dy - S @ du, h)
    F_new = F / lam - np.outer(h, Fdu) / lam
    F_new = 0.5 * (F_new + F_new.T)
    return S_new, F_new


def _rls_sequence_loops(S, F, dus, dys, lam):
    for k in range(dus.shape[0]):
        S, F = _rls_step_nb(S, F, dus[k], dys[k], lam)
    return S, F


def _rls_sequence_numpy(S, F, dus, dys, lam):
    for k in range(dus.shape[0]):
        S, F = _rls_step_numpy(S, F, dus[k], dys[k], lam)
    return S, F


if USE_NUMBA:
    from numba import njit

    _box_qp_pg_nb = njit(cache=True, nogil=True)(_box_qp_pg_loops)
    _rls_step_nb = njit(cache=True, nogil=True)(_rls_step_loops)
    _rls_sequence_nb = njit(cache=True, nogil=True)(_rls_sequence_loops)
else:
    _box_qp_pg_nb = None
    _rls_step_nb = None
    _rls_sequence_nb = None


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def box_qp_pg(H, g, lo, hi, x0, L, tol, max_iter, use_numba=None):
    """Run the accelerated projected-gradient loop; returns ``(x, iters, pg_norm)``."""
    use = USE_NUMBA if use_numba is None else (use_numba and _box_qp_pg_nb is not None)
    args = (_f64(H), _f64(g), _f64(lo), _f64(hi), _f64(x0), float(L), float(tol), int(max_iter))
    if use:
        x, it, pg = _box_qp_pg_nb(*args)
    else:
        x, it, pg = _box_qp_pg_numpy(*args)
    return x, int(it), float(pg)


def rls_step(S, F, du, dy, lam, use_numba=None):
    use = USE_NUMBA if use_numba is None else (use_numba and _rls_step_nb is not None)
    fn = _rls_step_nb if use else _rls_step_numpy
    return fn(_f64(S), _f64(F), _f64(du), _f64(dy), float(lam))


def rls_sequence(S, F, dus, dys, lam, use_numba=None):
    use = USE_NUMBA if use_numba is None else (use_numba and _rls_sequence_nb is not None)
    fn = _rls_sequence_nb if use else _rls_sequence_numpy
    return fn(_f64(S), _f64(F), _f64(np.atleast_2d(dus)), _f64(np.atleast_2d(dys)), float(lam))
