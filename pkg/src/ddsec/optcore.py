"""Box-constrained ridge least squares and null-space extraction.

Problem form::

    minimize  ||b - A phi||^2 + rho ||phi||^2   subject to  l <= phi <= u

When ``rho == 0`` a tie-break ridge ``TIE_BREAK`` is added so the minimizer is
unique even for wide ``A``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls as _lawson_hanson

from ._kernels import box_qp_pg

TIE_BREAK = 1e-8
PG_TOL = 1e-9
KKT_TOL = 1e-6
MAX_ITER = 100_000
POLISH_EVERY = 200


class SolverError(RuntimeError):
    """Iteration cap reached with the KKT residual above tolerance."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class BoxLsProblem:
    A: np.ndarray
    b: np.ndarray
    rho: float
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        r, n = A.shape
        if b.shape != (r,):
            raise ValueError(f"b has length {b.size}, expected {r}")
        if lo.shape != (n,) or hi.shape != (n,):
            raise ValueError(f"bounds must have length {n}")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def n(self):
        return self.A.shape[1]

    def objective(self, phi):
        phi = np.asarray(phi, dtype=float)
        res = self.b - self.A @ phi
        return float(res @ res + self.rho * (phi @ phi))

    def gradient(self, phi):
        phi = np.asarray(phi, dtype=float)
        return 2.0 * (self.A.T @ (self.A @ phi - self.b) + self.rho * phi)


@dataclass(frozen=True)
class SolveDiagnostics:
    iterations: int
    pg_norm: float
    kkt_residual: float
    objective: float
    ridge: float
    converged: bool


def kkt_residual(problem, phi, ridge=None):
    """Largest violation of the box KKT conditions at ``phi``.

    A free coordinate contributes ``|grad_i|``; a coordinate at a bound
    contributes only the part of the gradient pointing out of the box.
    ``ridge`` defaults to the effective ridge used by :func:`solve_box_ls`.
    """
    if ridge is None:
        ridge = problem.rho if problem.rho > 0 else TIE_BREAK
    phi = np.asarray(phi, dtype=float)
    A, b = problem.A, problem.b
    grad = 2.0 * (A.T @ (A @ phi - b) + ridge * phi)
    proj = np.clip(phi - grad, problem.lower, problem.upper)
    return float(np.max(np.abs(phi - proj), initial=0.0))


def _pg_norm(H, g, lo, hi, x):
    grad = 2.0 * (H @ x - g)
    return float(np.linalg.norm(x - np.clip(x - grad, lo, hi)))


def _polish(H, g, lo, hi, x, pg, max_rounds=None):
    # Primal active-set finish from the projected-gradient iterate: exact
    # Newton steps on the free coordinates, blocking bounds join the working
    # set, bounds whose multiplier has the wrong sign leave it.
    n = x.size
    x0 = x
    x = x.copy()
    at_lo = x <= lo
    at_hi = (x >= hi) & ~at_lo
    for _ in range(max_rounds or 10 * n + 10):
        work = at_lo | at_hi
        free = ~work
        grad = 2.0 * (H @ x - g)
        step = np.zeros(n)
        if free.any():
            try:
                step[free] = np.linalg.solve(H[np.ix_(free, free)], -0.5 * grad[free])
            except np.linalg.LinAlgError:
                break
        if np.max(np.abs(step), initial=0.0) <= 1e-15 * (1.0 + np.max(np.abs(x))):
            # multipliers: at lower bound need grad >= 0, at upper need grad <= 0
            viol = np.where(at_lo, -grad, 0.0) + np.where(at_hi, grad, 0.0)
            i = int(np.argmax(viol))
            if viol[i] <= 0.0:
                break
            at_lo[i] = at_hi[i] = False
            continue
        # longest feasible fraction of the step
        alpha, block, to_hi = 1.0, -1, False
        for i in np.flatnonzero(free):
            if step[i] > 0 and x[i] + step[i] > hi[i]:
                a = (hi[i] - x[i]) / step[i]
                if a < alpha:
                    alpha, block, to_hi = a, i, True
            elif step[i] < 0 and x[i] + step[i] < lo[i]:
                a = (lo[i] - x[i]) / step[i]
                if a < alpha:
                    alpha, block, to_hi = a, i, False
        x = np.clip(x + alpha * step, lo, hi)
        if block >= 0:
            if to_hi:
                x[block] = hi[block]
                at_hi[block] = True
            else:
                x[block] = lo[block]
                at_lo[block] = True
    pgp = _pg_norm(H, g, lo, hi, x)
    return (x, pgp) if pgp < pg else (x0, pg)


def solve_box_ls(problem, x0=None, tol=PG_TOL, max_iter=MAX_ITER):
    """Solve a :class:`BoxLsProblem`; returns ``(phi, SolveDiagnostics)``.

    Raises :class:`SolverError` when the iteration cap is hit and the KKT
    residual is still above ``KKT_TOL``.
    """
    A, b = problem.A, problem.b
    n = problem.n
    ridge = problem.rho if problem.rho > 0 else TIE_BREAK
    H = A.T @ A + ridge * np.eye(n)
    g = A.T @ b
    # gradient of x'Hx - 2g'x is 2(Hx - g); Lipschitz constant 2*lambda_max(H)
    L = 2.0 * float(np.linalg.eigvalsh(H)[-1])
    if x0 is None:
        x0 = np.zeros(n)
    lo, hi = problem.lower, problem.upper
    phi = np.clip(np.asarray(x0, dtype=float), lo, hi)
    iters = 0
    while True:
        phi, it, pg = box_qp_pg(H, g, lo, hi, phi, L, tol, min(POLISH_EVERY, max_iter - iters))
        iters += it
        if pg <= tol or iters >= max_iter:
            break
        phi, pg = _polish(H, g, lo, hi, phi, pg)
        if pg <= tol:
            break
    kkt = kkt_residual(problem, phi, ridge)
    diag = SolveDiagnostics(
        iterations=iters,
        pg_norm=pg,
        kkt_residual=kkt,
        objective=problem.objective(phi),
        ridge=ridge,
        converged=pg <= tol,
    )
    if iters >= max_iter and kkt > KKT_TOL:
        raise SolverError(f"box LS did not converge: KKT residual {kkt:.3e}", diag)
    return phi, diag


def solve_nnls(A, b):
    """Nonnegative least squares ``min ||A x - b||, x >= 0`` by the Lawson-Hanson active set.

    Used where the normal matrix is too rank deficient for a first-order
    method (e.g. a wide dual with a handful of independent rows).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    x, _ = _lawson_hanson(A, b, maxiter=50 * A.shape[1])
    return x


def null_space_basis(M, rtol=1e-10):
    """Orthonormal basis (as columns) of ``{x : M x = 0}``.

    Rank is the number of singular values above ``rtol * sigma_max``.  Returns
    an ``n x 0`` array when ``M`` has full column rank.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    n = M.shape[1]
    if M.size == 0:
        return np.eye(n)
    _, s, vt = np.linalg.svd(M, full_matrices=True)
    if s.size == 0 or s[0] == 0.0:
        return np.eye(n)
    rank = int(np.sum(s > rtol * s[0]))
    return vt[rank:].T.copy()
