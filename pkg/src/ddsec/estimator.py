"""Online sensitivity estimation.

The output change is predicted as ``dy_hat = S_hat du``.  ``S_hat`` is tracked
by exponentially weighted recursive least squares with forgetting factor
``lam`` and initial covariance ``rho1 * I``; :func:`batch_ls` is the
closed-form minimizer of the same regularized cost and serves as its oracle.
"""

from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from ._kernels import rls_step
from .network import TWO_PI


@dataclass(frozen=True)
class SensitivityEstimate:
    """Sensitivity matrix with rows ordered ``[frequency; voltages; line flows]``."""

    S: np.ndarray  # (1 + d_v + d_l) x 2m
    F: np.ndarray  # 2m x 2m, symmetric positive definite
    lam: float = 0.85
    rho1: float = 1000.0
    k: int = 0

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ValueError("forgetting factor must lie in (0, 1]")
        if self.rho1 <= 0:
            raise ValueError("rho1 must be positive")


def init_sensitivity(model, lam=0.85, rho1=1000.0):
    """Droop-based initial estimate.

    GFM active setpoints move frequency by the composite frequency droop, GFM
    reactive setpoints move every critical voltage by the composite voltage
    droop, line flows start insensitive, and GFL (PV) columns start at zero.
    The frequency row is in Hz per pu, matching the measured output.
    """
    gfm = model.gfm
    if not gfm:
        raise ValueError("initialization needs at least one grid-forming inverter")
    m = model.m
    rf_eq, rv_eq = model.composite_droops()
    e = np.zeros(m)
    e[gfm] = 1.0
    S = np.zeros((model.d_y, 2 * m))
    S[0, :m] = rf_eq / TWO_PI * e
    S[1:1 + model.d_v, m:] = rv_eq * e
    return SensitivityEstimate(S=S, F=rho1 * np.eye(2 * m), lam=lam, rho1=rho1, k=0)


def rls_update(est, du, dy):
    """One forgetting-factor RLS step on the pair ``(du, dy)``."""
    du = np.asarray(du, dtype=float).reshape(-1)
    dy = np.asarray(dy, dtype=float).reshape(-1)
    r, n = est.S.shape
    if du.shape != (n,) or dy.shape != (r,):
        raise ValueError(f"expected du of length {n} and dy of length {r}")
    if not (np.all(np.isfinite(du)) and np.all(np.isfinite(dy))):
        raise ValueError("non-finite RLS input")
    S, F = rls_step(est.S, est.F, du, dy, est.lam)
    return replace(est, S=S, F=F, k=est.k + 1)


def batch_ls(history, lam, rho1, S1):
    """Closed-form minimizer of the regularized, exponentially weighted LS cost.

    Minimizes ``sum_l lam^(k-l) ||dy_l - S du_l||^2 + lam^k / rho1 ||S - S1||_F^2``
    over the ``k`` pairs in ``history``.
    """
    history = list(history)
    if not history:
        raise ValueError("history is empty")
    S1 = np.asarray(S1, dtype=float)
    k = len(history)
    n = S1.shape[1]
    prior = lam**k / rho1
    gram = prior * np.eye(n)
    cross = prior * S1
    for l, (du, dy) in enumerate(history, start=1):
        w = lam ** (k - l)
        du = np.asarray(du, dtype=float)
        gram += w * np.outer(du, du)
        cross += w * np.outer(np.asarray(dy, dtype=float), du)
    return np.linalg.solve(gram, cross.T).T


def predict(est, du):
    return est.S @ np.asarray(du, dtype=float)


class PeMonitor:
    """Sliding-window persistent-excitation check on a vector sequence.

    The sequence is exciting when the eigenvalues of the Gram sum over the
    last ``sigma + 1`` vectors lie strictly between ``rho2`` and ``rho1``.
    Until the window is full the check reports ``False``.
    """

    def __init__(self, sigma=20, rho1=1e4, rho2=1e-4):
        if not rho1 > rho2 > 0:
            raise ValueError("need rho1 > rho2 > 0")
        if sigma < 0:
            raise ValueError("sigma must be nonnegative")
        self.sigma = int(sigma)
        self.rho1 = float(rho1)
        self.rho2 = float(rho2)
        self.buffer = deque(maxlen=self.sigma + 1)

    def push(self, vec):
        self.buffer.append(np.array(vec, dtype=float).reshape(-1))

    @property
    def full(self):
        return len(self.buffer) == self.sigma + 1

    def gram(self):
        rows = np.array(self.buffer)
        return rows.T @ rows

    def eig_range(self):
        """``(lambda_min, lambda_max)`` of the windowed Gram matrix, NaN while empty."""
        if not self.buffer:
            return float("nan"), float("nan")
        w = np.linalg.eigvalsh(self.gram())
        return float(w[0]), float(w[-1])

    def check(self):
        return pe_check(self)


def pe_check(monitor, tail=None):
    """Persistent-excitation test for ``monitor``'s window.

    When ``tail`` (a sequence of vectors) is given, it is pushed first.
    """
    if tail is not None:
        for vec in tail:
            monitor.push(vec)
    if not monitor.full:
        return False
    lo, hi = monitor.eig_range()
    return monitor.rho2 < lo and hi < monitor.rho1
