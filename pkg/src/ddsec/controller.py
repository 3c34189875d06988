"""Data-driven secondary control with persistent excitation.

Each control instant solves a box-constrained least-squares problem on the
learned sensitivity ``S_hat``::

    minimize ||dy_target + w - S_hat phi||^2 + rho ||phi||^2
    subject to lower + eta1 <= phi <= upper - eta2

and perturbs the solution inside ``Null(S_hat)`` when the recent inputs are
not persistently exciting.  :func:`step_alg2` additionally keeps the PV
active-power coordinates within the incremental capacities estimated from
the learned power-voltage curves and converts them into DC voltage commands.
"""

from dataclasses import dataclass

import numpy as np

from .estimator import PeMonitor
from .optcore import BoxLsProblem, null_space_basis, solve_box_ls
from .pvlearn import MIN_CAPACITY, InfeasibleTarget, estimate_capacity, track_voltage

ALGORITHMS = ("alg1", "alg2", "additive")
FLOW_MODES = ("one_sided", "two_sided")
NULL_RESAMPLES = 8
MIN_STEP = 1e-12


@dataclass(frozen=True)
class ControllerConfig:
    y_target: np.ndarray  # [f* (Hz); V* over critical buses; p* over critical lines]
    d_v: int
    rho: float = 0.0
    a1: float = 0.5
    a2: float = 0.4
    a3: float = 0.4
    du_lower: float = -0.1  # scalar or per-input vector
    du_upper: float = 0.1
    alpha_scale: float = 0.05
    flow_mode: str = "one_sided"
    seed: int = None

    def __post_init__(self):
        object.__setattr__(self, "y_target", np.asarray(self.y_target, dtype=float).reshape(-1))
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        for name in ("a1", "a2", "a3"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        lo, hi = np.asarray(self.du_lower, dtype=float), np.asarray(self.du_upper, dtype=float)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("input bounds must be finite")
        if np.any(lo > 0) or np.any(hi < 0):
            raise ValueError("input bounds must bracket zero")
        if self.alpha_scale < 0:
            raise ValueError("alpha_scale must be nonnegative")
        if self.flow_mode not in FLOW_MODES:
            raise ValueError(f"flow_mode must be one of {FLOW_MODES}")
        if not 0 <= self.d_v <= self.y_target.size - 1:
            raise ValueError("d_v inconsistent with y_target")

    def bounds(self, n):
        lo = np.broadcast_to(np.asarray(self.du_lower, dtype=float), (n,)).copy()
        hi = np.broadcast_to(np.asarray(self.du_upper, dtype=float), (n,)).copy()
        return lo, hi


@dataclass
class ControlStep:
    k: int
    algorithm: str
    dy_target: np.ndarray
    w: np.ndarray
    eta1: np.ndarray
    eta2: np.ndarray
    zeta_lo: np.ndarray
    zeta_hi: np.ndarray
    alpha: float
    nu: np.ndarray
    phi: np.ndarray
    du: np.ndarray
    v_star: np.ndarray
    pe_inputs: bool
    pe_targets: bool
    pe_pv_lower: bool
    pe_pv_upper: bool
    pv_lower: np.ndarray
    pv_upper: np.ndarray
    pv_capacity: np.ndarray
    kkt: float
    iterations: int
    objective: float


class ControllerState:
    """Estimator, excitation monitors and configuration owned by one control loop.

    ``pv_inputs`` lists the input coordinates (0-based, active-power part of
    ``u``) that belong to PV arrays; ``pv_domains`` their voltage windows.
    """

    def __init__(self, config, estimate, pv_inputs=(), pv_domains=(), sigma=20, pe_upper=1e4,
                 pe_lower=1e-4):
        self.config = config
        self.estimate = estimate
        self.pv_inputs = tuple(int(i) for i in pv_inputs)
        self.pv_domains = tuple(tuple(map(float, d)) for d in pv_domains)
        if self.pv_domains and len(self.pv_domains) != len(self.pv_inputs):
            raise ValueError("one voltage domain per PV input required")
        make = lambda: PeMonitor(sigma, pe_upper, pe_lower)  # noqa: E731
        self.inputs_monitor = make()
        self.targets_monitor = make()
        self.pv_lower_monitor = make()
        self.pv_upper_monitor = make()
        self.k = 0

    @property
    def n_inputs(self):
        return self.estimate.S.shape[1]


def output_target(config, y):
    """``dy* = y* - y`` with the line-flow channels treated per ``config.flow_mode``."""
    y = np.asarray(y, dtype=float)
    dy = config.y_target - y
    if config.flow_mode == "one_sided":
        start = 1 + config.d_v
        p = y[start:]
        limit = config.y_target[start:]
        # only act when the flow magnitude exceeds its limit
        dy[start:] = np.sign(p) * np.minimum(0.0, limit - np.abs(p))
    return dy


def jitter_target(dy_target, targets_pe, a1, rng):
    dy_target = np.asarray(dy_target, dtype=float)
    if not 0.0 < a1 < 1.0:
        raise ValueError("a1 must lie in (0, 1)")
    if targets_pe:
        return np.zeros_like(dy_target)
    return -dy_target * rng.uniform(0.0, a1, dy_target.shape)


def jitter_bounds(lower, upper, a2, rng):
    if not 0.0 < a2 < 1.0:
        raise ValueError("a2 must lie in (0, 1)")
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    eta1 = rng.uniform(0.0, 1.0, lower.shape) * a2 * np.abs(lower)
    eta2 = rng.uniform(0.0, 1.0, upper.shape) * a2 * np.abs(upper)
    return eta1, eta2


def _random_null_direction(basis, rng):
    # project an ambient Gaussian: isotropic in the null space like a draw on
    # the basis coefficients, but independent of which orthonormal basis the
    # SVD happened to return (that basis is not unique, the projector is)
    z = rng.standard_normal(basis.shape[0])
    nu = basis @ (basis.T @ z)
    return nu / np.linalg.norm(nu)


def _max_alpha(nu, room_up, room_down):
    """Largest ``a >= 0`` with ``-room_down <= a * nu <= room_up`` (both rooms nonnegative)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.where(nu > 0, room_up / nu, np.inf)
        down = np.where(nu < 0, -room_down / nu, np.inf)
    return float(max(0.0, min(np.min(up), np.min(down))))


def null_perturbation(S, phi, lower, upper, inputs_pe, rng, scale=0.05):
    """``(alpha, nu)`` with ``nu`` a random unit vector in ``Null(S)`` and ``phi + alpha nu`` in the box."""
    phi = np.asarray(phi, dtype=float)
    zero = (0.0, np.zeros_like(phi))
    if inputs_pe or scale == 0:
        return zero
    basis = null_space_basis(S)
    if basis.shape[1] == 0:
        return zero
    alpha = rng.uniform(0.0, scale)
    room_up = np.maximum(np.asarray(upper) - phi, 0.0)
    room_down = np.maximum(phi - np.asarray(lower), 0.0)
    for _ in range(NULL_RESAMPLES):
        nu = _random_null_direction(basis, rng)
        a_max = _max_alpha(nu, room_up, room_down)
        if a_max > MIN_STEP:
            return min(alpha, a_max), nu
    return zero


def pv_incremental_bounds(capacities, p_prev):
    """``(-P, p_bar - P)`` per PV array; capacities below the tracking floor count as zero."""
    cap = np.asarray(capacities, dtype=float)
    p_prev = np.asarray(p_prev, dtype=float)
    if np.any(p_prev < 0):
        raise ValueError("PV injections must be nonnegative")
    cap = np.where(cap < MIN_CAPACITY, 0.0, cap)
    return -p_prev, cap - p_prev


def _solve(state, b, lower, upper):
    prob = BoxLsProblem(state.estimate.S, b, state.config.rho, lower, upper)
    return solve_box_ls(prob)


def _pe_flag(monitor, vec, force):
    if vec is not None:
        monitor.push(vec)
    return monitor.check() if force is None else bool(force)


def _empty(n):
    return np.zeros(n)


def _instant_bounds(state, bounds):
    if bounds is None:
        return state.config.bounds(state.n_inputs)
    lo, hi = (np.asarray(b, dtype=float).copy() for b in bounds)
    if np.any(lo > 0) or np.any(hi < 0):
        raise ValueError("input bounds must bracket zero")
    return lo, hi


def step_alg1(state, y_prev, rng, force_pe=None, bounds=None):
    """One instant of the persistently excited regulation loop.

    ``force_pe`` overrides every excitation flag when not ``None``; ``bounds``
    replaces the configured input box for this instant.
    """
    cfg = state.config
    n = state.n_inputs
    state.k += 1
    dy_target = output_target(cfg, y_prev)
    pe_targets = _pe_flag(state.targets_monitor, dy_target, force_pe)
    pe_inputs = _pe_flag(state.inputs_monitor, None, force_pe)
    w = jitter_target(dy_target, pe_targets, cfg.a1, rng)
    lo, hi = _instant_bounds(state, bounds)
    eta1, eta2 = jitter_bounds(lo, hi, cfg.a2, rng)
    phi, diag = _solve(state, dy_target + w, lo + eta1, hi - eta2)
    alpha, nu = null_perturbation(state.estimate.S, phi, lo, hi, pe_inputs, rng, cfg.alpha_scale)
    du = np.clip(phi + alpha * nu, lo, hi)
    state.inputs_monitor.push(du)
    n_pv = len(state.pv_inputs)
    return ControlStep(
        k=state.k, algorithm="alg1", dy_target=dy_target, w=w, eta1=eta1, eta2=eta2,
        zeta_lo=_empty(n_pv), zeta_hi=_empty(n_pv), alpha=float(alpha), nu=nu, phi=phi, du=du,
        v_star=np.full(n_pv, np.nan), pe_inputs=pe_inputs, pe_targets=pe_targets,
        pe_pv_lower=True, pe_pv_upper=True, pv_lower=_empty(n_pv), pv_upper=_empty(n_pv),
        pv_capacity=np.full(n_pv, np.nan), kkt=diag.kkt_residual, iterations=diag.iterations,
        objective=diag.objective)


def step_additive(state, y_prev, rng, bounds=None):
    """Baseline: unjittered problem plus uniform additive noise, clipped to the box."""
    cfg = state.config
    n = state.n_inputs
    state.k += 1
    dy_target = output_target(cfg, y_prev)
    lo, hi = _instant_bounds(state, bounds)
    phi, diag = _solve(state, dy_target, lo, hi)
    noise = rng.uniform(-cfg.alpha_scale, cfg.alpha_scale, n) if cfg.alpha_scale > 0 else np.zeros(n)
    du = np.clip(phi + noise, lo, hi)
    state.inputs_monitor.push(du)
    state.targets_monitor.push(dy_target)
    n_pv = len(state.pv_inputs)
    return ControlStep(
        k=state.k, algorithm="additive", dy_target=dy_target, w=np.zeros_like(dy_target),
        eta1=np.zeros(n), eta2=np.zeros(n), zeta_lo=_empty(n_pv), zeta_hi=_empty(n_pv),
        alpha=0.0, nu=noise, phi=phi, du=du, v_star=np.full(n_pv, np.nan),
        pe_inputs=state.inputs_monitor.check(), pe_targets=state.targets_monitor.check(),
        pe_pv_lower=True, pe_pv_upper=True, pv_lower=_empty(n_pv), pv_upper=_empty(n_pv),
        pv_capacity=np.full(n_pv, np.nan), kkt=diag.kkt_residual, iterations=diag.iterations,
        objective=diag.objective)


def _pv_shift_box(lo, hi, eta1, eta2, pv_idx, pv_lo, pv_hi):
    """Fixed box ``[c, d]`` for ``phi`` and box ``[A, B]`` for ``phi + alpha nu``.

    PV capacity is physical, so it overrides the random tightening ``eta``;
    the global input box overrides a PV box that lies entirely outside it.
    """
    c, d = lo + eta1, hi - eta2
    A, B = lo.copy(), hi.copy()
    for j, i in enumerate(pv_idx):
        a_i, b_i = max(lo[i], pv_lo[j]), min(hi[i], pv_hi[j])
        if a_i > b_i:
            a_i = b_i = hi[i] if pv_lo[j] > hi[i] else lo[i]
        A[i], B[i] = a_i, b_i
        c[i] = min(c[i], B[i])
        d[i] = max(d[i], A[i])
    return c, d, A, B


def step_alg2(state, y_prev, curves, p_pv_prev, rng, force_pe=None, bounds=None):
    """One instant of regulation with PV power tracking.

    ``curves`` are the current learned PV curves and ``p_pv_prev`` the PV
    injections measured before the instant, both ordered like ``state.pv_inputs``.
    """
    cfg = state.config
    n = state.n_inputs
    pv_idx = state.pv_inputs
    n_pv = len(pv_idx)
    if len(curves) != n_pv:
        raise ValueError("one curve per PV input required")
    state.k += 1
    p_prev = np.asarray(p_pv_prev, dtype=float).reshape(-1)

    caps = [estimate_capacity(c) for c in curves]
    p_bar = np.array([p for _, p in caps])
    pv_lo, pv_hi = pv_incremental_bounds(p_bar, p_prev)

    dy_target = output_target(cfg, y_prev)
    pe_targets = _pe_flag(state.targets_monitor, dy_target, force_pe)
    pe_pv_lower = _pe_flag(state.pv_lower_monitor, pv_lo, force_pe) if n_pv else True
    pe_pv_upper = _pe_flag(state.pv_upper_monitor, pv_hi, force_pe) if n_pv else True
    pe_inputs = _pe_flag(state.inputs_monitor, None, force_pe)

    w = jitter_target(dy_target, pe_targets, cfg.a1, rng)
    lo, hi = _instant_bounds(state, bounds)
    eta1, eta2 = jitter_bounds(lo, hi, cfg.a2, rng)
    zeta_lo = np.zeros(n_pv) if pe_pv_lower else rng.uniform(0.0, 1.0, n_pv) * cfg.a3 * np.abs(pv_lo)
    zeta_hi = np.zeros(n_pv) if pe_pv_upper else rng.uniform(0.0, 1.0, n_pv) * cfg.a3 * np.abs(pv_hi)
    c, d, A, B = _pv_shift_box(lo, hi, eta1, eta2, pv_idx, pv_lo + zeta_lo, pv_hi - zeta_hi)

    # alpha and nu are fixed before the solve and enter the box as offsets
    alpha, nu = 0.0, np.zeros(n)
    if not pe_inputs and cfg.alpha_scale > 0:
        basis = null_space_basis(state.estimate.S)
        if basis.shape[1]:
            draw = rng.uniform(0.0, cfg.alpha_scale)
            for _ in range(NULL_RESAMPLES):
                cand = _random_null_direction(basis, rng)
                a_max = _max_alpha(cand, B - c, d - A)
                if a_max > MIN_STEP:
                    alpha, nu = min(draw, a_max), cand
                    break
    shift = alpha * nu
    lower = np.maximum(c, A - shift)
    upper = np.minimum(d, B - shift)
    lower = np.minimum(lower, upper)
    phi, diag = _solve(state, dy_target + w, lower, upper)
    du = np.clip(phi + shift, A, B)
    state.inputs_monitor.push(du)

    v_star = np.empty(n_pv)
    for j, (curve, i) in enumerate(zip(curves, pv_idx)):
        v_star[j] = command_voltage(curve, p_prev[j] + du[i], caps[j])
    return ControlStep(
        k=state.k, algorithm="alg2", dy_target=dy_target, w=w, eta1=eta1, eta2=eta2,
        zeta_lo=zeta_lo, zeta_hi=zeta_hi, alpha=float(alpha), nu=nu, phi=phi, du=du,
        v_star=v_star, pe_inputs=pe_inputs, pe_targets=pe_targets, pe_pv_lower=pe_pv_lower,
        pe_pv_upper=pe_pv_upper, pv_lower=pv_lo, pv_upper=pv_hi, pv_capacity=p_bar,
        kkt=diag.kkt_residual, iterations=diag.iterations, objective=diag.objective)


def command_voltage(curve, target, capacity=None):
    """DC voltage realizing ``target`` on ``curve``, saturating at the curve's extremes.

    A target above the estimated capacity maps to the estimated MPP voltage, one
    below the curve at the upper voltage limit maps to that limit.
    """
    v_hat, p_bar = estimate_capacity(curve) if capacity is None else capacity
    if p_bar < MIN_CAPACITY:
        return float(curve.v_max)
    try:
        return track_voltage(curve, target)
    except InfeasibleTarget:
        return float(v_hat) if target > p_bar else float(curve.v_max)


def run_step(state, algorithm, y_prev, rng, curves=(), p_pv_prev=(), bounds=None):
    if algorithm == "alg1":
        return step_alg1(state, y_prev, rng, bounds=bounds)
    if algorithm == "alg2":
        return step_alg2(state, y_prev, curves, p_pv_prev, rng, bounds=bounds)
    if algorithm == "additive":
        return step_additive(state, y_prev, rng, bounds=bounds)
    raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
