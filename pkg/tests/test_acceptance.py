"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary) before
asserting, and asserts its own wall-clock budget.
"""

from dataclasses import replace
import time

import numpy as np
import pytest

from conftest import two_gfm_case
from oracles import grid_refine_box_ls
from ddsec.controller import null_perturbation
from ddsec.estimator import SensitivityEstimate, batch_ls, rls_update
from ddsec.harness import load_scenario, bundled_scenario_path, cycle_reductions, run_scenario, summarize
from ddsec.network import TWO_PI, load_network, solve_steady_state, steady_state_residuals
from ddsec.optcore import KKT_TOL, TIE_BREAK, BoxLsProblem, solve_box_ls
from ddsec.pvlearn import InfeasibleTarget, estimate_capacity, fit_concave_poly, track_voltage
from ddsec.pvplant import PvArrayTruth, pv_power, true_capacity

ARRAY = PvArrayTruth(v_oc=600, i_sc=2500, v_shape=75, p_base=750_000, v_min=300, v_max=600)
DOMAIN = (300.0, 600.0)


def _pv_samples(rng, g, count=10):
    # one voltage per equal-width slot of the window, position within the slot random
    edges = np.linspace(*DOMAIN, count + 1)
    v = rng.uniform(edges[:-1], edges[1:])
    return np.column_stack([v, pv_power(ARRAY, v, g)])


def test_c1_rls_matches_batch(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        m = int(rng.integers(2, 6))
        n, r, k = 2 * m, int(rng.integers(1, 6)), int(rng.integers(1, 101))
        S1 = rng.normal(size=(r, n))
        est = SensitivityEstimate(S1, 1000.0 * np.eye(n), lam=0.85, rho1=1000.0)
        hist = [(rng.normal(size=n), rng.normal(size=r)) for _ in range(k)]
        for du, dy in hist:
            est = rls_update(est, du, dy)
        worst = max(worst, float(np.abs(est.S - batch_ls(hist, 0.85, 1000.0, S1)).max()))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-8 and dt < 5
    criterion(1, "RLS equals batch LS", ok, f"max diff {worst:.2e}, {dt:.2f} s")
    assert ok


def test_c2_sensitivity_recovery(criterion):
    t0 = time.perf_counter()
    errs = []
    for seed in range(20):
        rng = np.random.default_rng(200 + seed)
        S_true = rng.normal(size=(5, 10))
        est = SensitivityEstimate(np.zeros((5, 10)), 1000.0 * np.eye(10), lam=0.85)
        for _ in range(100):
            du = rng.normal(size=10)
            # noise variance 1e-4
            est = rls_update(est, du, S_true @ du + rng.normal(0.0, 1e-2, 5))
        errs.append(np.linalg.norm(est.S - S_true) / np.linalg.norm(S_true))
    dt = time.perf_counter() - t0
    ok = max(errs) <= 0.05 and dt < 5
    criterion(2, "sensitivity recovery", ok, f"worst rel. error {max(errs):.2e}, {dt:.2f} s")
    assert ok


def test_c3_box_ls(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    worst_kkt, worst_gap, checked = 0.0, 0.0, 0
    for i in range(200):
        n = int(rng.integers(1, 11))
        r = int(rng.integers(1, 11))
        rho = float(rng.choice([0.0, 0.0, 0.01, 1.0]))
        A = rng.normal(size=(r, n))
        b = rng.normal(size=r) * 2
        lo = -rng.uniform(0.05, 1.0, n)
        hi = rng.uniform(0.05, 1.0, n)
        p = BoxLsProblem(A, b, rho, lo, hi)
        phi, d = solve_box_ls(p)
        worst_kkt = max(worst_kkt, d.kkt_residual)
        if i % 10 == 0:
            ridge = rho if rho > 0 else TIE_BREAK
            _, f_grid = grid_refine_box_ls(A, b, ridge, lo, hi, points=5 if n <= 6 else 3)
            f = p.objective(phi) + (ridge - rho) * float(phi @ phi)
            worst_gap = max(worst_gap, abs(f - f_grid))
            checked += 1
    dt = time.perf_counter() - t0
    ok = worst_kkt <= KKT_TOL and worst_gap <= 1e-5 and checked == 20 and dt < 30
    criterion(3, "box LS correctness", ok, f"max KKT {worst_kkt:.1e}, max oracle gap {worst_gap:.1e} "
              f"on {checked}, {dt:.2f} s")
    assert ok


def test_c4_null_space_neutrality(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    worst, contained, perturbed = 0.0, True, 0
    for _ in range(100):
        r = int(rng.integers(1, 6))
        n = 2 * int(rng.integers(r // 2 + 1, 6))
        S = rng.normal(size=(r, n))
        lo = -rng.uniform(0.01, 0.1, n)
        hi = rng.uniform(0.01, 0.1, n)
        # target scale decides how many coordinates end up on a bound
        b = rng.normal(size=r) * rng.choice([0.01, 0.1, 1.0])
        phi, _ = solve_box_ls(BoxLsProblem(S, b, 0.0, lo, hi))
        alpha, nu = null_perturbation(S, phi, lo, hi, False, rng)
        x = phi + alpha * nu
        contained &= bool(np.all(x >= lo) and np.all(x <= hi))
        if alpha != 0:
            perturbed += 1
            worst = max(worst, float(np.linalg.norm(S @ x - S @ phi)))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and contained and perturbed >= 25 and dt < 5
    criterion(4, "null-space neutrality", ok, f"max output change {worst:.1e} over {perturbed} perturbed, "
              f"contained={contained}, {dt:.2f} s")
    assert ok


def test_c5_concave_fit(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(505)
    grid = np.linspace(*DOMAIN, 512)
    worst_rmse, worst_cap, cert = 0.0, 0.0, True
    for g in np.linspace(100.0, 1100.0, 20):
        curve = fit_concave_poly(_pv_samples(rng, g), 4, DOMAIN)
        _, p_max = true_capacity(ARRAY, g)
        rmse = np.sqrt(np.mean((curve(grid) - pv_power(ARRAY, grid, g)) ** 2))
        worst_rmse = max(worst_rmse, rmse / p_max)
        worst_cap = max(worst_cap, abs(estimate_capacity(curve)[1] - p_max) / p_max)
        cert &= curve.concavity_certificate(512)
    dt = time.perf_counter() - t0
    ok = worst_rmse <= 0.02 and worst_cap <= 0.03 and cert and dt < 10
    criterion(5, "concave PV fit", ok, f"worst RMSE {100 * worst_rmse:.2f}% of p_max, worst capacity error "
              f"{100 * worst_cap:.2f}%, certificate={cert}, {dt:.2f} s")
    assert ok


def test_c6_power_tracking(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(606)
    worst, side_ok, rejected = 0.0, True, 0
    for i in range(100):
        curve = fit_concave_poly(_pv_samples(rng, rng.uniform(200, 1100)), 4, DOMAIN)
        v_hat, p_bar = estimate_capacity(curve)
        target = rng.uniform(float(curve(curve.v_max)), p_bar)
        v = track_voltage(curve, target)
        worst = max(worst, abs(float(curve(v)) - target))
        side_ok &= v_hat - 1e-9 <= v <= curve.v_max
        try:
            track_voltage(curve, p_bar * (1 + rng.uniform(1e-6, 0.5)) + 1e-9)
        except InfeasibleTarget:
            rejected += 1
    dt = time.perf_counter() - t0
    ok = worst <= 1e-8 and side_ok and rejected == 100 and dt < 5
    criterion(6, "PV power tracking", ok, f"max |c(v*)-target| {worst:.1e}, high side={side_ok}, "
              f"infeasible rejected {rejected}/100, {dt:.2f} s")
    assert ok


def test_c7_droop_physics(criterion):
    t0 = time.perf_counter()
    model = load_network(two_gfm_case())
    rf_eq, _ = model.composite_droops()
    base = solve_steady_state(model)
    loads = model.nominal_loads()
    loads[2, 0] += 0.1
    step = solve_steady_state(model, loads=loads, seed=base)
    dev_hz = (step.omega - base.omega) / TWO_PI
    droop_err = abs(dev_hz - (-rf_eq / TWO_PI * 0.1))

    rng = np.random.default_rng(707)
    point, worst = base, 0.0
    u = model.nominal_setpoints()
    for _ in range(100):
        loads = model.nominal_loads() * rng.uniform(0.8, 1.2)
        u = np.clip(u + rng.uniform(-0.02, 0.02, u.size), -0.5, 1.0)
        point = solve_steady_state(model, u, loads, seed=point)
        worst = max(worst, float(steady_state_residuals(model, point)[0].max()))
    dt = time.perf_counter() - t0
    ok = droop_err <= 1e-3 and worst <= 1e-8 and dt < 5
    criterion(7, "droop physics", ok, f"|df - R_eq dP| {droop_err:.1e} Hz, max balance residual {worst:.1e}, "
              f"{dt:.2f} s")
    assert ok


@pytest.fixture(scope="module")
def closed_loop_runs():
    sc = load_scenario(bundled_scenario_path())
    t0 = time.perf_counter()
    logs = [run_scenario(replace(sc, seed=s)) for s in range(10)]
    return logs, time.perf_counter() - t0


def test_c8_closed_loop(criterion, closed_loop_runs):
    logs, dt = closed_loop_runs
    cycles, freq_under, steps, lam_min, flow = 0, 0, 0, np.inf, 0.0
    reduced = 0
    for rl in logs:
        cyc = cycle_reductions(rl)
        cycles += len(cyc)
        reduced += sum(after < before for before, after in cyc)
        err = np.array([r.errors[0] for r in rl.controls])
        freq_under += int(np.sum(err < 10.0))
        steps += err.size
        rep = summarize(rl)
        lam_min = min(lam_min, rep["pe_lambda_min_min"])
        flow = max(flow, rep["max_cycle_end_flow"])
    frac_cycles = reduced / cycles
    frac_freq = freq_under / steps
    ok = frac_cycles >= 0.8 and frac_freq >= 0.7 and lam_min > 0 and flow <= 0.32 and dt < 180
    criterion(8, "closed-loop regulation", ok,
              f"(a) {100 * frac_cycles:.1f}% cycles reduced, (b) {100 * frac_freq:.1f}% freq errors < 10%, "
              f"(c) min lambda_min {lam_min:.2e}, (d) max cycle-end flow {flow:.3f} pu, {dt:.1f} s")
    assert ok


def test_c9_determinism(criterion):
    t0 = time.perf_counter()
    sc = load_scenario(bundled_scenario_path())
    same = True
    for variant in (replace(sc, duration=120.0, seed=42),
                    replace(sc, duration=40.0, seed=42, algorithm="alg1"),
                    replace(sc, duration=40.0, seed=42, algorithm="additive", measurement_noise=(1e-4,))):
        same &= run_scenario(variant).to_jsonl().encode() == run_scenario(variant).to_jsonl().encode()
    dt = time.perf_counter() - t0
    ok = same and dt < 60
    criterion(9, "determinism", ok, f"identical={same}, {dt:.1f} s")
    assert ok
