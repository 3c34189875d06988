import os
import subprocess
import sys

import numpy as np
import pytest

from ddsec import _accel, _kernels

needs_numba = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")


def _qp(rng, n):
    A = rng.normal(size=(n + 2, n))
    H = A.T @ A + 1e-8 * np.eye(n)
    g = A.T @ rng.normal(size=n + 2)
    lo = -rng.uniform(0.1, 1, n)
    hi = rng.uniform(0.1, 1, n)
    L = 2 * np.linalg.eigvalsh(H)[-1]
    return H, g, lo, hi, L


@needs_numba
@pytest.mark.parametrize("n", [1, 4, 10])
def test_box_qp_paths_agree(n):
    H, g, lo, hi, L = _qp(np.random.default_rng(n), n)
    x0 = np.zeros(n)
    a = _kernels.box_qp_pg(H, g, lo, hi, x0, L, 1e-12, 5000, use_numba=True)
    b = _kernels.box_qp_pg(H, g, lo, hi, x0, L, 1e-12, 5000, use_numba=False)
    assert np.allclose(a[0], b[0], atol=1e-9)


@needs_numba
def test_rls_paths_agree():
    rng = np.random.default_rng(1)
    S = rng.normal(size=(5, 10))
    F = 1000 * np.eye(10)
    dus = rng.normal(size=(60, 10))
    dys = rng.normal(size=(60, 5))
    a = _kernels.rls_sequence(S, F, dus, dys, 0.85, use_numba=True)
    b = _kernels.rls_sequence(S, F, dus, dys, 0.85, use_numba=False)
    assert np.allclose(a[0], b[0], rtol=1e-9, atol=1e-9)
    assert np.allclose(a[1], b[1], rtol=1e-9, atol=1e-9 * np.abs(b[1]).max())


def test_objective_monotone_along_iterations():
    H, g, lo, hi, L = _qp(np.random.default_rng(7), 8)
    x0 = hi.copy()
    f = lambda x: x @ H @ x - 2 * g @ x  # noqa: E731
    vals = [f(_kernels._box_qp_pg_numpy(H, g, lo, hi, x0, L, 0.0, k)[0]) for k in range(1, 80)]
    assert np.all(np.diff(vals) <= 1e-12)


def test_rls_step_symmetric_covariance():
    rng = np.random.default_rng(2)
    S, F = np.zeros((2, 3)), np.eye(3) * 10
    for _ in range(30):
        S, F = _kernels.rls_step(S, F, rng.normal(size=3), rng.normal(size=2), 0.9)
    assert np.array_equal(F, F.T)


@pytest.mark.parametrize("value,expect", [("1", "False"), ("", str(_accel.HAVE_NUMBA))])
def test_env_switch(value, expect):
    env = dict(os.environ, DDSEC_DISABLE_NUMBA=value)
    out = subprocess.run([sys.executable, "-c", "from ddsec import _accel; print(_accel.USE_NUMBA)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expect


def test_closed_loop_agrees_across_paths():
    code = ("import json; from dataclasses import replace; from ddsec.harness import *; "
            "rl = run_scenario(replace(load_scenario(bundled_scenario_path()), duration=12.0)); "
            "print(json.dumps(rl.records[-1].y))")
    outs = []
    for flag in ("1", "0"):
        env = dict(os.environ, DDSEC_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        outs.append(np.array(eval(res.stdout)))
    assert np.allclose(outs[0], outs[1], atol=1e-6)
