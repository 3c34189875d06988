import numpy as np
import pytest

from conftest import two_gfm_case
from ddsec.estimator import (PeMonitor, SensitivityEstimate, batch_ls, init_sensitivity, pe_check, predict,
                             rls_update)
from ddsec.network import TWO_PI, load_network


def _fresh(r, n, lam=0.85, rho1=1000.0, S=None):
    S = np.zeros((r, n)) if S is None else S
    return SensitivityEstimate(S=S, F=rho1 * np.eye(n), lam=lam, rho1=rho1)


# --- initialization --------------------------------------------------------

def test_parallel_droop_initialization():
    # droop given in Hz/pu; 0.01 each in parallel gives 0.005 Hz/pu
    case = two_gfm_case(droop_f=0.01)
    case["critical_lines"] = [[1, 3]]
    model = load_network(case)
    est = init_sensitivity(model)
    assert np.allclose(est.S[0], [0.005, 0.005, 0, 0], atol=1e-12)
    assert np.all(est.S[2] == 0)
    assert np.allclose(est.S[1], [0, 0, 0.025, 0.025], atol=1e-12)
    assert np.array_equal(est.F, 1000 * np.eye(4))


def test_all_gfl_rejected():
    case = two_gfm_case()
    for row in case["ders"]["rows"]:
        row[2] = "gfl"
    for row in case["buses"]["rows"][:2]:
        row[1] = "gfl"
    with pytest.raises(ValueError):
        init_sensitivity(load_network(case))


def test_ieee14_pv_columns_zero(ieee14):
    S = init_sensitivity(ieee14).S
    for j in ieee14.gfl:
        assert np.all(S[:, j] == 0) and np.all(S[:, ieee14.m + j] == 0)


def test_predict_on_two_gfm_matches_droop(two_gfm):
    est = init_sensitivity(two_gfm)
    rf_eq, _ = two_gfm.composite_droops()
    dy = predict(est, [0.1, 0.1, 0, 0])
    assert dy[0] == pytest.approx(rf_eq / TWO_PI * 0.2)


def test_predict_trivial():
    assert np.array_equal(predict(_fresh(2, 2), [1.0, 2.0]), [0, 0])
    est = SensitivityEstimate(np.eye(3), np.eye(3))
    assert np.array_equal(predict(est, [1.0, 2.0, 3.0]), [1, 2, 3])


# --- RLS -------------------------------------------------------------------

def test_zero_regressor_only_inflates_covariance():
    est = _fresh(2, 3, S=np.ones((2, 3)))
    new = rls_update(est, np.zeros(3), [5.0, 5.0])
    assert np.array_equal(new.S, est.S)
    assert np.allclose(new.F, est.F / 0.85)
    assert new.k == 1


def test_scalar_hand_case():
    est = SensitivityEstimate(np.zeros((1, 1)), np.array([[1000.0]]), lam=1.0)
    new = rls_update(est, [1.0], [2.0])
    assert new.S[0, 0] == pytest.approx(2000 / 1001, abs=1e-12)
    # F' = F - H du F = 1000 - (1000/1001) * 1000
    assert new.F[0, 0] == pytest.approx(1000 - 1e6 / 1001, abs=1e-9)


def test_rls_rejects_bad_input():
    est = _fresh(2, 3)
    with pytest.raises(ValueError):
        rls_update(est, [1.0, 2.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        rls_update(est, [np.nan, 0, 0], [0.0, 0.0])


def test_noiseless_recovery_within_one_percent():
    rng = np.random.default_rng(0)
    S_true = rng.normal(size=(5, 10))
    est = _fresh(5, 10)
    for _ in range(50):
        du = rng.normal(size=10)
        est = rls_update(est, du, S_true @ du)
    assert np.linalg.norm(est.S - S_true) / np.linalg.norm(S_true) <= 0.01


def test_error_nonincreasing_after_window_fills():
    rng = np.random.default_rng(1)
    S_true = rng.normal(size=(3, 4))
    est = _fresh(3, 4)
    errs = []
    for k in range(60):
        du = rng.normal(size=4)
        est = rls_update(est, du, S_true @ du)
        errs.append(np.linalg.norm(est.S - S_true))
    tail = np.array(errs[8:])
    assert np.all(np.diff(tail) <= 1e-12 + 1e-9 * tail[:-1])


def test_covariance_stays_positive_definite():
    rng = np.random.default_rng(2)
    est = _fresh(2, 4, lam=0.98)
    for _ in range(10_000):
        est = rls_update(est, rng.normal(size=4), rng.normal(size=2))
    assert np.array_equal(est.F, est.F.T)
    assert np.linalg.eigvalsh(est.F)[0] > 0


# --- batch oracle ----------------------------------------------------------

def test_single_consistent_sample():
    du = np.array([1.0, 2.0])
    dy = np.array([3.0])
    S = batch_ls([(du, dy)], 1.0, 1e12, np.zeros((1, 2)))
    # minimum-norm rank-1 fit along du
    assert np.allclose(S, (dy[:, None] * du[None, :]) / (du @ du), atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_rls_equals_batch(seed):
    rng = np.random.default_rng(seed)
    n, r, k = 2 * int(rng.integers(2, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 101))
    S1 = rng.normal(size=(r, n))
    est = _fresh(r, n, S=S1)
    hist = [(rng.normal(size=n), rng.normal(size=r)) for _ in range(k)]
    for du, dy in hist:
        est = rls_update(est, du, dy)
    assert np.abs(est.S - batch_ls(hist, 0.85, 1000.0, S1)).max() <= 1e-8


def test_two_orthogonal_samples_interpolate():
    rho1 = 1e3
    hist = [(np.array([1.0, 0.0]), np.array([3.0])), (np.array([0.0, 1.0]), np.array([-2.0]))]
    S = batch_ls(hist, 1.0, rho1, np.zeros((1, 2)))
    assert np.abs(S - [[3.0, -2.0]]).max() <= 2 * 3.0 / rho1


def test_empty_history_rejected():
    with pytest.raises(ValueError):
        batch_ls([], 0.9, 1.0, np.zeros((1, 1)))


# --- persistent excitation --------------------------------------------------

def test_constant_vector_not_exciting():
    mon = PeMonitor(sigma=20)
    assert not pe_check(mon, [np.array([1.0, 0.5, 0.2, 0.1])] * 30)


def test_cycling_basis_exciting():
    n, c = 10, 0.1
    mon = PeMonitor(sigma=20)
    assert pe_check(mon, [c * np.eye(n)[i % n] for i in range(21)])
    assert mon.eig_range()[0] >= c * c - 1e-15


def test_warm_up_not_exciting():
    mon = PeMonitor(sigma=20)
    assert not pe_check(mon, [np.eye(4)[i % 4] for i in range(20)])
    assert pe_check(mon, [np.eye(4)[0]])


def test_upper_threshold():
    mon = PeMonitor(sigma=3, rho1=10.0)
    assert not pe_check(mon, [10 * np.eye(2)[i % 2] for i in range(4)])


def test_permutation_invariance():
    rng = np.random.default_rng(3)
    vecs = [rng.normal(size=6) * 0.05 for _ in range(21)]
    a, b = PeMonitor(), PeMonitor()
    ra, rb = pe_check(a, vecs), pe_check(b, [vecs[i] for i in rng.permutation(21)])
    assert ra == rb
    assert np.allclose(a.eig_range(), b.eig_range(), rtol=1e-12)


def test_empty_window_range_is_nan():
    assert all(np.isnan(PeMonitor().eig_range()))


def test_monitor_validation():
    with pytest.raises(ValueError):
        PeMonitor(rho1=1e-5, rho2=1e-4)
