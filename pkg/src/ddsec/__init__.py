"""Data-driven secondary control for inverter-based power networks.

Modules: ``network`` (quasi-static droop power flow), ``pvplant`` (ground-truth
PV arrays, irradiance), ``estimator`` (online sensitivity learning),
``pvlearn`` (concave power-voltage curves), ``optcore`` (box least squares),
``controller`` (the two control algorithms) and ``harness`` (scenario runner).
"""

from .controller import ControllerConfig, ControllerState, ControlStep, step_alg1, step_alg2
from .estimator import SensitivityEstimate, batch_ls, init_sensitivity, pe_check, rls_update
from .harness import RunLog, Scenario, load_scenario, prediction_error, run_scenario, summarize
from .network import load_bundled, load_network, measure_output, solve_steady_state
from .optcore import BoxLsProblem, null_space_basis, solve_box_ls
from .pvlearn import PvCurve, estimate_capacity, fit_concave_poly, track_voltage
from .pvplant import PvArrayTruth, load_irradiance, pv_power, true_capacity

__version__ = "0.1.0"

__all__ = [
    "BoxLsProblem", "ControlStep", "ControllerConfig", "ControllerState", "PvArrayTruth", "PvCurve",
    "RunLog", "Scenario", "SensitivityEstimate", "batch_ls", "estimate_capacity", "fit_concave_poly",
    "init_sensitivity", "load_bundled", "load_irradiance", "load_network", "load_scenario",
    "measure_output", "null_space_basis", "pe_check", "prediction_error", "pv_power", "rls_update",
    "run_scenario", "solve_box_ls", "solve_steady_state", "step_alg1", "step_alg2", "summarize",
    "track_voltage", "true_capacity",
]
