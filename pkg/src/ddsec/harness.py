"""Scenario runner: event calendar, plant/controller coupling, logs and statistics.

Loads are perturbed at multiples of the perturbation period (no control at
those instants); the controller runs at every other multiple of the control
period.  The plant is quasi-static: each event jumps to the next solved
steady state.
"""

from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace
import csv
import io
import json
import logging
import math
from pathlib import Path

import numpy as np
import yaml

from .controller import ALGORITHMS, ControlStep, ControllerConfig, ControllerState, command_voltage, run_step
from .estimator import init_sensitivity, rls_update
from .network import load_network, measure_output, perturb_loads, solve_steady_state
from .pvlearn import FitError, estimate_capacity, fit_concave_poly, rescale_curve
from .pvplant import PvArrayTruth, load_irradiance, pv_power, true_capacity

log = logging.getLogger(__name__)

DATA_DIR = Path(__file__).with_name("data")
UNDER = 10.0  # percent, prediction-error acceptance threshold


class ScenarioError(ValueError):
    """Invalid scenario document."""


class ScenarioAborted(RuntimeError):
    """A module error stopped the run; ``partial`` holds the log up to the failure."""

    def __init__(self, msg, partial):
        super().__init__(msg)
        self.partial = partial


@dataclass(frozen=True)
class PvSpec:
    der: int  # 1-based DER index of the GFL inverter
    site: int  # 1-based irradiance column
    truth: PvArrayTruth
    domain: tuple  # controller voltage window (v_min, v_max)


@dataclass(frozen=True)
class Scenario:
    network: str
    irradiance: str
    pv: tuple
    duration: float = 400.0
    perturbation_period: float = 4.0
    control_period: float = 1.0
    perturbation_magnitude: float = 0.2
    algorithm: str = "alg2"
    seed: int = 0
    measurement_noise: tuple = (0.0,)
    # controller
    rho: float = 0.0
    a1: float = 0.5
    a2: float = 0.4
    a3: float = 0.4
    du_bound: float = 0.1
    alpha_scale: float = 0.05
    flow_mode: str = "one_sided"
    frequency_target: float = 60.0
    voltage_targets: tuple = ((4, 1.02), (9, 1.0), (12, 1.0))
    flow_limit: float = 0.3
    # estimator
    lam: float = 0.85
    rho1: float = 1000.0
    sigma: int = 20
    pe_upper: float = 1e4
    pe_lower: float = 1e-4
    # PV learning
    degree: int = 4
    window: int = 9
    # statistics
    thresholds: tuple = (1e-3, 1e-4, 1e-3)  # frequency (Hz), voltage (pu), line flow (pu)
    error_weights: tuple = (20.0, 100.0, 20.0)  # per Hz, per pu voltage, per pu flow
    name: str = "scenario"

    def __post_init__(self):
        if self.duration <= 0:
            raise ScenarioError("duration must be positive")
        if self.control_period <= 0 or self.perturbation_period <= 0:
            raise ScenarioError("periods must be positive")
        ratio = self.perturbation_period / self.control_period
        if abs(ratio - round(ratio)) > 1e-9:
            raise ScenarioError("control period must divide the perturbation period")
        if self.algorithm not in ALGORITHMS:
            raise ScenarioError(f"algorithm must be one of {ALGORITHMS}")
        if not 0 <= self.perturbation_magnitude < 1:
            raise ScenarioError("perturbation magnitude must lie in [0, 1)")
        if any(t <= 0 for t in self.thresholds):
            raise ScenarioError("measurement thresholds must be positive")


def _resolve(path, base):
    p = Path(path)
    if p.is_absolute() and p.exists():
        return str(p)
    for root in (base, DATA_DIR):
        if root is not None and (Path(root) / p).exists():
            return str(Path(root) / p)
    raise ScenarioError(f"cannot find {path!r}")


def _section(doc, key):
    sec = doc.get(key) or {}
    if not isinstance(sec, dict):
        raise ScenarioError(f"{key!r} must be a mapping")
    return sec


def load_scenario(source):
    """Read a scenario from a YAML path or text; relative paths resolve next to the file."""
    base = None
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and source.endswith((".yaml", ".yml"))):
        base = Path(source).resolve().parent
        text = Path(source).read_text()
    else:
        text = source
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a mapping")
    try:
        ctrl = _section(doc, "controller")
        tgt = _section(doc, "targets")
        est = _section(doc, "estimator")
        fit = _section(doc, "pv_fit")
        thr = _section(doc, "thresholds")
        wts = _section(doc, "error_weights")
        pv_rows = []
        table = doc.get("pv_arrays") or {}
        cols = table.get("columns", [])
        for row in table.get("rows", []):
            r = dict(zip(cols, row))
            truth = PvArrayTruth(float(r["v_oc"]), float(r["i_sc"]), float(r["v_shape"]),
                                 float(r["p_base"]))
            pv_rows.append(PvSpec(int(r["der"]), int(r["site"]), truth,
                                  (float(r["v_min"]), float(r["v_max"]))))
        noise = doc.get("measurement_noise", 0.0)
        noise = tuple(float(x) for x in np.atleast_1d(noise))
        volts = tgt.get("voltages", {4: 1.02, 9: 1.0, 12: 1.0})
        kw = dict(
            network=_resolve(doc.get("network", "ieee14.yaml"), base),
            irradiance=_resolve(doc.get("irradiance", "irradiance_sample.csv"), base),
            pv=tuple(pv_rows),
            measurement_noise=noise,
            voltage_targets=tuple((int(b), float(v)) for b, v in volts.items()),
        )
        scalars = {
            "name": doc.get("name"), "duration": doc.get("duration_s"),
            "perturbation_period": doc.get("perturbation_period_s"),
            "control_period": doc.get("control_period_s"),
            "perturbation_magnitude": doc.get("perturbation_magnitude"),
            "algorithm": doc.get("algorithm"), "seed": doc.get("seed"),
            "rho": ctrl.get("rho"), "a1": ctrl.get("a1"), "a2": ctrl.get("a2"), "a3": ctrl.get("a3"),
            "du_bound": ctrl.get("du_bound"), "alpha_scale": ctrl.get("alpha_scale"),
            "flow_mode": ctrl.get("flow_mode"),
            "frequency_target": tgt.get("frequency_hz"), "flow_limit": tgt.get("line_flow"),
            "lam": est.get("lam"), "rho1": est.get("rho1"), "sigma": est.get("sigma"),
            "pe_upper": est.get("pe_upper"), "pe_lower": est.get("pe_lower"),
            "degree": fit.get("degree"), "window": fit.get("window"),
        }
        defaults = {f.name: f.default for f in fields(Scenario)}
        for k, v in scalars.items():
            if v is not None:
                kind = type(defaults[k])
                kw[k] = v if kind is str else kind(float(v)) if kind is int else kind(v)
        if thr:
            kw["thresholds"] = (float(thr.get("frequency_hz", 1e-3)), float(thr.get("voltage", 1e-4)),
                                float(thr.get("line_flow", 1e-3)))
        if wts:
            kw["error_weights"] = (float(wts.get("frequency_hz", 20.0)), float(wts.get("voltage", 100.0)),
                                   float(wts.get("line_flow", 20.0)))
        return Scenario(**kw)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"bad scenario: {exc}") from exc


def bundled_scenario_path():
    return DATA_DIR / "scenario_ieee14.yaml"


# ---------------------------------------------------------------------------
# Run log
# ---------------------------------------------------------------------------

@dataclass
class EventRecord:
    t: float
    kind: str  # "perturbation" or "control"
    k: int  # control counter (0 for perturbations)
    y: list
    setpoints: list
    irradiance: list
    pv_power: list
    pv_voltage: list
    load_scale: float
    du: list = None  # realized input change
    dy: list = None
    dy_pred: list = None
    errors: list = None  # prediction error, percent, per channel
    sensitivity: list = None  # S after the update, row-major
    pe_eig: list = None  # [lambda_min, lambda_max] of the input window
    pv_fit: list = None  # per PV: {"beta", "p_bar", "v_hat", "rmse", "p_max_true"}
    control: dict = None  # ControlStep fields


@dataclass
class RunLog:
    scenario: dict
    y_target: list
    d_v: int
    initial_y: list
    records: list = field(default_factory=list)

    def to_jsonl(self):
        head = {"scenario": self.scenario, "y_target": self.y_target, "d_v": self.d_v,
                "initial_y": self.initial_y}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text):
        rows = [json.loads(x) for x in text.splitlines() if x.strip()]
        if not rows:
            raise ValueError("empty run log")
        head = rows[0]
        names = {f.name for f in fields(EventRecord)}
        recs = [EventRecord(**{k: v for k, v in r.items() if k in names}) for r in rows[1:]]
        return cls(head["scenario"], head["y_target"], head["d_v"], head["initial_y"], recs)

    @property
    def controls(self):
        return [r for r in self.records if r.kind == "control"]

    @property
    def perturbations(self):
        return [r for r in self.records if r.kind == "perturbation"]


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _scenario_dict(sc):
    d = asdict(sc)
    d["pv"] = [{"der": p.der, "site": p.site, "truth": asdict(p.truth), "domain": list(p.domain)}
               for p in sc.pv]
    return _jsonable(d)


def prediction_error(dy, dy_pred, thresholds):
    """Per-channel ``|dy - dy_hat| / max(|dy|, threshold)`` in percent."""
    dy = np.asarray(dy, dtype=float)
    dy_pred = np.asarray(dy_pred, dtype=float)
    thr = np.broadcast_to(np.asarray(thresholds, dtype=float), dy.shape)
    if np.any(thr <= 0):
        raise ValueError("thresholds must be positive")
    return np.abs(dy - dy_pred) / np.maximum(np.abs(dy), thr) * 100.0


def channel_thresholds(sc, d_v, d_l):
    f, v, p = sc.thresholds
    return np.concatenate([[f], np.full(d_v, v), np.full(d_l, p)])


def channel_weights(weights, d_v, d_l):
    f, v, p = weights
    return np.concatenate([[f], np.full(d_v, v), np.full(d_l, p)])


def output_deviation(y, y_target, d_v, flow_mode="one_sided"):
    """``y - y*``; one-sided line flows count only their excess over the limit."""
    y = np.asarray(y, dtype=float)
    y_target = np.asarray(y_target, dtype=float)
    dev = y - y_target
    if flow_mode == "one_sided":
        s = 1 + d_v
        dev[s:] = np.maximum(0.0, np.abs(y[s:]) - y_target[s:])
    return dev


def weighted_error(y, y_target, d_v, weights, flow_mode="one_sided"):
    """``||diag(gamma)(y - y*)||`` with the deviation of :func:`output_deviation`."""
    dev = output_deviation(y, y_target, d_v, flow_mode)
    gamma = channel_weights(weights, d_v, dev.size - 1 - d_v)
    return float(np.linalg.norm(gamma * dev))


# ---------------------------------------------------------------------------
# Event loop
# ---------------------------------------------------------------------------

class _PvUnit:
    def __init__(self, spec, der_pos, degree, window):
        self.spec = spec
        self.pos = der_pos
        self.degree = degree
        self.samples = deque(maxlen=window + 1)
        self.curve = None
        self.v_star = float(spec.domain[1])

    def commission(self, irradiance):
        """Voltage sweep across the controller window that seeds the fit."""
        for v in np.linspace(self.spec.domain[0], self.spec.domain[1], self.samples.maxlen):
            self.samples.append((float(v), pv_power(self.spec.truth, v, irradiance)))
        self.refit()

    def refit(self):
        try:
            self.curve = fit_concave_poly(list(self.samples), self.degree, self.spec.domain)
        except FitError:
            if self.curve is None:
                raise
            self.curve = rescale_curve(self.curve, list(self.samples))
            log.debug("PV %d: degenerate window, rescaled previous curve", self.spec.der)
        return self.curve

    def power(self, irradiance):
        return pv_power(self.spec.truth, self.v_star, irradiance)


def event_calendar(duration, perturbation_period, control_period):
    """``[(t, kind), ...]`` for the run; perturbations at multiples of their period."""
    n = int(math.floor(duration / control_period + 1e-9))
    ratio = int(round(perturbation_period / control_period))
    return [(i * control_period, "perturbation" if i % ratio == 0 else "control") for i in range(n)]


def _irr(trace, t, site):
    return trace.site(t, site)


def run_scenario(scenario, out_dir=None):
    """Execute ``scenario``; persist the log under ``out_dir`` when given."""
    sc = scenario
    try:
        model = load_network(sc.network)
        trace = load_irradiance(Path(sc.irradiance))
    except (OSError, ValueError) as exc:
        raise ScenarioError(f"cannot load scenario inputs: {exc}") from exc
    d_v, d_l = model.d_v, len(model.critical_lines)
    y_target = np.concatenate([[sc.frequency_target],
                               [dict(sc.voltage_targets)[b] for b in model.critical_buses],
                               np.full(d_l, sc.flow_limit)])
    m = model.m
    n = 2 * m
    pv_units = []
    for spec in sc.pv:
        pos = spec.der - 1
        if pos not in model.gfl:
            raise ScenarioError(f"PV array on DER {spec.der}, which is not grid-following")
        if spec.site > trace.n_sites:
            raise ScenarioError(f"irradiance trace has no site {spec.site}")
        pv_units.append(_PvUnit(spec, pos, sc.degree, sc.window))
    pv_inputs = [u.pos for u in pv_units]

    ss_plant, ss_ctrl = np.random.SeedSequence(sc.seed).spawn(2)
    plant_rng = np.random.default_rng(ss_plant)
    ctrl_rng = np.random.default_rng(ss_ctrl)

    cfg = ControllerConfig(y_target=y_target, d_v=d_v, rho=sc.rho, a1=sc.a1, a2=sc.a2, a3=sc.a3,
                           du_lower=-sc.du_bound, du_upper=sc.du_bound, alpha_scale=sc.alpha_scale,
                           flow_mode=sc.flow_mode, seed=sc.seed)
    est = init_sensitivity(model, lam=sc.lam, rho1=sc.rho1)
    state = ControllerState(cfg, est, pv_inputs, [u.spec.domain for u in pv_units],
                            sigma=sc.sigma, pe_upper=sc.pe_upper, pe_lower=sc.pe_lower)
    thresholds = channel_thresholds(sc, d_v, d_l)
    noise = np.broadcast_to(np.asarray(sc.measurement_noise, dtype=float), (model.d_y,))
    track = sc.algorithm == "alg2"

    nominal_loads = model.nominal_loads()
    loads = nominal_loads.copy()
    u = model.nominal_setpoints().copy()
    u_min, u_max = model.setpoint_limits()

    def plant_available(t):
        """Available PV power per DER (inf for non-PV) and, for tracking, fix the injection."""
        avail = np.full(m, np.inf)
        for unit in pv_units:
            g = _irr(trace, t, unit.spec.site)
            if track:
                p = unit.power(g)
                u[unit.pos] = p
                avail[unit.pos] = p
            else:
                avail[unit.pos] = true_capacity(unit.spec.truth, g)[1]
                u[unit.pos] = max(0.0, u[unit.pos])
        return avail

    def measure(point):
        if np.any(noise > 0):
            return measure_output(point, model, noise, plant_rng).as_vector()
        return measure_output(point, model).as_vector()

    if track:
        for unit in pv_units:
            unit.commission(_irr(trace, 0.0, unit.spec.site))
            unit.v_star = command_voltage(unit.curve, u[unit.pos])
    point = solve_steady_state(model, u, loads, plant_available(0.0))
    y = measure(point)
    runlog = RunLog(_scenario_dict(sc), _jsonable(y_target), d_v, _jsonable(y))

    def pv_state(t):
        irr = [_irr(trace, t, unit.spec.site) for unit in pv_units]
        p = [float(point.p_der[unit.pos]) for unit in pv_units]
        v = [unit.v_star if track else float("nan") for unit in pv_units]
        return irr, p, v

    load_scale = 1.0
    try:
        for t, kind in event_calendar(sc.duration, sc.perturbation_period, sc.control_period):
            if kind == "perturbation":
                loads = perturb_loads(nominal_loads, sc.perturbation_magnitude, plant_rng)
                load_scale = float(loads[:, 0].sum() / nominal_loads[:, 0].sum())
                point = solve_steady_state(model, u, loads, plant_available(t), seed=point)
                y = measure(point)
                irr, p, v = pv_state(t)
                runlog.records.append(EventRecord(
                    t=float(t), kind=kind, k=0, y=_jsonable(y), setpoints=_jsonable(u),
                    irradiance=irr, pv_power=p, pv_voltage=v, load_scale=load_scale))
                log.debug("t=%g perturbation, load scale %.4f", t, load_scale)
                continue

            y_prev = y
            u_prev = u.copy()
            p_prev = np.array([point.p_der[unit.pos] for unit in pv_units])
            curves = []
            fit_info = []
            if track:
                for unit in pv_units:
                    curves.append(unit.refit())
            u_base = u_prev.copy()
            u_base[pv_inputs] = p_prev
            lo = np.minimum(0.0, np.maximum(-sc.du_bound, u_min - u_base))
            hi = np.maximum(0.0, np.minimum(sc.du_bound, u_max - u_base))
            step = run_step(state, sc.algorithm, y_prev, ctrl_rng, curves, p_prev, (lo, hi))
            u = u_prev + step.du
            for j, unit in enumerate(pv_units):
                if track:
                    unit.v_star = float(step.v_star[j])
                else:
                    u[unit.pos] = max(0.0, p_prev[j] + step.du[unit.pos])
            point = solve_steady_state(model, u, loads, plant_available(t), seed=point)
            y = measure(point)
            u_eff = u.copy()
            for j, unit in enumerate(pv_units):
                u_eff[unit.pos] = point.p_der[unit.pos]
            u_eff_prev = u_prev.copy()
            u_eff_prev[pv_inputs] = p_prev
            du = u_eff - u_eff_prev
            dy = y - y_prev
            dy_pred = state.estimate.S @ du
            errors = prediction_error(dy, dy_pred, thresholds)
            state.estimate = rls_update(state.estimate, du, dy)
            irr, p, v = pv_state(t)
            if track:
                for j, unit in enumerate(pv_units):
                    unit.samples.append((unit.v_star, float(point.p_der[unit.pos])))
                    v_hat, p_bar = estimate_capacity(curves[j])
                    fit_info.append({"beta": _jsonable(curves[j].beta), "p_bar": p_bar, "v_hat": v_hat,
                                     "rmse": curves[j].rmse,
                                     "p_max_true": true_capacity(unit.spec.truth, irr[j])[1]})
            lo_eig, hi_eig = state.inputs_monitor.eig_range()
            runlog.records.append(EventRecord(
                t=float(t), kind=kind, k=step.k, y=_jsonable(y), setpoints=_jsonable(u),
                irradiance=irr, pv_power=p, pv_voltage=v, load_scale=load_scale,
                du=_jsonable(du), dy=_jsonable(dy), dy_pred=_jsonable(dy_pred),
                errors=_jsonable(errors), sensitivity=_jsonable(state.estimate.S.ravel()),
                pe_eig=[lo_eig, hi_eig], pv_fit=fit_info or None,
                control=_jsonable(asdict(step))))
            log.debug("t=%g control k=%d f=%.5f err_f=%.2f%%", t, step.k, y[0], errors[0])
    except Exception as exc:
        log.error("run aborted at t=%s: %s", runlog.records[-1].t if runlog.records else 0.0, exc)
        if out_dir is not None:
            write_outputs(runlog, out_dir)
        raise ScenarioAborted(str(exc), runlog) from exc

    if out_dir is not None:
        write_outputs(runlog, out_dir)
    return runlog


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------

def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def figure_tables(runlog):
    """Plot-ready CSV text keyed by file name."""
    d_v = runlog.d_v
    recs = runlog.records
    n_out = len(runlog.y_target)
    out = {}
    out["frequency.csv"] = _csv(["t", "kind", "f_hz"], [(r.t, r.kind, r.y[0]) for r in recs])
    out["voltages.csv"] = _csv(["t", "kind"] + [f"v{i + 1}" for i in range(d_v)],
                               [[r.t, r.kind] + r.y[1:1 + d_v] for r in recs])
    out["line_flow.csv"] = _csv(["t", "kind"] + [f"p{i + 1}" for i in range(n_out - 1 - d_v)],
                                [[r.t, r.kind] + r.y[1 + d_v:] for r in recs])
    ctl = runlog.controls
    if ctl:
        n_in = len(ctl[0].du)
        out["sensitivity.csv"] = _csv(["t", "k"] + [f"s_f_{j + 1}" for j in range(n_in)],
                                      [[r.t, r.k] + r.sensitivity[:n_in] for r in ctl])
        out["prediction.csv"] = _csv(
            ["t", "k"] + [f"dy{i}" for i in range(n_out)] + [f"dy_hat{i}" for i in range(n_out)]
            + [f"e{i}" for i in range(n_out)],
            [[r.t, r.k] + r.dy + r.dy_pred + r.errors for r in ctl])
        out["excitation.csv"] = _csv(["t", "k", "lambda_min", "lambda_max", "alpha", "pe_inputs"],
                                     [[r.t, r.k, r.pe_eig[0], r.pe_eig[1], r.control["alpha"],
                                       int(r.control["pe_inputs"])] for r in ctl])
        fits = [r for r in ctl if r.pv_fit]
        if fits:
            deg = len(fits[0].pv_fit[0]["beta"])
            rows = []
            for r in fits:
                for j, f in enumerate(r.pv_fit):
                    rows.append([r.t, r.k, j + 1] + f["beta"] + [f["p_bar"], f["v_hat"], f["rmse"],
                                                                 f["p_max_true"]])
            out["pv_fit.csv"] = _csv(["t", "k", "pv"] + [f"beta{i}" for i in range(deg)]
                                     + ["p_bar", "v_hat", "rmse", "p_max_true"], rows)
    return out


def write_outputs(runlog, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "runlog.jsonl").write_text(runlog.to_jsonl())
    for name, text in figure_tables(runlog).items():
        (out / name).write_text(text)
    if runlog.records:
        rep = summarize(runlog)
        (out / "summary.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
        (out / "summary.txt").write_text(format_report(rep))


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

def cycle_reductions(runlog, weights=None, flow_mode=None):
    """Per perturbation cycle: ``(error after perturbation, error after its last control)``."""
    sc = runlog.scenario
    weights = tuple(sc.get("error_weights", (20.0, 100.0, 20.0))) if weights is None else weights
    flow_mode = sc.get("flow_mode", "one_sided") if flow_mode is None else flow_mode
    out = []
    start = None
    last = None
    for r in runlog.records + [None]:
        if r is None or r.kind == "perturbation":
            if start is not None and last is not None:
                out.append((weighted_error(start.y, runlog.y_target, runlog.d_v, weights, flow_mode),
                            weighted_error(last.y, runlog.y_target, runlog.d_v, weights, flow_mode)))
            start, last = r, None
        else:
            last = r
    return out


def summarize(runlog, sigma=None):
    """Aggregate statistics of a run (JSON-ready dict)."""
    if not runlog.records:
        raise ValueError("empty run log")
    sigma = int(runlog.scenario.get("sigma", 20)) if sigma is None else sigma
    d_v = runlog.d_v
    ctl = runlog.controls
    n_out = len(runlog.y_target)
    names = ["frequency"] + [f"voltage_{i + 1}" for i in range(d_v)] + \
        [f"line_flow_{i + 1}" for i in range(n_out - 1 - d_v)]
    rep = {"n_events": len(runlog.records), "n_controls": len(ctl),
           "n_perturbations": len(runlog.perturbations)}
    if ctl:
        err = np.array([r.errors for r in ctl])
        rep["under_10pct"] = {nm: float(np.mean(err[:, i] < UNDER)) for i, nm in enumerate(names)}
        eig = np.array([r.pe_eig for r in ctl if r.k > sigma])
        if eig.size:
            rep["pe_lambda_min_mean"] = float(np.mean(eig[:, 0]))
            rep["pe_lambda_max_mean"] = float(np.mean(eig[:, 1]))
            rep["pe_lambda_min_min"] = float(np.min(eig[:, 0]))
        mode = runlog.scenario.get("flow_mode", "one_sided")
        dev = lambda y: output_deviation(y, runlog.y_target, d_v, mode)  # noqa: E731
        before, after = [], []
        prev = runlog.initial_y
        for r in runlog.records:
            if r.kind == "control":
                before.append(dev(prev))
                after.append(dev(r.y))
            prev = r.y
        rep["rms_deviation_before_control"] = dict(zip(names, np.sqrt(np.mean(np.square(before), 0)).tolist()))
        rep["rms_deviation_after_control"] = dict(zip(names, np.sqrt(np.mean(np.square(after), 0)).tolist()))
    cyc = cycle_reductions(runlog)
    if cyc:
        rep["cycles"] = len(cyc)
        rep["cycle_error_reduced"] = float(np.mean([b < a for a, b in cyc]))
        ends = []
        start = 1 + d_v
        recs = runlog.records
        for i, r in enumerate(recs):
            nxt = recs[i + 1] if i + 1 < len(recs) else None
            if r.kind == "control" and (nxt is None or nxt.kind == "perturbation"):
                ends.append(max(abs(x) for x in r.y[start:]) if n_out > start else 0.0)
        if ends:
            rep["max_cycle_end_flow"] = float(max(ends))
    return rep


def format_report(rep):
    lines = [f"events {rep['n_events']}  controls {rep['n_controls']}  perturbations {rep['n_perturbations']}"]
    if "under_10pct" in rep:
        lines.append("prediction error < 10%:")
        for k, v in rep["under_10pct"].items():
            lines.append(f"  {k:<14} {100 * v:6.1f} %")
    if "pe_lambda_min_mean" in rep:
        lines.append(f"input window eigenvalues: mean min {rep['pe_lambda_min_mean']:.3g}, "
                     f"mean max {rep['pe_lambda_max_mean']:.3g}, worst min {rep['pe_lambda_min_min']:.3g}")
    if "rms_deviation_after_control" in rep:
        lines.append("rms deviation from target (before -> after control):")
        for k in rep["rms_deviation_after_control"]:
            lines.append(f"  {k:<14} {rep['rms_deviation_before_control'][k]:.4g} -> "
                         f"{rep['rms_deviation_after_control'][k]:.4g}")
    if "cycles" in rep:
        lines.append(f"cycles with reduced weighted error: {100 * rep['cycle_error_reduced']:.1f} % "
                     f"of {rep['cycles']}")
    if "max_cycle_end_flow" in rep:
        lines.append(f"max line flow at cycle end: {rep['max_cycle_end_flow']:.4f} pu")
    return "\n".join(lines) + "\n"


def merge_summaries(reports):
    """Average the numeric fields of several summaries (nested one level)."""
    out = {"runs": len(reports)}
    keys = reports[0].keys()
    for k in keys:
        vals = [r[k] for r in reports if k in r]
        if isinstance(vals[0], dict):
            out[k] = {kk: float(np.mean([v[kk] for v in vals])) for kk in vals[0]}
        elif k == "pe_lambda_min_min":
            out[k] = float(min(vals))
        elif k == "max_cycle_end_flow":
            out[k] = float(max(vals))
        else:
            out[k] = float(np.mean(vals))
    return out


def _run_seed(args):
    scenario, seed, out_dir = args
    sc = replace(scenario, seed=seed)
    target = None if out_dir is None else Path(out_dir) / f"seed_{seed}"
    return summarize(run_scenario(sc, target))


def run_sweep(scenario, count, out_dir=None, workers=None):
    """Run seeds ``seed .. seed + count - 1`` in independent processes; returns (per-seed, merged)."""
    from concurrent.futures import ProcessPoolExecutor

    jobs = [(scenario, scenario.seed + i, out_dir) for i in range(count)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        reports = list(pool.map(_run_seed, jobs))
    return reports, merge_summaries(reports)
