"""Quasi-static simulator of a droop-controlled inverter network.

The simulator jumps between solved steady states.  Each solve is a Newton
iteration on the AC power balance augmented with the grid-forming (GFM)
inverter steady-state relations::

    E_j   = E*_j / sqrt(2) * (1 + sqrt(1 - K_j (Q_j - Q^r_j)))^0.5
    omega = omega* - R^f_j (E*_j / E_j)^2 (P_j - P^r_j)

with the common frequency ``omega`` as an extra unknown (distributed slack).
``K_j = 8 R^v_j / E*_j`` makes the voltage relation linearize to the droop
``E_j = E*_j - R^v_j (Q_j - Q^r_j)``.

Frequencies are rad/s internally and Hz in case files and measurements.
"""

from dataclasses import dataclass, field
from pathlib import Path
import math

import numpy as np
import yaml

TWO_PI = 2.0 * math.pi
MISMATCH_TOL = 1e-8
MAX_NEWTON = 50

BUS_TYPES = ("gfm", "gfl", "load")


class CaseError(ValueError):
    """Malformed or inconsistent case description."""


class PowerFlowError(RuntimeError):
    """Steady-state solve failed to converge (infeasible operating point)."""


class CapabilityError(PowerFlowError):
    """Reactive droop capability exceeded: negative square-root argument."""


@dataclass(frozen=True)
class Bus:
    index: int
    kind: str
    pd: float = 0.0
    qd: float = 0.0
    gs: float = 0.0
    bs: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    ratio: float = 1.0
    rate: float = math.inf

    @property
    def series_admittance(self):
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class Der:
    """One inverter-interfaced resource; ``index`` is its 1-based DER number."""

    index: int
    bus: int
    kind: str  # "gfm" or "gfl"
    p_set: float = 0.0
    q_set: float = 0.0
    e_nom: float = 1.0
    droop_f: float = 0.0  # rad/s per pu-P
    droop_v: float = 0.0  # pu-V per pu-Q
    capability: float = 0.0  # K_j in the voltage relation
    pv_site: int = 0  # irradiance column for GFL PV arrays (1-based)
    rating: float = math.inf  # pu; bounds the setpoints P^r in [0, rating], Q^r in [-rating, rating]


@dataclass(frozen=True)
class NetworkModel:
    name: str
    buses: tuple
    branches: tuple
    ders: tuple
    critical_buses: tuple
    critical_lines: tuple
    omega_nom: float = TWO_PI * 60.0
    base_mva: float = 100.0
    ybus: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        _validate(self)
        if self.ybus is None:
            object.__setattr__(self, "ybus", _build_ybus(self))

    # ----- index helpers -------------------------------------------------
    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def m(self):
        return len(self.ders)

    @property
    def bus_labels(self):
        return [b.index for b in self.buses]

    def bus_pos(self, label):
        return self._label_map()[label]

    def _label_map(self):
        return {b.index: i for i, b in enumerate(self.buses)}

    @property
    def gfm(self):
        """Zero-based DER positions of grid-forming inverters."""
        return [i for i, d in enumerate(self.ders) if d.kind == "gfm"]

    @property
    def gfl(self):
        return [i for i, d in enumerate(self.ders) if d.kind == "gfl"]

    @property
    def d_v(self):
        return len(self.critical_buses)

    @property
    def d_l(self):
        return len(self.critical_lines)

    @property
    def d_y(self):
        return 1 + self.d_v + self.d_l

    def nominal_loads(self):
        return np.array([[b.pd, b.qd] for b in self.buses], dtype=float)

    def nominal_setpoints(self):
        return np.array([d.p_set for d in self.ders] + [d.q_set for d in self.ders], dtype=float)

    def setpoint_limits(self):
        """``(u_min, u_max)``: P^r within [0, rating] and Q^r within [-rating, rating]."""
        r = np.array([d.rating for d in self.ders], dtype=float)
        return np.concatenate([np.zeros(self.m), -r]), np.concatenate([r, r])

    def line_limits(self):
        out = []
        for f, t in self.critical_lines:
            k, _ = self._find_branch(f, t)
            out.append(self.branches[k].rate)
        return np.array(out)

    def _find_branch(self, f, t):
        for k, br in enumerate(self.branches):
            if (br.from_bus, br.to_bus) == (f, t):
                return k, True
            if (br.from_bus, br.to_bus) == (t, f):
                return k, False
        raise CaseError(f"critical line ({f}, {t}) is not a branch")

    def composite_droops(self):
        """Parallel-combined (R^f_eq in rad/s per pu, R^v_eq) over the GFMs."""
        rf = [self.ders[j].droop_f for j in self.gfm]
        rv = [self.ders[j].droop_v for j in self.gfm]
        return 1.0 / sum(1.0 / r for r in rf), 1.0 / sum(1.0 / r for r in rv)


def _validate(model):
    labels = [b.index for b in model.buses]
    if len(set(labels)) != len(labels):
        raise CaseError("duplicate bus index")
    known = set(labels)
    for b in model.buses:
        if b.kind not in BUS_TYPES:
            raise CaseError(f"bus {b.index}: unknown type {b.kind!r}")
    for br in model.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                raise CaseError(f"branch ({br.from_bus}, {br.to_bus}) references missing bus {end}")
        if br.r == 0.0 and br.x == 0.0:
            raise CaseError(f"branch ({br.from_bus}, {br.to_bus}) has zero impedance")
        if br.ratio <= 0:
            raise CaseError(f"branch ({br.from_bus}, {br.to_bus}) has nonpositive tap ratio")
    used = set()
    kinds = {b.index: b.kind for b in model.buses}
    for d in model.ders:
        if d.bus not in known:
            raise CaseError(f"DER {d.index} sits on missing bus {d.bus}")
        if d.bus in used:
            raise CaseError(f"bus {d.bus} hosts more than one DER")
        used.add(d.bus)
        if d.kind not in ("gfm", "gfl"):
            raise CaseError(f"DER {d.index}: unknown kind {d.kind!r}")
        if kinds[d.bus] != d.kind:
            raise CaseError(f"DER {d.index} is {d.kind} but bus {d.bus} is {kinds[d.bus]}")
        if not d.rating > 0:
            raise CaseError(f"DER {d.index}: rating must be positive")
        if d.kind == "gfm":
            if d.droop_f <= 0 or d.droop_v <= 0:
                raise CaseError(f"DER {d.index}: droops must be positive")
            if d.e_nom <= 0 or d.capability <= 0:
                raise CaseError(f"DER {d.index}: nominal voltage and capability must be positive")
    for b in model.buses:
        if b.kind in ("gfm", "gfl") and b.index not in used:
            raise CaseError(f"bus {b.index} is {b.kind} but hosts no DER")
    if [d.index for d in model.ders] != list(range(1, len(model.ders) + 1)):
        raise CaseError("DER indices must be 1..m in order")
    for c in model.critical_buses:
        if c not in known:
            raise CaseError(f"critical bus {c} does not exist")
    for f, t in model.critical_lines:
        model._find_branch(f, t)


def _build_ybus(model):
    n = model.n_bus
    pos = model._label_map()
    Y = np.zeros((n, n), dtype=complex)
    for br in model.branches:
        f, t = pos[br.from_bus], pos[br.to_bus]
        ys = br.series_admittance
        half = 0.5j * br.b
        tap = br.ratio
        Y[f, f] += (ys + half) / tap**2
        Y[t, t] += ys + half
        Y[f, t] -= ys / tap
        Y[t, f] -= ys / tap
    for i, b in enumerate(model.buses):
        Y[i, i] += complex(b.gs, b.bs)
    return Y


def _branch_terms(model, k):
    br = model.branches[k]
    ys = br.series_admittance
    half = 0.5j * br.b
    tap = br.ratio
    return (ys + half) / tap**2, -ys / tap, -ys / tap, ys + half


# ---------------------------------------------------------------------------
# Case files
# ---------------------------------------------------------------------------

def _table(doc, key, required=True):
    tab = doc.get(key)
    if tab is None:
        if required:
            raise CaseError(f"missing table {key!r}")
        return []
    try:
        cols = list(tab["columns"])
        rows = tab["rows"]
    except (TypeError, KeyError) as exc:
        raise CaseError(f"table {key!r} needs 'columns' and 'rows'") from exc
    out = []
    for row in rows or []:
        if len(row) != len(cols):
            raise CaseError(f"table {key!r}: row {row!r} has {len(row)} fields, expected {len(cols)}")
        out.append(dict(zip(cols, row)))
    return out


def load_network(source):
    """Parse a case document (YAML text, mapping, or path) into a :class:`NetworkModel`.

    Powers are per-unit on ``base_mva``; frequency droops are given in Hz per
    pu and stored in rad/s per pu.
    """
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and source.endswith((".yaml", ".yml"))):
        source = Path(source).read_text()
    if isinstance(source, str):
        try:
            doc = yaml.safe_load(source)
        except yaml.YAMLError as exc:
            raise CaseError(f"case does not parse: {exc}") from exc
    else:
        doc = source
    if not isinstance(doc, dict):
        raise CaseError("case document must be a mapping")

    f_nom = float(doc.get("frequency_hz", 60.0))
    try:
        buses = tuple(
            Bus(int(r["index"]), str(r["type"]).lower(), float(r.get("pd", 0.0)), float(r.get("qd", 0.0)),
                float(r.get("gs", 0.0)), float(r.get("bs", 0.0)))
            for r in _table(doc, "buses")
        )
        branches = tuple(
            Branch(int(r["from"]), int(r["to"]), float(r["r"]), float(r["x"]), float(r.get("b", 0.0)),
                   float(r.get("ratio", 1.0) or 1.0), float(r.get("rate", math.inf) or math.inf))
            for r in _table(doc, "branches")
        )
        ders = []
        for r in _table(doc, "ders"):
            kind = str(r["kind"]).lower()
            e_nom = float(r.get("e_nom", 1.0))
            droop_v = float(r.get("droop_v", 0.0))
            cap = r.get("capability")
            cap = float(cap) if cap is not None else 8.0 * droop_v / e_nom
            ders.append(Der(
                index=int(r["der"]), bus=int(r["bus"]), kind=kind,
                p_set=float(r.get("p_set", 0.0)), q_set=float(r.get("q_set", 0.0)),
                e_nom=e_nom, droop_f=TWO_PI * float(r.get("droop_f", 0.0)), droop_v=droop_v,
                capability=cap, pv_site=int(r.get("pv_site", 0) or 0),
                rating=float(r.get("rating", math.inf) or math.inf),
            ))
        crit_b = tuple(int(c) for c in doc.get("critical_buses", []))
        crit_l = tuple((int(a), int(b)) for a, b in doc.get("critical_lines", []))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CaseError):
            raise
        raise CaseError(f"bad field in case: {exc}") from exc
    return NetworkModel(
        name=str(doc.get("name", "case")),
        buses=buses,
        branches=branches,
        ders=tuple(ders),
        critical_buses=crit_b,
        critical_lines=crit_l,
        omega_nom=TWO_PI * f_nom,
        base_mva=float(doc.get("base_mva", 100.0)),
    )


def bundled_case_path(name="ieee14"):
    return Path(__file__).with_name("data") / f"{name}.yaml"


def load_bundled(name="ieee14"):
    return load_network(bundled_case_path(name))


# ---------------------------------------------------------------------------
# Steady-state solve
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OperatingPoint:
    vm: np.ndarray
    va: np.ndarray
    omega: float  # rad/s
    p_der: np.ndarray
    q_der: np.ndarray
    loads: np.ndarray
    setpoints: np.ndarray
    pv_available: np.ndarray
    iterations: int = 0
    mismatch: float = 0.0

    @property
    def voltage(self):
        return self.vm * np.exp(1j * self.va)


def _gfl_injection(model, setpoints, pv_available):
    m = model.m
    p = np.zeros(m)
    q = np.zeros(m)
    avail = np.full(m, np.inf)
    if pv_available is not None:
        avail[:] = np.asarray(pv_available, dtype=float)
    for j in model.gfl:
        p[j] = max(0.0, min(setpoints[j], avail[j]))
        q[j] = setpoints[m + j]
    return p, q


def _expand_pv_available(model, pv_available):
    """Accept per-GFL values (ordered like ``model.gfl``) or a full length-m vector."""
    if pv_available is None:
        return None
    pv = np.asarray(pv_available, dtype=float).reshape(-1)
    if pv.size == model.m:
        return pv
    if pv.size != len(model.gfl):
        raise ValueError(f"pv_available has {pv.size} entries; expected {len(model.gfl)} or {model.m}")
    full = np.full(model.m, np.inf)
    full[model.gfl] = pv
    return full


class _Layout:
    """Unknown/residual bookkeeping for the augmented Newton system."""

    def __init__(self, model):
        self.n = model.n_bus
        pos = model._label_map()
        self.gfm_bus = {pos[model.ders[j].bus]: j for j in model.gfm}
        self.der_bus = {pos[d.bus]: j for j, d in enumerate(model.ders)}
        if not self.gfm_bus:
            raise PowerFlowError("network has no grid-forming inverter to set frequency")
        self.ref = min(self.gfm_bus)
        self.ang = [i for i in range(self.n) if i != self.ref]
        # x = [theta (non-ref), vm (all), omega]
        self.nx = len(self.ang) + self.n + 1

    def unpack(self, x, va_ref=0.0):
        va = np.full(self.n, va_ref)
        va[self.ang] = x[: len(self.ang)]
        vm = x[len(self.ang): len(self.ang) + self.n]
        return va, vm, x[-1]

    def pack(self, va, vm, omega):
        return np.concatenate([va[self.ang], vm, [omega]])


def _residual(model, lay, x, u, loads, p_gfl, q_gfl, want_jac):
    m = model.m
    va, vm, omega = lay.unpack(x)
    V = vm * np.exp(1j * va)
    Y = model.ybus
    I = Y @ V
    S = V * np.conj(I)
    P, Q = S.real, S.imag
    n = lay.n
    F = np.empty(2 * n)
    capability_bad = False

    if want_jac:
        dV = np.diag(V)
        dI = np.diag(I)
        Vn = V / vm
        dS_dva = 1j * dV @ np.conj(dI - Y @ dV)
        dS_dvm = dV @ np.conj(Y @ np.diag(Vn)) + np.conj(dI) @ np.diag(Vn)
        # columns in x order
        dS = np.hstack([dS_dva[:, lay.ang], dS_dvm, np.zeros((n, 1))])
        J = np.zeros((2 * n, lay.nx))

    for i in range(n):
        pd, qd = loads[i]
        if i in lay.gfm_bus:
            j = lay.gfm_bus[i]
            der = model.ders[j]
            pj = P[i] + pd
            qj = Q[i] + qd
            ratio = (der.e_nom / vm[i]) ** 2
            F[2 * i] = (omega - model.omega_nom) / der.droop_f + ratio * (pj - u[j])
            arg = 1.0 - der.capability * (qj - u[m + j])
            if arg <= 0.0:
                capability_bad = True
                arg_s = 1e-12
            else:
                arg_s = arg
            s = math.sqrt(arg_s)
            e_target = der.e_nom / math.sqrt(2.0) * math.sqrt(1.0 + s)
            F[2 * i + 1] = vm[i] - e_target
            if want_jac:
                J[2 * i] = ratio * dS[i].real
                J[2 * i, -1] += 1.0 / der.droop_f
                J[2 * i, len(lay.ang) + i] += -2.0 * der.e_nom**2 / vm[i] ** 3 * (pj - u[j])
                de_dq = der.e_nom / math.sqrt(2.0) * 0.5 / math.sqrt(1.0 + s) * (-der.capability / (2.0 * s))
                J[2 * i + 1] = -de_dq * dS[i].imag
                J[2 * i + 1, len(lay.ang) + i] += 1.0
        else:
            j = lay.der_bus.get(i)
            pg = p_gfl[j] if j is not None else 0.0
            qg = q_gfl[j] if j is not None else 0.0
            F[2 * i] = P[i] - (pg - pd)
            F[2 * i + 1] = Q[i] - (qg - qd)
            if want_jac:
                J[2 * i] = dS[i].real
                J[2 * i + 1] = dS[i].imag
    if want_jac:
        return F, J, capability_bad, (P, Q, V)
    return F, None, capability_bad, (P, Q, V)


def solve_steady_state(model, setpoints=None, loads=None, pv_available=None, seed=None,
                       tol=MISMATCH_TOL, max_iter=MAX_NEWTON):
    """Solve the droop-governed AC steady state.

    ``setpoints`` is the control vector ``u = [P^r; Q^r]`` (length 2m);
    ``loads`` an ``(n_bus, 2)`` array of P/Q demand; ``pv_available`` the
    available power of each GFL resource (per GFL or length m).  ``seed`` is a
    previous :class:`OperatingPoint` used as warm start; a flat start is
    tried if the warm start fails.
    """
    u = model.nominal_setpoints() if setpoints is None else np.asarray(setpoints, dtype=float)
    if u.shape != (2 * model.m,):
        raise ValueError(f"setpoints must have length {2 * model.m}")
    loads = model.nominal_loads() if loads is None else np.asarray(loads, dtype=float)
    pv_full = _expand_pv_available(model, pv_available)
    p_gfl, q_gfl = _gfl_injection(model, u, pv_full)
    lay = _Layout(model)

    starts = []
    if seed is not None:
        starts.append(lay.pack(seed.va - seed.va[lay.ref], seed.vm, seed.omega))
    vm0 = np.ones(lay.n)
    for i, j in lay.gfm_bus.items():
        vm0[i] = model.ders[j].e_nom
    starts.append(lay.pack(np.zeros(lay.n), vm0, model.omega_nom))

    last_err = None
    for x0 in starts:
        try:
            x, it, mis = _newton(model, lay, x0, u, loads, p_gfl, q_gfl, tol, max_iter)
        except PowerFlowError as exc:
            last_err = exc
            continue
        va, vm, omega = lay.unpack(x)
        _, _, _, (P, Q, _) = _residual(model, lay, x, u, loads, p_gfl, q_gfl, False)
        p_der = p_gfl.copy()
        q_der = q_gfl.copy()
        for i, j in lay.gfm_bus.items():
            p_der[j] = P[i] + loads[i, 0]
            q_der[j] = Q[i] + loads[i, 1]
        return OperatingPoint(vm=vm.copy(), va=va, omega=float(omega), p_der=p_der, q_der=q_der,
                              loads=loads.copy(), setpoints=u.copy(),
                              pv_available=np.full(model.m, np.inf) if pv_full is None else pv_full.copy(),
                              iterations=it, mismatch=mis)
    raise last_err


def _newton(model, lay, x, u, loads, p_gfl, q_gfl, tol, max_iter):
    F, J, bad, _ = _residual(model, lay, x, u, loads, p_gfl, q_gfl, True)
    norm = float(np.max(np.abs(F)))
    for it in range(max_iter + 1):
        if norm <= tol and not bad:
            # one extra full step: quadratic convergence takes the mismatch to
            # rounding level, so the complex per-bus residual also meets tol
            try:
                xn = x + np.linalg.solve(J, -F)
                Fn, _, badn, _ = _residual(model, lay, xn, u, loads, p_gfl, q_gfl, False)
                nn = float(np.max(np.abs(Fn)))
                if not badn and nn < norm:
                    return xn, it + 1, nn
            except np.linalg.LinAlgError:
                pass
            return x, it, norm
        if it == max_iter:
            break
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError("singular Jacobian") from exc
        step = 1.0
        for _ in range(30):
            xn = x + step * dx
            Fn, Jn, badn, _ = _residual(model, lay, xn, u, loads, p_gfl, q_gfl, True)
            nn = float(np.max(np.abs(Fn)))
            if not badn and nn < norm * (1.0 - 1e-4 * step) or (not badn and nn <= tol):
                break
            step *= 0.5
        else:
            if badn:
                raise CapabilityError("reactive droop capability exceeded (negative square-root argument)")
            raise PowerFlowError(f"line search failed at mismatch {norm:.3e}")
        x, F, J, bad, norm = xn, Fn, Jn, badn, nn
    if bad:
        raise CapabilityError("reactive droop capability exceeded (negative square-root argument)")
    raise PowerFlowError(f"no convergence after {max_iter} iterations (mismatch {norm:.3e})")


def steady_state_residuals(model, point):
    """Per-bus complex power mismatch and GFM relation residuals at ``point``.

    Returns ``(power_mismatch, freq_residual_rad_s, voltage_residual)`` computed
    directly from the physical relations (independent of the solver's scaling).
    """
    m = model.m
    V = point.voltage
    S = V * np.conj(model.ybus @ V)
    pos = model._label_map()
    inj = -(point.loads[:, 0] + 1j * point.loads[:, 1])
    for j, d in enumerate(model.ders):
        inj[pos[d.bus]] += point.p_der[j] + 1j * point.q_der[j]
    mismatch = np.abs(S - inj)
    fr, vr = [], []
    for j in model.gfm:
        d = model.ders[j]
        E = point.vm[pos[d.bus]]
        fr.append(point.omega - (model.omega_nom - d.droop_f * (d.e_nom / E) ** 2 * (point.p_der[j] - point.setpoints[j])))
        arg = 1.0 - d.capability * (point.q_der[j] - point.setpoints[m + j])
        vr.append(E - d.e_nom / math.sqrt(2.0) * math.sqrt(1.0 + math.sqrt(arg)))
    return mismatch, np.array(fr), np.array(vr)


# ---------------------------------------------------------------------------
# Measurements and disturbances
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SystemOutput:
    omega_hz: float
    v: np.ndarray
    p: np.ndarray
    k: int = 0

    def as_vector(self):
        return np.concatenate([[self.omega_hz], self.v, self.p])


def line_flow(model, point, line):
    """Active power (pu) from ``line[0]`` towards ``line[1]`` at the sending end."""
    f, t = line
    k, forward = model._find_branch(f, t)
    yff, yft, ytf, ytt = _branch_terms(model, k)
    V = point.voltage
    pos = model._label_map()
    vi, vj = V[pos[f]], V[pos[t]]
    if forward:
        I = yff * vi + yft * vj
    else:
        I = ytt * vi + ytf * vj
    return float((vi * np.conj(I)).real)


def measure_output(point, model, noise_std=0.0, rng=None, k=0):
    """Measured output ``y = [f (Hz), V over critical buses, p over critical lines]``.

    ``noise_std`` is a scalar or a per-channel vector; nonzero noise requires
    ``rng`` (a ``numpy.random.Generator`` or seed).
    """
    pos = model._label_map()
    omega_hz = point.omega / TWO_PI
    v = np.array([point.vm[pos[b]] for b in model.critical_buses])
    p = np.array([line_flow(model, point, ln) for ln in model.critical_lines])
    std = np.broadcast_to(np.asarray(noise_std, dtype=float), (model.d_y,))
    if np.any(std > 0):
        gen = np.random.default_rng(rng)
        noise = gen.normal(0.0, 1.0, model.d_y) * std
        omega_hz += noise[0]
        v = v + noise[1:1 + model.d_v]
        p = p + noise[1 + model.d_v:]
    return SystemOutput(omega_hz=float(omega_hz), v=v, p=p, k=k)


def perturb_loads(loads, magnitude, rng=None):
    """Scale each load's P and Q by an independent factor from U[1-magnitude, 1+magnitude]."""
    if not 0.0 <= magnitude < 1.0:
        raise ValueError("magnitude must lie in [0, 1)")
    loads = np.asarray(loads, dtype=float)
    gen = np.random.default_rng(rng)
    factors = gen.uniform(1.0 - magnitude, 1.0 + magnitude, size=loads.shape[0])
    return loads * factors[:, None]
