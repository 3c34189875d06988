"""Ground-truth PV arrays and irradiance traces.

The controller never sees this model; it only observes (voltage, power) pairs.
Power follows a simplified single-diode product form::

    p(v, G) = (G / G_ref) * v * (I_sc - I_0 (exp(v / V_sh) - 1)) / P_base

with ``I_0`` chosen so that ``p(V_oc, G) = 0``.  It is strictly concave in v
for v >= 0, so the maximum power point is unique.
"""

from dataclasses import dataclass
import csv
import io
import math
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

G_REF = 1000.0


class IrradianceError(ValueError):
    """Malformed irradiance file."""


@dataclass(frozen=True)
class PvArrayTruth:
    v_oc: float  # V
    i_sc: float  # A
    v_shape: float  # V, diode exponential scale
    p_base: float  # W per pu
    v_min: float = 0.0
    v_max: float = None

    def __post_init__(self):
        if self.v_max is None:
            object.__setattr__(self, "v_max", self.v_oc)
        if not (self.v_oc > 0 and self.i_sc > 0 and self.v_shape > 0 and self.p_base > 0):
            raise ValueError("PV parameters must be positive")
        if not 0.0 <= self.v_min < self.v_max <= self.v_oc:
            raise ValueError("voltage window must satisfy 0 <= v_min < v_max <= v_oc")

    @property
    def i_0(self):
        return self.i_sc / math.expm1(self.v_oc / self.v_shape)


def _power(array, v, irradiance):
    v = np.asarray(v, dtype=float)
    current = array.i_sc - array.i_0 * np.expm1(v / array.v_shape)
    return (irradiance / G_REF) * v * current / array.p_base


def pv_power(array, v, irradiance):
    """Power in pu at terminal voltage ``v`` (scalar or array) and irradiance (W/m^2)."""
    v_arr = np.asarray(v, dtype=float)
    tol = 1e-9 * max(1.0, array.v_max)
    if np.any(v_arr < array.v_min - tol) or np.any(v_arr > array.v_max + tol):
        raise ValueError(f"voltage outside window [{array.v_min}, {array.v_max}]")
    out = _power(array, v_arr, float(irradiance))
    return float(out) if out.ndim == 0 else out


def true_capacity(array, irradiance):
    """Maximum power point ``(v_mpp, p_max)`` over the voltage window."""
    if irradiance < 0:
        raise ValueError("irradiance must be nonnegative")
    lo, hi = array.v_min, array.v_max
    if irradiance == 0:
        return lo, 0.0
    # irradiance only scales p, so the maximizer does not depend on it
    res = minimize_scalar(lambda v: -_power(array, v, G_REF), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12 * max(1.0, hi)})
    cands = [lo, hi, float(res.x)]
    vals = [float(_power(array, c, irradiance)) for c in cands]
    k = int(np.argmax(vals))
    return cands[k], vals[k]


# ---------------------------------------------------------------------------
# Irradiance traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IrradianceTrace:
    times: np.ndarray  # s, strictly increasing
    values: np.ndarray  # (len(times), n_sites) W/m^2
    sites: tuple = ()

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if t.size == 0:
            raise IrradianceError("trace is empty")
        if v.shape[0] != t.size:
            raise IrradianceError("times and values disagree in length")
        if np.any(np.diff(t) <= 0):
            raise IrradianceError("timestamps must be strictly increasing")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise IrradianceError("irradiance must be finite and nonnegative")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)
        if not self.sites:
            object.__setattr__(self, "sites", tuple(f"site_{i + 1}" for i in range(v.shape[1])))

    @property
    def n_sites(self):
        return self.values.shape[1]

    def at(self, t):
        """Irradiance of every site at time ``t`` (linear interpolation, held at the ends)."""
        return np.array([np.interp(t, self.times, self.values[:, s]) for s in range(self.n_sites)])

    def site(self, t, index):
        """Irradiance of the 1-based site ``index`` at time ``t``."""
        return float(np.interp(t, self.times, self.values[:, index - 1]))


def load_irradiance(source):
    """Parse an irradiance CSV (``time_s,site_1,...,site_K``) from text or a path."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and source.endswith(".csv")):
        source = Path(source).read_text()
    reader = csv.reader(io.StringIO(source))
    rows = [r for r in reader if r and any(c.strip() for c in r)]
    if not rows:
        raise IrradianceError("irradiance file is empty")
    header = [c.strip() for c in rows[0]]
    if len(header) < 2 or header[0] != "time_s":
        raise IrradianceError("header must be 'time_s,site_1,...'")
    times, vals = [], []
    for line_no, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise IrradianceError(f"line {line_no}: expected {len(header)} fields")
        try:
            nums = [float(c) for c in r]
        except ValueError as exc:
            raise IrradianceError(f"line {line_no}: {exc}") from exc
        times.append(nums[0])
        vals.append(nums[1:])
    if not times:
        raise IrradianceError("irradiance file has no data rows")
    return IrradianceTrace(np.array(times), np.array(vals), tuple(header[1:]))


def bundled_trace_path():
    return Path(__file__).with_name("data") / "irradiance_sample.csv"
