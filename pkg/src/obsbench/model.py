"""Second-order equivalent-circuit cell model.

Two RC pairs (charge-transfer ``a`` and concentration ``b``) in series with an
ohmic resistance and a SOC-dependent open-circuit voltage.  Positive current
charges the cell: it raises SOC and the terminal voltage.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, NamedTuple, Sequence, Union

import numpy as np

from .errors import DomainError, FormatError, ParameterError

# SOC overshoot tolerated by the simulator before the saturation flag is raised
SATURATION_SLACK = 1e-9


@dataclass(frozen=True)
class CellParams:
    r_ohm: float
    r_a: float
    c_a: float
    r_b: float
    c_b: float
    capacity_c: float
    eta: float = 1.0

    def __post_init__(self):
        for name in ("r_ohm", "r_a", "c_a", "r_b", "c_b", "capacity_c"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ParameterError(f"{name} must be finite and > 0, got {value!r}")
        if not (0.0 < self.eta <= 1.0):
            raise ParameterError(f"eta must lie in (0, 1], got {self.eta!r}")
        if not (math.isfinite(self.tau_a) and math.isfinite(self.tau_b)):
            raise ParameterError("RC time constants overflow")

    @property
    def tau_a(self) -> float:
        return self.r_a * self.c_a

    @property
    def tau_b(self) -> float:
        return self.r_b * self.c_b

    @property
    def capacity_ah(self) -> float:
        return self.capacity_c / 3600.0

    def replace(self, **changes) -> "CellParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CellParams":
        unknown = set(data) - set(_PARAM_FIELDS)
        if unknown:
            raise FormatError(f"unknown CellParams fields {sorted(unknown)}")
        try:
            return cls(**{k: float(data[k]) for k in _PARAM_FIELDS if k in data})
        except (TypeError, ValueError) as exc:
            raise FormatError(f"bad CellParams document: {exc}") from None


_PARAM_FIELDS = ("r_ohm", "r_a", "c_a", "r_b", "c_b", "capacity_c", "eta")


@dataclass(frozen=True, eq=False)
class OcvCurve:
    """Monotone piecewise-linear SOC -> OCV map.

    Segment ``i`` spans ``[soc[i], soc[i+1]]`` and evaluates ``m_i*s + c_i``.
    """

    soc: tuple
    ocv: tuple
    slopes: np.ndarray = field(init=False, repr=False)
    intercepts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        s = np.asarray(self.soc, dtype=float)
        v = np.asarray(self.ocv, dtype=float)
        if s.ndim != 1 or s.shape != v.shape or s.size < 2:
            raise ParameterError("OCV curve needs >= 2 matching (soc, ocv) points")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(v))):
            raise ParameterError("OCV curve contains non-finite values")
        if s[0] != 0.0 or s[-1] != 1.0:
            raise ParameterError("OCV curve must cover SOC [0, 1] exactly")
        if np.any(np.diff(s) <= 0):
            raise ParameterError("OCV breakpoints must have strictly increasing SOC")
        if np.any(np.diff(v) <= 0):
            raise ParameterError("OCV must be strictly increasing in SOC")
        ds = s[1:] - s[:-1]
        slopes = (v[1:] - v[:-1]) / ds
        intercepts = (v[:-1] * s[1:] - v[1:] * s[:-1]) / ds
        slopes.flags.writeable = False
        intercepts.flags.writeable = False
        object.__setattr__(self, "soc", tuple(float(x) for x in s))
        object.__setattr__(self, "ocv", tuple(float(x) for x in v))
        object.__setattr__(self, "slopes", slopes)
        object.__setattr__(self, "intercepts", intercepts)

    def __eq__(self, other):
        if not isinstance(other, OcvCurve):
            return NotImplemented
        return self.soc == other.soc and self.ocv == other.ocv

    def __hash__(self):
        return hash((self.soc, self.ocv))

    @classmethod
    def from_function(cls, fn: Callable[[float], float], n_points: int = 21) -> "OcvCurve":
        grid = np.linspace(0.0, 1.0, n_points)
        return cls(tuple(grid), tuple(float(fn(s)) for s in grid))

    @property
    def n_segments(self) -> int:
        return len(self.soc) - 1

    @property
    def mean_slope(self) -> float:
        # SOC-width weighted mean of the segment slopes, i.e. the chord slope
        return (self.ocv[-1] - self.ocv[0]) / (self.soc[-1] - self.soc[0])

    def segment(self, soc: float) -> int:
        """Index of the segment containing ``soc``; the upper end maps to the last one.

        Values outside [0, 1] map to the nearest end segment.
        """
        i = bisect.bisect_right(self.soc, soc) - 1
        return min(max(i, 0), self.n_segments - 1)

    def __call__(self, soc: float) -> float:
        return ocv_eval(self, soc)

    def eval_extended(self, soc: float) -> float:
        """Evaluate with the end segments extended affinely beyond [0, 1]."""
        i = self.segment(soc)
        return float(self.slopes[i] * soc + self.intercepts[i])

    def slope_at(self, soc: float) -> float:
        return float(self.slopes[self.segment(soc)])

    def inverse(self, voltage: float) -> float:
        """SOC whose OCV equals ``voltage`` (clamped to the curve's range)."""
        return float(np.interp(voltage, self.ocv, self.soc))

    def to_dict(self) -> dict:
        return {"breakpoints": [[s, v] for s, v in zip(self.soc, self.ocv)]}

    @classmethod
    def from_dict(cls, data: dict) -> "OcvCurve":
        try:
            pts = data["breakpoints"]
            return cls(tuple(float(p[0]) for p in pts), tuple(float(p[1]) for p in pts))
        except (KeyError, TypeError, IndexError) as exc:
            raise FormatError(f"bad OcvCurve document: {exc}") from None


class StateVector(NamedTuple):
    v_a: float
    v_b: float
    soc: float


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """``x' = a x + b i``, ``y = c x + d i`` with ``y = V_out - c_offset``."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: float
    c_offset: float = 0.0


def build_linear_system(p: CellParams, ocv: OcvCurve, soc_operating: float) -> LinearSystem:
    """Linearised state-space form at the OCV segment containing ``soc_operating``."""
    if not isinstance(p, CellParams):
        raise ParameterError("expected CellParams")
    if not (0.0 <= soc_operating <= 1.0):
        raise DomainError(f"operating SOC {soc_operating!r} outside [0, 1]")
    seg = ocv.segment(soc_operating)
    return linear_system_at_slope(p, float(ocv.slopes[seg]), float(ocv.intercepts[seg]))


def linear_system_at_slope(p: CellParams, m: float, c_offset: float = 0.0) -> LinearSystem:
    a = np.diag([-1.0 / p.tau_a, -1.0 / p.tau_b, 0.0])
    b = np.array([1.0 / p.c_a, 1.0 / p.c_b, p.eta / p.capacity_c])
    c = np.array([1.0, 1.0, m])
    return LinearSystem(a=a, b=b, c=c, d=p.r_ohm, c_offset=c_offset)


def ocv_eval(ocv: OcvCurve, soc: float) -> float:
    if not (0.0 <= soc <= 1.0):
        raise DomainError(f"SOC {soc!r} outside [0, 1]")
    i = ocv.segment(soc)
    if soc == ocv.soc[i]:
        return ocv.ocv[i]
    if soc == ocv.soc[i + 1]:
        return ocv.ocv[i + 1]
    return float(ocv.slopes[i] * soc + ocv.intercepts[i])


def discrete_matrices(p: CellParams, dt: float, method: str = "zoh"):
    """Diagonal transition ``phi`` and input vector ``gamma`` for one step of ``dt``."""
    if method == "zoh":
        fa = math.exp(-dt / p.tau_a)
        fb = math.exp(-dt / p.tau_b)
        return (fa, fb, 1.0), (p.r_a * (1.0 - fa), p.r_b * (1.0 - fb), p.eta * dt / p.capacity_c)
    if method == "euler":
        return (
            (1.0 - dt / p.tau_a, 1.0 - dt / p.tau_b, 1.0),
            (dt / p.c_a, dt / p.c_b, p.eta * dt / p.capacity_c),
        )
    raise DomainError(f"unknown discretization {method!r}")


def step_exact(p: CellParams, x: StateVector, i_amps: float, dt: float) -> StateVector:
    """Zero-order-hold exact propagation over ``dt`` seconds."""
    if not dt > 0:
        raise DomainError(f"dt must be > 0, got {dt!r}")
    (fa, fb, _), (ga, gb, gs) = discrete_matrices(p, dt)
    return StateVector(fa * x[0] + ga * i_amps, fb * x[1] + gb * i_amps, x[2] + gs * i_amps)


def step_euler(p: CellParams, x: StateVector, i_amps: float, dt: float) -> StateVector:
    if not dt > 0:
        raise DomainError(f"dt must be > 0, got {dt!r}")
    (fa, fb, _), (ga, gb, gs) = discrete_matrices(p, dt, "euler")
    return StateVector(fa * x[0] + ga * i_amps, fb * x[1] + gb * i_amps, x[2] + gs * i_amps)


def terminal_voltage(p: CellParams, ocv: OcvCurve, x: StateVector, i_amps: float) -> float:
    return ocv_eval(ocv, x[2]) + i_amps * p.r_ohm + x[0] + x[1]


@dataclass(frozen=True, eq=False)
class ParamMap:
    """Cell parameters tabulated over a (temperature, SOC) grid.

    ``params[j][k]`` and ``ocv[j][k]`` belong to ``temperatures[j]``, ``socs[k]``.
    Queries outside the grid are clamped to its edge.
    """

    temperatures: tuple
    socs: tuple
    params: tuple
    ocv: tuple = ()

    def __post_init__(self):
        t = np.asarray(self.temperatures, dtype=float)
        s = np.asarray(self.socs, dtype=float)
        if t.ndim != 1 or s.ndim != 1 or t.size < 1 or s.size < 1:
            raise ParameterError("ParamMap grids must be non-empty 1-D")
        if np.any(np.diff(t) <= 0) or np.any(np.diff(s) <= 0):
            raise ParameterError("ParamMap grids must be strictly increasing")
        if len(self.params) != t.size or any(len(row) != s.size for row in self.params):
            raise ParameterError("ParamMap params shape does not match grids")
        for row in self.params:
            for cell in row:
                if not isinstance(cell, CellParams):
                    raise ParameterError("ParamMap entries must be CellParams")
        if self.ocv and (len(self.ocv) != t.size or any(len(r) != s.size for r in self.ocv)):
            raise ParameterError("ParamMap ocv shape does not match grids")
        object.__setattr__(self, "temperatures", tuple(float(x) for x in t))
        object.__setattr__(self, "socs", tuple(float(x) for x in s))
        object.__setattr__(self, "params", tuple(tuple(r) for r in self.params))
        object.__setattr__(self, "ocv", tuple(tuple(float(v) for v in r) for r in self.ocv))
        table = np.array([[[getattr(c, f) for f in _PARAM_FIELDS] for c in r] for r in self.params])
        object.__setattr__(self, "_table", table)

    @staticmethod
    def _bracket(grid: tuple, x: float):
        if len(grid) == 1 or x <= grid[0]:
            return 0, 0, 0.0
        if x >= grid[-1]:
            n = len(grid) - 1
            return n, n, 0.0
        j = bisect.bisect_right(grid, x) - 1
        return j, j + 1, (x - grid[j]) / (grid[j + 1] - grid[j])

    def _interp(self, table: np.ndarray, temp_c: float, soc: float):
        j0, j1, wt = self._bracket(self.temperatures, temp_c)
        k0, k1, ws = self._bracket(self.socs, soc)
        return ((1 - wt) * (1 - ws) * table[j0, k0] + (1 - wt) * ws * table[j0, k1]
                + wt * (1 - ws) * table[j1, k0] + wt * ws * table[j1, k1])

    def params_at(self, temp_c: float, soc: float) -> CellParams:
        j0, j1, wt = self._bracket(self.temperatures, temp_c)
        k0, k1, ws = self._bracket(self.socs, soc)
        if wt == 0.0 and ws == 0.0:
            return self.params[j0][k0]
        return CellParams(*(float(v) for v in self._interp(self._table, temp_c, soc)))

    def ocv_at(self, temp_c: float, soc: float) -> float:
        if not self.ocv:
            raise DomainError("ParamMap carries no OCV table")
        return float(self._interp(np.asarray(self.ocv), temp_c, soc))

    def to_dict(self) -> dict:
        out = {
            "temperatures": list(self.temperatures),
            "socs": list(self.socs),
            "params": [[c.to_dict() for c in row] for row in self.params],
        }
        if self.ocv:
            out["ocv"] = [list(r) for r in self.ocv]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ParamMap":
        try:
            return cls(
                temperatures=tuple(data["temperatures"]),
                socs=tuple(data["socs"]),
                params=tuple(tuple(CellParams.from_dict(c) for c in row) for row in data["params"]),
                ocv=tuple(tuple(r) for r in data.get("ocv", ())),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"bad ParamMap document: {exc}") from None


@dataclass(frozen=True, eq=False)
class Loadfile:
    """Sampled drive cycle.

    Sample ``k`` reports the current held over the interval ending at
    ``time_s[k]`` and the voltage measured at that instant.  The first
    interval is taken equal to the second (or ``first_dt`` for a single
    sample), so the initial state sits one interval before ``time_s[0]``.
    """

    time_s: np.ndarray
    current_a: np.ndarray
    voltage_v: np.ndarray | None = None
    temp_c: np.ndarray | None = None

    def __post_init__(self):
        cols = {}
        for name in ("time_s", "current_a", "voltage_v", "temp_c"):
            value = getattr(self, name)
            if value is None:
                continue
            arr = np.array(value, dtype=float)
            arr.flags.writeable = False
            cols[name] = arr
            object.__setattr__(self, name, arr)
        n = cols["time_s"].shape
        for name, arr in cols.items():
            if arr.ndim != 1 or arr.shape != n:
                raise FormatError(f"column {name} has shape {arr.shape}, expected {n}")
            bad = np.flatnonzero(~np.isfinite(arr))
            if bad.size:
                raise FormatError(f"non-finite {name} at row {int(bad[0]) + 1}")
        steps = np.diff(cols["time_s"])
        bad = np.flatnonzero(steps <= 0)
        if bad.size:
            raise FormatError(f"timestamps not strictly increasing at row {int(bad[0]) + 2}")

    def __len__(self) -> int:
        return int(self.time_s.size)

    def intervals(self, first_dt: float = 1.0) -> np.ndarray:
        n = len(self)
        if n == 0:
            return np.zeros(0)
        if n == 1:
            return np.array([float(first_dt)])
        d = np.diff(self.time_s)
        return np.concatenate(([d[0]], d))

    def replace(self, **changes) -> "Loadfile":
        return replace(self, **changes)

    @property
    def duration_s(self) -> float:
        return float(self.time_s[-1] - self.time_s[0]) if len(self) > 1 else 0.0

    @classmethod
    def from_pairs(cls, pairs: Sequence) -> "Loadfile":
        arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1])


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Ground truth.  ``states[0]`` is the initial state, ``states[k+1]`` the
    state at sample ``k``; ``voltage[k]`` is the terminal voltage at sample ``k``."""

    time_s: np.ndarray
    states: np.ndarray
    voltage: np.ndarray
    saturated: np.ndarray

    @property
    def soc(self) -> np.ndarray:
        return self.states[1:, 2]

    @property
    def initial_state(self) -> StateVector:
        return StateVector(*self.states[0])

    @property
    def final_state(self) -> StateVector:
        return StateVector(*self.states[-1])

    @property
    def any_saturated(self) -> bool:
        return bool(self.saturated.any())


ParamSource = Union[CellParams, ParamMap, Callable[[float, float, float], CellParams]]


def _resolve_params(p: ParamSource) -> Callable[[float, float, float], CellParams]:
    if isinstance(p, CellParams):
        return lambda t, soc, temp: p
    if isinstance(p, ParamMap):
        return lambda t, soc, temp: p.params_at(temp, soc)
    if callable(p):
        return p
    raise ParameterError(f"unsupported parameter source {type(p).__name__}")


def simulate(
    p: ParamSource,
    ocv: OcvCurve,
    soc0: float,
    loadfile: Loadfile,
    *,
    v0: tuple = (0.0, 0.0),
    method: str = "zoh",
    first_dt: float = 1.0,
    default_temp_c: float = 25.0,
) -> Trajectory:
    """Drive the cell through ``loadfile`` and return the ground-truth trajectory.

    ``p`` may be fixed parameters, a ``ParamMap`` (interpolated at the current
    temperature and SOC each step) or any callable ``(t, soc, temp_c) ->
    CellParams``.  SOC is clamped to [0, 1]; ``saturated`` flags the samples
    where the clamp engaged.
    """
    if not (0.0 <= soc0 <= 1.0):
        raise DomainError(f"initial SOC {soc0!r} outside [0, 1]")
    if not isinstance(loadfile, Loadfile):
        loadfile = Loadfile.from_pairs(loadfile)
    source = _resolve_params(p)
    n = len(loadfile)
    t = loadfile.time_s
    cur = loadfile.current_a
    temps = loadfile.temp_c if loadfile.temp_c is not None else np.full(n, default_temp_c)
    dts = loadfile.intervals(first_dt)
    states = np.empty((n + 1, 3))
    voltage = np.empty(n)
    saturated = np.zeros(n, dtype=bool)
    va, vb, s = float(v0[0]), float(v0[1]), float(soc0)
    states[0] = (va, vb, s)
    for k in range(n):
        i = float(cur[k])
        cell = source(float(t[k] - dts[k]), s, float(temps[k]))
        (fa, fb, _), (ga, gb, gs) = discrete_matrices(cell, float(dts[k]), method)
        va = fa * va + ga * i
        vb = fb * vb + gb * i
        s = s + gs * i
        if s > 1.0 or s < 0.0:
            if s > 1.0 + SATURATION_SLACK or s < -SATURATION_SLACK:
                saturated[k] = True
            s = min(max(s, 0.0), 1.0)
        states[k + 1] = (va, vb, s)
        # voltage uses the parameters in force at the sample instant
        cell_v = source(float(t[k]), s, float(temps[k]))
        voltage[k] = ocv_eval(ocv, s) + i * cell_v.r_ohm + va + vb
    return Trajectory(time_s=t.copy(), states=states, voltage=voltage, saturated=saturated)
