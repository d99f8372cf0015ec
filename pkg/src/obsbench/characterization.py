"""Offline identification: OCV from low-current tests, ECM parameters from pulses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, IdentificationError
from .model import CellParams, Loadfile, OcvCurve, simulate

SEARCHED = ("r_ohm", "r_a", "c_a", "r_b", "c_b")

DEFAULT_BOUNDS = {
    "r_ohm": (1e-5, 1e-1),
    "r_a": (1e-6, 1e-1),
    "c_a": (1e2, 1e7),
    "r_b": (1e-6, 1e-1),
    "c_b": (1e3, 1e8),
}


@dataclass(frozen=True)
class LowCurrentTest:
    """Charge and discharge branches as ``(soc, voltage)`` pairs."""

    charge: tuple
    discharge: tuple

    def __post_init__(self):
        for name in ("charge", "discharge"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(-1, 2)
            if arr.shape[0] < 2:
                raise DomainError(f"{name} branch needs at least two points")
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"{name} branch has non-finite values")
            d = np.diff(arr[:, 0])
            if not (np.all(d > 0) or np.all(d < 0)):
                raise DomainError(f"soc is not monotone within the {name} branch")
            order = np.argsort(arr[:, 0])
            object.__setattr__(self, name, tuple((float(s), float(v)) for s, v in arr[order]))

    def branch(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, name), dtype=float)

    @property
    def common_range(self) -> tuple:
        c, d = self.branch("charge"), self.branch("discharge")
        return max(c[0, 0], d[0, 0]), min(c[-1, 0], d[-1, 0])


def extract_ocv(test: LowCurrentTest, grid: Sequence[float] | None = None) -> OcvCurve:
    """Average the two branches on ``grid`` (21 uniform points by default)."""
    grid = np.linspace(0.0, 1.0, 21) if grid is None else np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or grid[0] != 0.0 or grid[-1] != 1.0:
        raise DomainError("grid must be one-dimensional and run from soc 0 to soc 1")
    lo, hi = test.common_range
    if lo >= hi:
        raise DomainError("charge and discharge branches do not overlap")
    tol = 1e-12
    if grid.min() < lo - tol or grid.max() > hi + tol:
        raise DomainError(f"grid [{grid.min():g}, {grid.max():g}] exceeds the common "
                          f"SOC range [{lo:g}, {hi:g}]")
    c, d = test.branch("charge"), test.branch("discharge")
    vc = np.interp(grid, c[:, 0], c[:, 1])
    vd = np.interp(grid, d[:, 0], d[:, 1])
    ocv = (vc + vd) / 2.0
    bad = np.flatnonzero(np.diff(ocv) <= 0)
    if bad.size:
        raise IdentificationError(f"averaged OCV is not increasing at soc {grid[bad[0] + 1]:g}")
    return OcvCurve(tuple(float(s) for s in grid), tuple(float(v) for v in ocv))


def segment_slopes(curve: OcvCurve) -> list:
    s, v = curve.soc, curve.ocv
    out = []
    for k in range(len(s) - 1):
        m = (v[k + 1] - v[k]) / (s[k + 1] - s[k])
        c = (v[k] * s[k + 1] - v[k + 1] * s[k]) / (s[k + 1] - s[k])
        out.append((m, c))
    return out


def low_current_test(p: CellParams, ocv: OcvCurve, c_rate: float = 1.0 / 30.0,
                     dt: float = 10.0) -> LowCurrentTest:
    """Simulated full charge from empty and full discharge from full at ``c_rate``."""
    if not (c_rate > 0 and dt > 0):
        raise DomainError("c_rate and dt must be > 0")
    current = c_rate * p.capacity_c / 3600.0
    n = int(math.floor(3600.0 / c_rate / dt))
    t = dt * np.arange(1, n + 1)
    branches = []
    for sign, soc0 in ((1.0, 0.0), (-1.0, 1.0)):
        lf = Loadfile(t, np.full(n, sign * current))
        tr = simulate(p, ocv, soc0, lf)
        # the rest reading before the current is applied opens each branch
        soc = np.concatenate(([soc0], tr.soc))
        volt = np.concatenate(([ocv(soc0)], tr.voltage))
        branches.append(np.column_stack([soc, volt]))
    return LowCurrentTest(tuple(map(tuple, branches[0])), tuple(map(tuple, branches[1])))


@dataclass(frozen=True)
class PsoConfig:
    swarm_size: int = 50
    iterations: int = 200
    w: float = 0.729
    c1: float = 1.494
    c2: float = 1.494
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    seed: int = 0

    def __post_init__(self):
        if self.swarm_size < 2:
            raise DomainError("swarm_size must be >= 2")
        if self.iterations < 0:
            raise DomainError("iterations must be >= 0")
        merged = dict(DEFAULT_BOUNDS)
        merged.update({k: tuple(float(x) for x in v) for k, v in self.bounds.items()})
        for name, (lo, hi) in merged.items():
            if name not in SEARCHED:
                raise DomainError(f"unknown search parameter {name!r}")
            if not (math.isfinite(lo) and math.isfinite(hi) and 0 < lo < hi):
                raise DomainError(f"bounds for {name} must satisfy 0 < lo < hi < inf")
        object.__setattr__(self, "bounds", merged)

    def to_dict(self) -> dict:
        return {"swarm_size": self.swarm_size, "iterations": self.iterations, "w": self.w,
                "c1": self.c1, "c2": self.c2, "seed": self.seed,
                "bounds": {k: list(v) for k, v in self.bounds.items()}}

    @classmethod
    def from_dict(cls, data: dict) -> "PsoConfig":
        known = {"swarm_size", "iterations", "w", "c1", "c2", "bounds", "seed"}
        unknown = set(data) - known
        if unknown:
            raise DomainError(f"unknown PSO config keys {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class PsoFit:
    params: CellParams
    rmse_v: float
    history: tuple  # global-best objective after each iteration
    window_start: int


def detect_pulse(loadfile: Loadfile, capacity_c: float) -> int:
    """Index of the first sample whose current jumps by more than 0.1 C."""
    threshold = 0.1 * capacity_c / 3600.0
    jumps = np.flatnonzero(np.abs(np.diff(loadfile.current_a)) > threshold)
    if jumps.size == 0:
        raise DomainError("pulse has no current step above 0.1 C")
    return int(jumps[0]) + 1


def _rc_response(tau: np.ndarray, r: np.ndarray, cur: np.ndarray, dts: np.ndarray) -> np.ndarray:
    """RC voltage for every particle (rows) at every sample (columns)."""
    out = np.empty((tau.size, cur.size))
    v = np.zeros(tau.size)
    for k in range(cur.size):
        f = np.exp(-dts[k] / tau)
        v = f * v + r * (1.0 - f) * cur[k]
        out[:, k] = v
    return out


class _Objective:
    def __init__(self, pulse: Loadfile, ocv: OcvCurve, capacity_c: float, eta: float,
                 soc0: float | None):
        if pulse.voltage_v is None:
            raise DomainError("pulse loadfile needs a voltage column")
        self.start = detect_pulse(pulse, capacity_c)
        self.cur = pulse.current_a
        self.dts = pulse.intervals()
        self.v_meas = pulse.voltage_v
        if soc0 is None:
            soc0 = ocv.inverse(float(pulse.voltage_v[0]))
        soc = soc0 + np.cumsum(eta * self.cur * self.dts) / capacity_c
        soc = np.clip(soc, 0.0, 1.0)
        self.ocv_v = np.array([ocv(float(s)) for s in soc])
        self.soc0 = soc0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Voltage RMSE over the fit window for parameter rows ``x`` (linear units)."""
        r0, ra, ca, rb, cb = (x[:, j] for j in range(5))
        va = _rc_response(ra * ca, ra, self.cur, self.dts)
        vb = _rc_response(rb * cb, rb, self.cur, self.dts)
        v = self.ocv_v + r0[:, None] * self.cur + va + vb
        err = (v - self.v_meas)[:, self.start:]
        out = np.sqrt(np.mean(err * err, axis=1))
        return np.where(np.isfinite(out), out, np.inf)

    def jump_r_ohm(self) -> float:
        k = self.start
        di = self.cur[k] - self.cur[k - 1]
        return abs((self.v_meas[k] - self.v_meas[k - 1]) / di)


def _canonical(x: np.ndarray, bounds: dict) -> np.ndarray:
    """Order the two RC pairs so that ``tau_a <= tau_b`` when the swap stays in bounds."""
    r0, ra, ca, rb, cb = x
    if ra * ca > rb * cb:
        swapped = np.array([r0, rb, cb, ra, ca])
        if all(bounds[n][0] <= v <= bounds[n][1] for n, v in zip(SEARCHED, swapped)):
            return swapped
    return np.array([r0, ra, ca, rb, cb])


def fit_pulse_pso(pulse: Loadfile, ocv: OcvCurve, cfg: PsoConfig | None = None, *,
                  capacity_c: float, eta: float = 1.0, soc0: float | None = None,
                  init_positions=None) -> PsoFit:
    """Fit ``r_ohm, r_a, c_a, r_b, c_b`` to a measured pulse by global-best PSO.

    The search runs in log space inside ``cfg.bounds`` with reflective walls.
    The swarm's ``r_ohm`` coordinate is seeded around the voltage jump at
    the pulse onset; the others start uniformly in their bounds.
    ``init_positions`` (rows in linear units) overrides the seeding.
    """
    cfg = cfg or PsoConfig()
    if not (capacity_c > 0 and 0 < eta <= 1):
        raise DomainError("capacity_c must be > 0 and eta in (0, 1]")
    obj = _Objective(pulse, ocv, capacity_c, eta, soc0)
    lo = np.log([cfg.bounds[n][0] for n in SEARCHED])
    hi = np.log([cfg.bounds[n][1] for n in SEARCHED])
    span = hi - lo
    rng = np.random.default_rng(cfg.seed)
    n = cfg.swarm_size

    if init_positions is not None:
        pos = np.log(np.asarray(init_positions, dtype=float).reshape(n, 5))
    else:
        pos = lo + rng.random((n, 5)) * span
        guess = np.log(obj.jump_r_ohm()) if obj.jump_r_ohm() > 0 else (lo[0] + hi[0]) / 2
        pos[:, 0] = guess + rng.normal(0.0, 0.2, n)
    pos = np.clip(pos, lo, hi)
    vel = np.zeros_like(pos)

    def evaluate(p):
        return obj(np.exp(p))

    cost = evaluate(pos)
    best_pos, best_cost = pos.copy(), cost.copy()
    g = int(np.argmin(best_cost))
    g_pos, g_cost = best_pos[g].copy(), float(best_cost[g])
    if not math.isfinite(g_cost):
        raise IdentificationError("every candidate simulation failed")
    history = []
    for _ in range(cfg.iterations):
        r1 = rng.random((n, 5))
        r2 = rng.random((n, 5))
        vel = cfg.w * vel + cfg.c1 * r1 * (best_pos - pos) + cfg.c2 * r2 * (g_pos - pos)
        vel = np.clip(vel, -span, span)
        pos = pos + vel
        # reflect off the walls and reverse the offending velocity component
        for _bounce in range(2):
            below, above = pos < lo, pos > hi
            pos = np.where(below, 2 * lo - pos, pos)
            pos = np.where(above, 2 * hi - pos, pos)
            vel = np.where(below | above, -vel, vel)
        pos = np.clip(pos, lo, hi)
        cost = evaluate(pos)
        better = cost < best_cost
        best_pos[better] = pos[better]
        best_cost[better] = cost[better]
        g = int(np.argmin(best_cost))
        if best_cost[g] < g_cost:
            g_pos, g_cost = best_pos[g].copy(), float(best_cost[g])
        history.append(g_cost)

    # exp(log(bound)) may miss the bound by an ulp
    lin_lo = np.array([cfg.bounds[n][0] for n in SEARCHED])
    lin_hi = np.array([cfg.bounds[n][1] for n in SEARCHED])
    x = _canonical(np.clip(np.exp(g_pos), lin_lo, lin_hi), cfg.bounds)
    params = CellParams(*x, capacity_c=capacity_c, eta=eta)
    return PsoFit(params, g_cost, tuple(history), obj.start)
