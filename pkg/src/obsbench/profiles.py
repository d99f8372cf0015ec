"""Synthetic load profiles and the bundled default cell."""

from __future__ import annotations

import math

import numpy as np

from .errors import DomainError
from .model import CellParams, Loadfile, OcvCurve

# Large-format NMC prismatic cell, 58 Ah.
DEFAULT_CELL = CellParams(
    r_ohm=0.5e-3,
    r_a=0.10e-3,
    c_a=1.0e5,
    r_b=0.12e-3,
    c_b=2.5e6,
    capacity_c=58.0 * 3600.0,
    eta=1.0,
)


def default_ocv_fn(s: float) -> float:
    return 3.35 + 0.70 * s + 0.15 * s * s - 0.30 * math.exp(-s / 0.06)


DEFAULT_OCV = OcvCurve.from_function(default_ocv_fn, 21)

# (duration s, fraction of peak current); negative is discharge
DST_STEPS = (
    (16, 0.0), (28, -0.125), (12, -0.25), (8, 0.125),
    (16, 0.0), (24, -0.125), (12, -0.25), (8, 0.125),
    (16, 0.0), (24, -0.125), (12, -0.25), (8, 0.125),
    (16, 0.0), (36, -0.125), (8, -1.0), (24, -0.625),
    (8, 0.25), (32, -0.25), (8, 0.5), (44, 0.0),
)


def _sample(levels_fn, duration_s: float, dt: float) -> Loadfile:
    if not (duration_s > 0 and dt > 0):
        raise DomainError("duration and dt must be > 0")
    n = int(round(duration_s / dt))
    t = dt * np.arange(1, n + 1)
    return Loadfile(t, levels_fn(t - dt))


def dst_profile(duration_s: float = 7200.0, dt: float = 1.0, peak_a: float = 87.0) -> Loadfile:
    """Repeated DST-like cycle (360 s period)."""
    edges = np.cumsum([0] + [d for d, _ in DST_STEPS])
    levels = np.array([lv for _, lv in DST_STEPS])

    def fn(t):
        idx = np.searchsorted(edges, np.mod(t, edges[-1]), side="right") - 1
        return peak_a * levels[idx]

    return _sample(fn, duration_s, dt)


def fuds_profile(duration_s: float = 7200.0, dt: float = 1.0, peak_a: float = 87.0,
                 seed: int = 7) -> Loadfile:
    """Urban-style random piecewise profile with sharp accelerations and regen."""
    rng = np.random.default_rng(seed)
    edges, levels = [0.0], []
    while edges[-1] < duration_s + dt:
        kind = rng.random()
        if kind < 0.15:
            levels.append(0.0)
            edges.append(edges[-1] + rng.uniform(5, 30))
        elif kind < 0.35:
            levels.append(rng.uniform(0.1, 0.5))
            edges.append(edges[-1] + rng.uniform(3, 10))
        elif kind < 0.5:
            levels.append(-rng.uniform(0.6, 1.0))
            edges.append(edges[-1] + rng.uniform(3, 12))
        else:
            levels.append(-rng.uniform(0.05, 0.45))
            edges.append(edges[-1] + rng.uniform(8, 40))
    edges_a = np.array(edges)
    levels_a = np.array(levels)

    def fn(t):
        idx = np.searchsorted(edges_a, t, side="right") - 1
        return peak_a * levels_a[idx]

    return _sample(fn, duration_s, dt)


def constant_profile(current_a: float, duration_s: float, dt: float = 1.0) -> Loadfile:
    return _sample(lambda t: np.full(t.shape, float(current_a)), duration_s, dt)


def pulse_profile(current_a: float = -58.0, rest_s: float = 60.0, pulse_s: float = 120.0,
                  relax_s: float = 1200.0, dt: float = 1.0) -> Loadfile:
    """Rest, one current pulse, then relaxation (one HPPC step)."""
    def fn(t):
        return np.where((t >= rest_s) & (t < rest_s + pulse_s), float(current_a), 0.0)

    return _sample(fn, rest_s + pulse_s + relax_s, dt)


PROFILES = {"dst": dst_profile, "fuds": fuds_profile}


def make_profile(name: str, **kw) -> Loadfile:
    try:
        fn = PROFILES[name]
    except KeyError:
        raise DomainError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}") from None
    return fn(**kw)
