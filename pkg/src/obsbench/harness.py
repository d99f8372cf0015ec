"""Scenario engine: ground truth, measurement corruption, estimator runs, metrics."""

from __future__ import annotations

import gc
import math
import os
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .baseline_filter import SrckfState, srckf_step
from .errors import ConfigurationError, DesignError, DomainError
from .model import CellParams, Loadfile, OcvCurve, simulate
from .observers import (VARIANTS, ObserverGains, ObserverState, default_gains, observer_step,
                        verify_segments)
from .profiles import DEFAULT_CELL, DEFAULT_OCV, make_profile

ESTIMATORS = VARIANTS + ("srckf",)
KINDS = ("accuracy", "convergence", "current_noise", "voltage_noise", "sensitivity", "timing")
PERTURBABLE = ("r_ohm", "r_a", "c_a", "r_b", "c_b")
ENVELOPES = ("step", "damped")
MAX_REL_AMP = 0.8


# --------------------------------------------------------------------------- metrics

@dataclass(frozen=True)
class Metrics:
    max_ae: float
    rmse: float
    mae: float

    def to_dict(self) -> dict:
        return {"max_ae": self.max_ae, "rmse": self.rmse, "mae": self.mae}


def compute_metrics(truth, estimate) -> Metrics:
    truth = np.asarray(truth, dtype=float).ravel()
    estimate = np.asarray(estimate, dtype=float).ravel()
    if truth.size != estimate.size:
        raise DomainError(f"length mismatch: {truth.size} vs {estimate.size}")
    if truth.size == 0:
        raise DomainError("metrics need at least one sample")
    err = np.abs(truth - estimate)
    return Metrics(float(err.max()), float(np.sqrt(np.mean(err * err))), float(err.mean()))


# --------------------------------------------------------------------------- injections

def inject_current_bias(loadfile: Loadfile, mean_a: float, sd_a: float, seed: int,
                        *, antithetic: bool = False) -> Loadfile:
    """``i + N(mean, sd^2)``; ``antithetic`` mirrors the zero-mean part."""
    if not sd_a >= 0:
        raise DomainError("sd_a must be >= 0")
    z = np.random.default_rng(seed).standard_normal(len(loadfile))
    if antithetic:
        z = -z
    return loadfile.replace(current_a=loadfile.current_a + mean_a + sd_a * z)


def damping_envelope(t: np.ndarray, tau_s: float) -> np.ndarray:
    if math.isinf(tau_s):
        return np.ones_like(t, dtype=float)
    return np.exp(-np.asarray(t, dtype=float) / tau_s)


def inject_voltage_noise(loadfile: Loadfile, mean_v: float, sd_v: float, damping_tau_s: float,
                         seed: int, *, antithetic: bool = False) -> Loadfile:
    """``v + exp(-t/tau) * (mean + N(0, sd^2))``; ``tau = inf`` disables damping."""
    if not sd_v >= 0:
        raise DomainError("sd_v must be >= 0")
    if not damping_tau_s > 0:
        raise DomainError("damping_tau_s must be > 0 (or inf)")
    if loadfile.voltage_v is None:
        raise DomainError("loadfile has no voltage column to corrupt")
    z = np.random.default_rng(seed).standard_normal(len(loadfile))
    if antithetic:
        z = -z
    env = damping_envelope(loadfile.time_s, damping_tau_s)
    return loadfile.replace(voltage_v=loadfile.voltage_v + env * (mean_v + sd_v * z))


@dataclass(frozen=True)
class Perturbation:
    name: str
    relative_amp: float
    envelope: str = "step"
    tau_s: float | None = None  # None: one fifth of the loadfile duration

    def __post_init__(self):
        if self.name not in PERTURBABLE:
            raise DomainError(f"unknown parameter {self.name!r}; expected one of {PERTURBABLE}")
        if abs(self.relative_amp) > MAX_REL_AMP:
            raise DomainError(f"|relative_amp| must be <= {MAX_REL_AMP}")
        if self.envelope not in ENVELOPES:
            raise DomainError(f"envelope must be one of {ENVELOPES}")
        if self.tau_s is not None and not self.tau_s > 0:
            raise DomainError("tau_s must be > 0")

    def to_dict(self) -> dict:
        return {"name": self.name, "relative_amp": self.relative_amp,
                "envelope": self.envelope, "tau_s": self.tau_s}


def perturb_parameter(p: CellParams, name: str, relative_amp: float, envelope: str = "step",
                      tau_s: float = 1440.0) -> Callable[[float, float, float], CellParams]:
    """Truth-side schedule ``t -> p`` with ``name`` scaled by ``1 + amp*env(t)``."""
    Perturbation(name, relative_amp, envelope, tau_s)
    base = getattr(p, name)

    def schedule(t: float, soc: float = 0.0, temp_c: float = 25.0) -> CellParams:
        env = 1.0 if envelope == "step" else math.exp(-max(t, 0.0) / tau_s)
        return p.replace(**{name: base * (1.0 + relative_amp * env)})

    return schedule


# --------------------------------------------------------------------------- scenario

@dataclass(frozen=True)
class NoiseSpec:
    bias_mean_a: float = 0.0
    bias_sd_a: float = 0.0
    voltage_mean_v: float = 0.0
    voltage_sd_v: float = 0.0
    damping_tau_s: float | None = None  # None: one fifth of the duration

    @property
    def has_current(self) -> bool:
        return self.bias_mean_a != 0 or self.bias_sd_a != 0

    @property
    def has_voltage(self) -> bool:
        return self.voltage_mean_v != 0 or self.voltage_sd_v != 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class Scenario:
    kind: str
    estimators: tuple = ESTIMATORS
    soc_true0: float = 0.8
    soc_est0: float = 0.8
    loadfile: str | None = None
    profile: str = "dst"
    duration_s: float = 7200.0
    dt: float = 1.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    perturbation: Perturbation | None = None
    seed: int | None = None
    params: str | None = None
    ocv: str | None = None
    gains: dict = field(default_factory=dict)
    band_pct: float = 2.0
    hold_s: float = 60.0
    base_dir: str = "."

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown scenario kind {self.kind!r}; expected one of {KINDS}")
        est = tuple(self.estimators)
        if not est:
            raise DomainError("estimator list is empty")
        for name in est:
            if name not in ESTIMATORS:
                raise DomainError(f"unknown estimator {name!r}; expected one of {ESTIMATORS}")
        object.__setattr__(self, "estimators", est)
        for name in ("soc_true0", "soc_est0"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1]")
        if not self.dt > 0:
            raise DomainError("dt must be > 0")
        if (self.noise.has_current or self.noise.has_voltage) and self.seed is None:
            raise DomainError("a seed is required for scenarios with noise")

    def replace(self, **changes) -> "Scenario":
        return replace(self, **changes)

    def resolve(self, path: str | None) -> str | None:
        if path is None:
            return None
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "estimators": list(self.estimators),
            "soc_true0": self.soc_true0, "soc_est0": self.soc_est0,
            "loadfile": self.loadfile, "profile": self.profile, "duration_s": self.duration_s,
            "dt": self.dt, "noise": self.noise.to_dict(),
            "perturbation": self.perturbation.to_dict() if self.perturbation else None,
            "seed": self.seed, "params": self.params, "ocv": self.ocv, "gains": dict(self.gains),
            "band_pct": self.band_pct, "hold_s": self.hold_s,
        }

    @classmethod
    def from_dict(cls, data: dict, base_dir: str = ".") -> "Scenario":
        data = dict(data)
        known = set(cls.__dataclass_fields__) - {"base_dir"}
        unknown = set(data) - known
        if unknown:
            raise DomainError(f"unknown scenario keys {sorted(unknown)}")
        if "kind" not in data:
            raise DomainError("scenario needs a 'kind'")
        if isinstance(data.get("noise"), dict):
            data["noise"] = NoiseSpec(**data["noise"])
        if isinstance(data.get("perturbation"), dict):
            data["perturbation"] = Perturbation(**data["perturbation"])
        if "estimators" in data:
            data["estimators"] = tuple(data["estimators"])
        return cls(base_dir=base_dir, **data)


def default_scenario(kind: str, **changes) -> Scenario:
    """Bundled setup for each experiment kind on the default cell."""
    presets = {
        "accuracy": {},
        "convergence": {"soc_true0": 0.6, "soc_est0": 1.0},
        "current_noise": {"noise": NoiseSpec(bias_mean_a=0.5, bias_sd_a=0.01), "seed": 1},
        "voltage_noise": {"noise": NoiseSpec(voltage_mean_v=0.004, voltage_sd_v=0.005), "seed": 1},
        "sensitivity": {"perturbation": Perturbation("r_ohm", 0.8, "step")},
        "timing": {},
    }
    if kind not in presets:
        raise DomainError(f"unknown scenario kind {kind!r}; expected one of {KINDS}")
    cfg = presets[kind]
    cfg.update(changes)
    return Scenario(kind=kind, **cfg)


# --------------------------------------------------------------------------- runs

@dataclass(frozen=True, eq=False)
class EstimatorRun:
    name: str
    t: np.ndarray
    soc_true: np.ndarray
    soc_hat: np.ndarray
    v_meas: np.ndarray
    v_hat: np.ndarray
    e: np.ndarray
    metrics: Metrics  # SOC error in percentage points
    voltage_metrics: Metrics  # v_hat vs v_meas in volts
    convergence_time_s: float | None
    wall_s: float

    @property
    def soc_error(self) -> np.ndarray:
        return self.soc_hat - self.soc_true


@dataclass(frozen=True, eq=False)
class ScenarioResult:
    scenario: Scenario
    runs: tuple
    loadfile: Loadfile  # corrupted stream the estimators consumed
    soc_true: np.ndarray
    voltage_true: np.ndarray
    model_voltage_rmse_v: float  # nominal open-loop model vs truth voltage

    def run(self, name: str) -> EstimatorRun:
        for r in self.runs:
            if r.name == name:
                return r
        raise KeyError(name)

    def comparison_rows(self) -> list:
        rows = []
        for r in self.runs:
            rows.append({
                "estimator": r.name,
                "max_ae_pct": r.metrics.max_ae, "rmse_pct": r.metrics.rmse, "mae_pct": r.metrics.mae,
                "v_rmse_mv": 1000.0 * r.voltage_metrics.rmse,
                "convergence_s": r.convergence_time_s,
            })
        return rows


def convergence_time(run_or_t, err=None, band_pct: float = 2.0, hold_s: float = 60.0):
    """Earliest time after which ``|SOC error|`` stays within ``band_pct`` points.

    Accepts an ``EstimatorRun`` or ``(t, soc_error_fraction)``.  Time is
    measured from the first sample.  Returns ``None`` when the error never
    settles or the settled stretch is shorter than ``hold_s``.
    """
    if not band_pct > 0:
        raise DomainError("band_pct must be > 0")
    if isinstance(run_or_t, EstimatorRun):
        t, err = run_or_t.t, run_or_t.soc_error
    else:
        t = run_or_t
    t = np.asarray(t, dtype=float)
    err = np.asarray(err, dtype=float)
    if t.size == 0:
        return None
    outside = np.flatnonzero(np.abs(err) * 100.0 > band_pct)
    k = 0 if outside.size == 0 else int(outside[-1]) + 1
    if k >= t.size or t[-1] - t[k] < hold_s:
        return None
    return float(t[k] - t[0])


class _Context:
    """Inputs shared by every estimator of one scenario."""

    def __init__(self, s: Scenario):
        from . import fileio
        if s.loadfile is not None:
            self.loadfile = fileio.parse_loadfile(s.resolve(s.loadfile))
        else:
            self.loadfile = make_profile(s.profile, duration_s=s.duration_s, dt=s.dt)
        self.params = fileio.read_params(s.resolve(s.params)) if s.params else DEFAULT_CELL
        self.ocv = fileio.read_ocv(s.resolve(s.ocv)) if s.ocv else DEFAULT_OCV
        self.dts = self.loadfile.intervals(s.dt)
        self.gains = {}
        for name in s.estimators:
            if name == "srckf":
                continue
            if name in s.gains:
                g = fileio.read_gains(s.resolve(s.gains[name]))
                if g.variant != name:
                    raise ConfigurationError(f"gains file for {name} holds {g.variant} gains")
            else:
                g = default_gains(name, self.params, self.ocv, s.dt)
            try:
                verify_segments(g, self.params, self.ocv, g.design_dt or s.dt)
            except DesignError as exc:
                raise ConfigurationError(str(exc)) from None
            self.gains[name] = g


def _truth_source(s: Scenario, p: CellParams, duration: float):
    if s.perturbation is None:
        return p
    pert = s.perturbation
    tau = pert.tau_s if pert.tau_s is not None else duration / 5.0
    return perturb_parameter(p, pert.name, pert.relative_amp, pert.envelope, tau)


def run_estimator(name: str, gains: ObserverGains | None, p: CellParams, ocv: OcvCurve,
                    cur: np.ndarray, volt: np.ndarray, dts: np.ndarray, soc0: float):
    n = cur.size
    soc_hat = np.empty(n)
    v_hat = np.empty(n)
    e = np.empty(n)
    t0 = time.perf_counter()
    if name == "srckf":
        st = SrckfState.initial(soc0)
        for k in range(n):
            st, vh, inn, _ = srckf_step(st, p, ocv, float(cur[k]), float(volt[k]), float(dts[k]))
            soc_hat[k], v_hat[k], e[k] = st.soc, vh, inn
    else:
        st = ObserverState.initial(soc0)
        for k in range(n):
            st, vh, ek = observer_step(name, gains, p, ocv, st, float(cur[k]), float(volt[k]),
                                       float(dts[k]))
            soc_hat[k], v_hat[k], e[k] = min(max(st.x_hat.soc, 0.0), 1.0), vh, ek
    return soc_hat, v_hat, e, time.perf_counter() - t0


def _corrupt(s: Scenario, clean: Loadfile, antithetic: bool) -> Loadfile:
    out = clean
    noise = s.noise
    if noise.has_current:
        out = inject_current_bias(out, noise.bias_mean_a, noise.bias_sd_a, s.seed,
                                  antithetic=antithetic)
    if noise.has_voltage:
        tau = noise.damping_tau_s if noise.damping_tau_s is not None else clean.duration_s / 5.0
        # a separate stream so current and voltage noise are independent
        out = inject_voltage_noise(out, noise.voltage_mean_v, noise.voltage_sd_v, tau,
                                   s.seed + 1, antithetic=antithetic)
    return out


def run_scenario(s: Scenario, *, antithetic: bool = False, context: _Context | None = None
                 ) -> ScenarioResult:
    """Simulate truth once, corrupt the stream once, run every estimator on it."""
    ctx = context or _Context(s)
    lf, p, ocv = ctx.loadfile, ctx.params, ctx.ocv
    truth = simulate(_truth_source(s, p, lf.duration_s), ocv, s.soc_true0, lf, first_dt=s.dt)
    nominal_v = truth.voltage
    if s.perturbation is not None:
        nominal_v = simulate(p, ocv, s.soc_true0, lf, first_dt=s.dt).voltage
    model_v_rmse = compute_metrics(truth.voltage, nominal_v).rmse
    clean = lf.replace(voltage_v=truth.voltage)
    stream = _corrupt(s, clean, antithetic)
    soc_true = truth.soc
    runs = []
    for name in s.estimators:
        soc_hat, v_hat, e, wall = run_estimator(
            name, ctx.gains.get(name), p, ocv, stream.current_a, stream.voltage_v, ctx.dts,
            s.soc_est0)
        err_t = np.asarray(lf.time_s)
        runs.append(EstimatorRun(
            name=name, t=err_t, soc_true=soc_true, soc_hat=soc_hat,
            v_meas=stream.voltage_v, v_hat=v_hat, e=e,
            metrics=compute_metrics(100.0 * soc_true, 100.0 * soc_hat),
            voltage_metrics=compute_metrics(stream.voltage_v, v_hat),
            convergence_time_s=convergence_time(err_t, soc_hat - soc_true, s.band_pct, s.hold_s),
            wall_s=wall,
        ))
    return ScenarioResult(s, tuple(runs), stream, soc_true, truth.voltage, model_v_rmse)


# --------------------------------------------------------------------------- sweeps

SWEEP_FIELDS = {
    "bias_mean_a": "current_noise",
    "voltage_sd_v": "voltage_noise",
}


@dataclass(frozen=True)
class SweepPoint:
    level: float
    metrics: dict  # estimator -> Metrics pooled over all seeds


def _pooled(errors: list) -> Metrics:
    err = np.concatenate(errors)
    return compute_metrics(np.zeros_like(err), err)


def noise_sweep(s: Scenario, field_name: str, levels: Sequence[float], n_seeds: int = 2,
                antithetic: bool = True) -> list:
    """Run ``s`` at every noise level and pool SOC errors over seeds.

    Seeds are ``s.seed, s.seed + 2, ...``; with ``antithetic`` every seed also
    runs with its mirrored noise, which cancels the offset-noise cross term
    that would otherwise dominate a single realization at low noise.
    """
    if field_name not in SWEEP_FIELDS:
        raise DomainError(f"sweep field must be one of {sorted(SWEEP_FIELDS)}")
    if n_seeds < 1:
        raise DomainError("n_seeds must be >= 1")
    if s.seed is None:
        raise DomainError("a seed is required for noise sweeps")
    ctx = _Context(s)
    out = []
    for level in levels:
        sl = s.replace(noise=replace(s.noise, **{field_name: float(level)}))
        errors = {name: [] for name in s.estimators}
        for j in range(n_seeds):
            for mirror in ((False, True) if antithetic else (False,)):
                res = run_scenario(sl.replace(seed=s.seed + 2 * j), antithetic=mirror, context=ctx)
                for r in res.runs:
                    errors[r.name].append(100.0 * r.soc_error)
        out.append(SweepPoint(float(level), {k: _pooled(v) for k, v in errors.items()}))
    return out


def sensitivity_sweep(s: Scenario, names: Sequence[str] = PERTURBABLE,
                      amps: Sequence[float] = (0.8, -0.8)) -> list:
    """One run per (parameter, amplitude); rows carry model voltage RMSE and
    per-estimator SOC RMSE degradation over the unperturbed run."""
    ctx = _Context(s)
    base = run_scenario(s.replace(perturbation=None), context=ctx)
    base_rmse = {r.name: r.metrics.rmse for r in base.runs}
    rows = []
    for name in names:
        for amp in amps:
            pert = Perturbation(name, amp, s.perturbation.envelope if s.perturbation else "step",
                                s.perturbation.tau_s if s.perturbation else None)
            res = run_scenario(s.replace(perturbation=pert), context=ctx)
            rows.append({
                "parameter": name, "relative_amp": amp,
                "model_voltage_rmse_v": res.model_voltage_rmse_v,
                "soc_rmse_increase_pct": {r.name: r.metrics.rmse - base_rmse[r.name] for r in res.runs},
            })
    return rows


# --------------------------------------------------------------------------- timing

@dataclass(frozen=True)
class TimingEntry:
    estimator: str
    mean_s: float
    sd_s: float
    steps: int
    samples: tuple

    @property
    def per_step_s(self) -> float:
        return self.mean_s / self.steps if self.steps else 0.0

    def to_dict(self) -> dict:
        return {"estimator": self.estimator, "mean_s": self.mean_s, "sd_s": self.sd_s,
                "steps": self.steps, "per_step_s": self.per_step_s}


def timing_report(s: Scenario, repetitions: int = 10) -> list:
    """Wall-clock per estimator over identical repeated runs."""
    if repetitions < 1:
        raise DomainError("repetitions must be >= 1")
    ctx = _Context(s)
    lf = ctx.loadfile
    truth = simulate(ctx.params, ctx.ocv, s.soc_true0, lf, first_dt=s.dt)
    stream = _corrupt(s, lf.replace(voltage_v=truth.voltage), False)
    out = []
    for name in s.estimators:
        args = (name, ctx.gains.get(name), ctx.params, ctx.ocv, stream.current_a,
                stream.voltage_v, ctx.dts, s.soc_est0)
        run_estimator(*args)  # untimed warm-up
        samples = []
        gc_was_on = gc.isenabled()
        gc.disable()  # as timeit does: keep collector pauses out of the samples
        try:
            for _ in range(repetitions):
                samples.append(run_estimator(*args)[-1])
        finally:
            if gc_was_on:
                gc.enable()
        sd = statistics.stdev(samples) if len(samples) > 1 else 0.0
        out.append(TimingEntry(name, statistics.fmean(samples), sd, len(lf), tuple(samples)))
    return out
