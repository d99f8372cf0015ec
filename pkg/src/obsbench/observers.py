"""Luenberger, sliding-mode, PI and PID SOC observers.

Each observer predicts the state with the same zero-order-hold model the
simulator uses, compares the predicted terminal voltage with the measured one
and adds its correction law (integrated over the step) to the prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from numpy.polynomial import polynomial as P

from .errors import DesignError, DomainError, FormatError, InputError
from .model import CellParams, OcvCurve, StateVector, discrete_matrices, linear_system_at_slope
from .observability import numeric_rank, observability_matrix

VARIANTS = ("luenberger", "sliding_mode", "pi", "pid")
DEFAULT_PHI = 0.010

_ZERO3 = (0.0, 0.0, 0.0)


def _vec3(v) -> tuple:
    t = tuple(float(x) for x in v)
    if len(t) != 3:
        raise FormatError(f"expected a 3-vector, got {len(t)} entries")
    return t


@dataclass(frozen=True)
class ObserverGains:
    """Gain set for one observer variant.

    Only the fields of the active variant are read.  ``switch_dir`` is the
    state direction the sliding-mode switching term ``k_dc*sat(e/phi)`` acts
    along (SOC only by default).
    """

    variant: str
    l: tuple = _ZERO3
    h: tuple = _ZERO3
    k_dc: float = 0.0
    switch_dir: tuple = (0.0, 0.0, 1.0)
    boundary_layer_phi: float = DEFAULT_PHI
    k_p: tuple = _ZERO3
    k_i1: float = 1.0
    k_i2: tuple = _ZERO3
    k_d: tuple = _ZERO3
    d_filter_tau: float = 0.0
    design_slope: float | None = None
    design_dt: float | None = None
    poles: tuple = ()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown observer variant {self.variant!r}")
        for name in ("l", "h", "switch_dir", "k_p", "k_i2", "k_d"):
            object.__setattr__(self, name, _vec3(getattr(self, name)))
        if self.k_dc < 0:
            raise DomainError("k_dc must be >= 0")
        if not self.boundary_layer_phi > 0:
            raise DomainError("boundary_layer_phi must be > 0")
        if self.d_filter_tau < 0:
            raise DomainError("d_filter_tau must be >= 0")
        object.__setattr__(self, "poles", tuple(complex(z) for z in self.poles))

    def replace(self, **changes) -> "ObserverGains":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {"variant": self.variant}
        if self.variant == "luenberger":
            out["l"] = list(self.l)
        elif self.variant == "sliding_mode":
            out.update(h=list(self.h), k_dc=self.k_dc, switch_dir=list(self.switch_dir),
                       boundary_layer_phi=self.boundary_layer_phi)
        else:
            out.update(k_p=list(self.k_p), k_i1=self.k_i1, k_i2=list(self.k_i2))
            if self.variant == "pid":
                out.update(k_d=list(self.k_d), d_filter_tau=self.d_filter_tau)
        if self.design_slope is not None:
            out["design_slope"] = self.design_slope
        if self.design_dt is not None:
            out["design_dt"] = self.design_dt
        if self.poles:
            out["poles"] = [[z.real, z.imag] for z in self.poles]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ObserverGains":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise FormatError(f"unknown gains fields: {sorted(unknown)}")
        kw = dict(data)
        if "poles" in kw:
            kw["poles"] = tuple(complex(*z) if isinstance(z, (list, tuple)) else complex(z)
                                for z in kw["poles"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise FormatError(f"bad gains document: {exc}") from None


@dataclass(frozen=True)
class ObserverState:
    x_hat: StateVector
    c_pi: float = 0.0
    e_prev: float | None = None
    d_filtered: float = 0.0

    @classmethod
    def initial(cls, soc0: float, v_a: float = 0.0, v_b: float = 0.0) -> "ObserverState":
        return cls(StateVector(float(v_a), float(v_b), float(soc0)))

    def reset(self) -> "ObserverState":
        return ObserverState(self.x_hat)


class StepResult(NamedTuple):
    state: ObserverState
    v_hat: float
    e: float


def sat(e: float, phi: float) -> float:
    """Boundary-layer sign: ``clamp(e/phi, -1, 1)``."""
    if not phi > 0:
        raise DomainError(f"boundary layer phi must be > 0, got {phi!r}")
    r = e / phi
    return 1.0 if r > 1.0 else (-1.0 if r < -1.0 else r)


def observer_step(
    variant: str,
    gains: ObserverGains,
    p: CellParams,
    ocv: OcvCurve,
    state: ObserverState,
    i_amps: float,
    v_meas: float,
    dt: float,
    method: str = "zoh",
) -> StepResult:
    """Advance one observer by one sample.

    Predict with the model, form ``e = v_meas - v_hat`` from the predicted
    state, then add ``correction * dt``.  The PI integral is updated before
    the correction uses it.
    """
    if variant != gains.variant:
        raise DomainError(f"gains are for {gains.variant!r}, not {variant!r}")
    if not dt > 0:
        raise DomainError(f"dt must be > 0, got {dt!r}")
    if not (math.isfinite(v_meas) and math.isfinite(i_amps)):
        raise InputError("non-finite current or voltage measurement")
    (fa, fb, _), (ga, gb, gs) = discrete_matrices(p, dt, method)
    va, vb, s = state.x_hat
    va = fa * va + ga * i_amps
    vb = fb * vb + gb * i_amps
    s = s + gs * i_amps
    v_hat = ocv.eval_extended(s) + va + vb + i_amps * p.r_ohm
    e = v_meas - v_hat

    c_pi, e_prev, d_f = state.c_pi, state.e_prev, state.d_filtered
    if variant == "luenberger":
        k = gains.l
        corr = (k[0] * e, k[1] * e, k[2] * e)
    elif variant == "sliding_mode":
        k, u = gains.h, gains.k_dc * sat(e, gains.boundary_layer_phi)
        sd = gains.switch_dir
        corr = (k[0] * e + u * sd[0], k[1] * e + u * sd[1], k[2] * e + u * sd[2])
    else:
        c_pi = c_pi + gains.k_i1 * e * dt
        kp, ki = gains.k_p, gains.k_i2
        corr = (kp[0] * e + ki[0] * c_pi, kp[1] * e + ki[1] * c_pi, kp[2] * e + ki[2] * c_pi)
        if variant == "pid":
            raw = 0.0 if e_prev is None else (e - e_prev) / dt
            if gains.d_filter_tau > 0:
                alpha = 1.0 - math.exp(-dt / gains.d_filter_tau)
                d_f = d_f + alpha * (raw - d_f)
            else:
                d_f = raw
            kd = gains.k_d
            corr = (corr[0] + kd[0] * d_f, corr[1] + kd[1] * d_f, corr[2] + kd[2] * d_f)
        e_prev = e
    x_new = StateVector(va + corr[0] * dt, vb + corr[1] * dt, s + corr[2] * dt)
    return StepResult(ObserverState(x_new, c_pi, e_prev, d_f), v_hat, e)


def _check_variant(variant, gains):
    if variant not in VARIANTS:
        raise DomainError(f"unknown observer variant {variant!r}")
    if gains is not None and gains.variant != variant:
        raise DomainError(f"gains are for {gains.variant!r}, not {variant!r}")


def error_matrix(variant: str, gains: ObserverGains, p: CellParams, m: float,
                 dt: float | None = None) -> np.ndarray:
    """Continuous error-dynamics matrix: 3x3 for Luenberger/SMO, 4x4 (state
    error plus integral) for PI/PID.  The PID form folds ``K_d/dt`` into the
    proportional column, so ``dt`` is mandatory for it."""
    _check_variant(variant, gains)
    sys = linear_system_at_slope(p, m)
    a, c = sys.a, sys.c
    if variant in ("luenberger", "sliding_mode"):
        k = np.array(gains.l if variant == "luenberger" else gains.h)
        return a - np.outer(k, c)
    kp = np.array(gains.k_p)
    if variant == "pid":
        if dt is None or not dt > 0:
            raise DomainError("PID error matrix needs dt > 0")
        kp = kp + np.array(gains.k_d) / dt
    out = np.zeros((4, 4))
    out[:3, :3] = a - np.outer(kp, c)
    out[:3, 3] = gains.k_i2
    out[3, :3] = -gains.k_i1 * c
    return out


class HurwitzReport(NamedTuple):
    hurwitz: bool
    abscissa: float

    def __bool__(self):
        return self.hurwitz


def is_hurwitz(matrix) -> HurwitzReport:
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DomainError("is_hurwitz needs a square matrix")
    abscissa = float(np.max(np.linalg.eigvals(m).real))
    return HurwitzReport(abscissa < 0.0, abscissa)


# --- pole placement -------------------------------------------------------
#
# det(sI - A_e) is affine in the gains.  With A = diag(-a, -b, 0) and
# C = [1, 1, m], the matrix determinant lemma gives for Luenberger
#   s(s+a)(s+b) + L1 s(s+b) + L2 s(s+a) + L3 m(s+a)(s+b)
# and for PI (integral state appended)
#   s^2(s+a)(s+b) + s*[Kp terms] + Ki1*[Ki2 terms]
# with the same three basis polynomials.

def _basis(a: float, b: float, m: float):
    return (
        P.polyfromroots([0.0, -b]),
        P.polyfromroots([0.0, -a]),
        m * P.polyfromroots([-a, -b]),
    )


def _monic_from_poles(poles) -> np.ndarray:
    coeffs = P.polyfromroots(np.asarray(poles, dtype=complex))
    if np.max(np.abs(coeffs.imag)) > 1e-9 * max(1.0, np.max(np.abs(coeffs.real))):
        raise DomainError("poles must be closed under complex conjugation")
    return coeffs.real


def _pad(c, n):
    out = np.zeros(n)
    out[: len(c)] = c
    return out


# PI/PID unknown ordering: kp1 kp2 kp3 ki21 ki22 ki23.  The SOC channel gets
# no proportional gain, so voltage noise reaches SOC only through the error
# integral; the slow RC branch carries the remaining integral term.
PI_FREE = (0, 1, 4, 5)


def _solve_coeffs(columns, rhs, what: str) -> np.ndarray:
    mat = np.column_stack(columns)
    scale = np.linalg.norm(mat, axis=0)
    scale[scale == 0] = 1.0
    scaled = mat / scale
    if numeric_rank(scaled)[0] < scaled.shape[1] or np.linalg.cond(scaled) > 1e12:
        raise DesignError(f"{what}: spectrum not assignable (model unobservable at this slope)")
    return np.linalg.solve(scaled, rhs) / scale


def _validate_poles(poles, n: int):
    poles = [complex(z) for z in poles]
    if len(poles) != n:
        raise DomainError(f"need {n} poles, got {len(poles)}")
    if any(not (z.real < 0) for z in poles):
        raise DomainError("poles must have negative real parts")
    return poles


def place_poles(
    variant: str,
    p: CellParams,
    m: float,
    desired_poles: Sequence[complex],
    dt: float | None = None,
    *,
    ocv: OcvCurve | None = None,
    k_dc: float = 0.0,
    boundary_layer_phi: float = DEFAULT_PHI,
    d_ratio: float = 0.05,
    d_filter_tau: float = 0.0,
) -> ObserverGains:
    """Design gains so the error matrix has exactly ``desired_poles``.

    PI/PID fix ``k_i1 = 1`` and solve for ``K_p = (k1, k2, 0)`` and
    ``K_i2 = (0, k5, k6)``.  For PID the designed proportional column
    ``K_p + K_d/dt`` is split so that ``K_d/dt`` carries ``d_ratio`` of it.

    When ``ocv`` is given the Hurwitz property is re-checked at every segment
    slope and a ``DesignError`` lists the failing segments.
    """
    _check_variant(variant, None)
    n = 3 if variant in ("luenberger", "sliding_mode") else 4
    poles = _validate_poles(desired_poles, n)
    target = _monic_from_poles(poles)
    if not (math.isfinite(m) and m > 0):
        raise DomainError(f"design slope must be finite and > 0, got {m!r}")
    if variant == "pid" and (dt is None or not dt > 0):
        raise DomainError("PID design needs dt > 0")
    if not 0.0 <= d_ratio < 1.0:
        raise DomainError("d_ratio must lie in [0, 1)")

    sys = linear_system_at_slope(p, m)
    if numeric_rank(observability_matrix(sys))[0] < 3:
        raise DesignError("model is not observable with these parameters (tau_a == tau_b?)")

    a, b = 1.0 / p.tau_a, 1.0 / p.tau_b
    phis = _basis(a, b, m)
    if n == 3:
        base = P.polyfromroots([0.0, -a, -b])
        cols = [_pad(ph, 4)[:3] for ph in phis]
        k = _solve_coeffs(cols, (target - _pad(base, 4))[:3], variant)
        kw = {"l": tuple(k)} if variant == "luenberger" else {
            "h": tuple(k), "k_dc": k_dc, "boundary_layer_phi": boundary_layer_phi}
        gains = ObserverGains(variant, design_slope=m, poles=tuple(poles), **kw)
    else:
        base = P.polyfromroots([0.0, 0.0, -a, -b])
        all_cols = [_pad(P.polymulx(ph), 5)[:4] for ph in phis] + [_pad(ph, 5)[:4] for ph in phis]
        sol = np.zeros(6)
        sol[list(PI_FREE)] = _solve_coeffs([all_cols[j] for j in PI_FREE],
                                           (target - _pad(base, 5))[:4], variant)
        k_eff, k_i2 = sol[:3], sol[3:]
        if variant == "pi":
            gains = ObserverGains("pi", k_p=tuple(k_eff), k_i1=1.0, k_i2=tuple(k_i2),
                                  design_slope=m, poles=tuple(poles))
        else:
            gains = ObserverGains("pid", k_p=tuple(k_eff * (1.0 - d_ratio)), k_i1=1.0,
                                  k_i2=tuple(k_i2), k_d=tuple(k_eff * d_ratio * dt),
                                  d_filter_tau=d_filter_tau, design_slope=m, design_dt=dt,
                                  poles=tuple(poles))
    report = is_hurwitz(error_matrix(variant, gains, p, m, dt))
    if not report.hurwitz:
        raise DesignError(f"designed {variant} error matrix is not Hurwitz "
                          f"(abscissa {report.abscissa:.3g})")
    if ocv is not None:
        verify_segments(gains, p, ocv, dt)
    return gains


def segment_abscissae(gains: ObserverGains, p: CellParams, ocv: OcvCurve,
                      dt: float | None = None) -> list:
    dt = dt if dt is not None else gains.design_dt
    return [is_hurwitz(error_matrix(gains.variant, gains, p, float(m), dt)).abscissa
            for m in ocv.slopes]


def verify_segments(gains: ObserverGains, p: CellParams, ocv: OcvCurve,
                    dt: float | None = None) -> list:
    """Spectral abscissa at every OCV segment slope; raises if any is >= 0."""
    absc = segment_abscissae(gains, p, ocv, dt)
    bad = [i for i, x in enumerate(absc) if not x < 0]
    if bad:
        raise DesignError(f"{gains.variant} gains not Hurwitz on OCV segments {bad}")
    return absc


def discrete_error_matrix(gains: ObserverGains, p: CellParams, m: float, dt: float) -> np.ndarray:
    """One-step error recursion of the sampled observer as actually stepped.

    The state is ``[x_err (3), c_pi, e_prev]`` for every variant (unused
    entries stay decoupled), linearised at slope ``m`` and with the switching
    term of the SMO left out.
    """
    (fa, fb, _), _ = discrete_matrices(p, dt)
    phi = np.diag([fa, fb, 1.0])
    c = np.array([1.0, 1.0, m])
    # e_y = -c @ phi @ x_err
    ey = -c @ phi
    t = np.zeros((5, 5))
    v = gains.variant
    if v in ("luenberger", "sliding_mode"):
        k = np.array(gains.l if v == "luenberger" else gains.h)
        t[:3, :3] = phi + dt * np.outer(k, ey)
        return t
    kp, ki = np.array(gains.k_p), np.array(gains.k_i2)
    # c_pi' = c_pi + k_i1*dt*e_y
    t[3, :3] = gains.k_i1 * dt * ey
    t[3, 3] = 1.0
    t[:3, :3] = phi + dt * np.outer(kp, ey) + dt * np.outer(ki, t[3, :3])
    t[:3, 3] = dt * ki
    if v == "pid" and gains.d_filter_tau == 0:
        kd = np.array(gains.k_d)
        t[:3, :3] += np.outer(kd, ey)
        t[:3, 4] = -kd
        t[4, :3] = ey
    return t


def spectral_radius(m) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(m)))))


# Default designs for the bundled comparison.  RC observer poles are given as
# multiples of the open-loop rates (1/tau_a, 1/tau_b); SOC poles in 1/s.
PRESETS = {
    "luenberger": {"rc": (1.5, 1.5), "soc": (0.0028,)},
    "sliding_mode": {"rc": (1.5, 1.5), "soc": (0.0028,), "k_dc": 2e-5},
    "pi": {"rc": (1.5, 3.0), "soc": (0.004, 0.0044)},
    "pid": {"rc": (1.5, 1.5), "soc": (0.0051, 0.0056), "d_ratio": 0.05},
}


def preset_poles(variant: str, p: CellParams) -> list:
    _check_variant(variant, None)
    cfg = PRESETS[variant]
    ka, kb = cfg["rc"]
    return [-ka / p.tau_a, -kb / p.tau_b] + [-w for w in cfg["soc"]]


def default_gains(variant: str, p: CellParams, ocv: OcvCurve, dt: float = 1.0) -> ObserverGains:
    """Preset design at the curve's mean slope, verified on every segment."""
    cfg = PRESETS.get(variant, {})
    return place_poles(
        variant, p, ocv.mean_slope, preset_poles(variant, p),
        dt=dt if variant == "pid" else None, ocv=ocv,
        k_dc=cfg.get("k_dc", 0.0), d_ratio=cfg.get("d_ratio", 0.05),
    )
