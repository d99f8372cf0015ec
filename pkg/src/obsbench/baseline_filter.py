"""Square-root cubature Kalman filter baseline.

Third-degree spherical-radial rule with 2n cubature points.  The covariance
is carried as a lower-triangular square root and refreshed by QR
triangularization in both the time and the measurement update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import DomainError, InputError, NumericalError
from .model import CellParams, OcvCurve, discrete_matrices

N_STATE = 3
DEFAULT_Q = (1e-8, 1e-8, 1e-10)
DEFAULT_R = 1e-4
DEFAULT_P0 = (1e-6, 1e-6, 0.04)

_XI = math.sqrt(N_STATE) * np.hstack([np.eye(N_STATE), -np.eye(N_STATE)])
_W = 1.0 / math.sqrt(2 * N_STATE)


def tria(a: np.ndarray) -> np.ndarray:
    """Lower-triangular ``s`` with ``s @ s.T == a @ a.T`` and non-negative diagonal."""
    r = np.linalg.qr(a.T, mode="r")
    s = r.T[: a.shape[0], : a.shape[0]]
    signs = np.where(np.diag(s) < 0, -1.0, 1.0)
    return s * signs


def psd_sqrt(m) -> np.ndarray:
    """Lower-triangular square root of a symmetric PSD matrix (zeros allowed)."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh((m + m.T) / 2)
        if np.min(w) < -1e-12 * max(1.0, np.max(np.abs(w))):
            raise DomainError("covariance is not positive semidefinite") from None
        return tria(v * np.sqrt(np.clip(w, 0.0, None)))


@dataclass(frozen=True, eq=False)
class SrckfState:
    x_hat: np.ndarray
    s_sqrt: np.ndarray
    q_proc: np.ndarray
    r_meas: float
    s_q: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "x_hat", np.asarray(self.x_hat, dtype=float).reshape(N_STATE))
        object.__setattr__(self, "s_sqrt", np.asarray(self.s_sqrt, dtype=float).reshape(N_STATE, N_STATE))
        q = np.asarray(self.q_proc, dtype=float)
        if q.ndim == 1:
            q = np.diag(q)
        object.__setattr__(self, "q_proc", q)
        if not self.r_meas > 0:
            raise DomainError("r_meas must be > 0")
        if self.s_q is None:
            object.__setattr__(self, "s_q", psd_sqrt(q))

    @classmethod
    def initial(cls, soc0: float, p0=DEFAULT_P0, q_proc=DEFAULT_Q, r_meas=DEFAULT_R,
                v_a: float = 0.0, v_b: float = 0.0) -> "SrckfState":
        p0 = np.asarray(p0, dtype=float)
        s0 = psd_sqrt(np.diag(p0) if p0.ndim == 1 else p0)
        return cls(np.array([v_a, v_b, soc0]), s0, q_proc, float(r_meas))

    @property
    def covariance(self) -> np.ndarray:
        return self.s_sqrt @ self.s_sqrt.T

    @property
    def soc(self) -> float:
        return min(max(float(self.x_hat[2]), 0.0), 1.0)


class SrckfResult(NamedTuple):
    state: SrckfState
    v_hat: float
    innovation: float
    innovation_sd: float


def srckf_step(state: SrckfState, p: CellParams, ocv: OcvCurve, i_amps: float,
               v_meas: float, dt: float, method: str = "zoh") -> SrckfResult:
    """One predict/update cycle.  ``v_hat`` is the predicted measurement."""
    if not dt > 0:
        raise DomainError(f"dt must be > 0, got {dt!r}")
    if not (math.isfinite(v_meas) and math.isfinite(i_amps)):
        raise InputError("non-finite current or voltage measurement")
    (fa, fb, _), (ga, gb, gs) = discrete_matrices(p, dt, method)
    phi = np.array([fa, fb, 1.0])
    gamma = np.array([ga, gb, gs]) * i_amps

    # time update
    pts = state.x_hat[:, None] + state.s_sqrt @ _XI
    prop = phi[:, None] * pts + gamma[:, None]
    x_pred = prop.mean(axis=1)
    s_pred = tria(np.hstack([_W * (prop - x_pred[:, None]), state.s_q]))

    # measurement update
    pts = x_pred[:, None] + s_pred @ _XI
    z = np.array([ocv.eval_extended(s) for s in pts[2]]) + pts[0] + pts[1] + i_amps * p.r_ohm
    z_pred = z.mean()
    zc = _W * (z - z_pred)
    xc = _W * (pts - x_pred[:, None])
    s_r = math.sqrt(state.r_meas)
    s_zz = math.sqrt(float(zc @ zc) + state.r_meas)
    gain = (xc @ zc) / (s_zz * s_zz)
    innov = v_meas - z_pred
    x_new = x_pred + gain * innov
    s_new = tria(np.hstack([xc - np.outer(gain, zc), (gain * s_r)[:, None]]))
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(s_new))):
        raise NumericalError("SRCKF lost numerical validity")
    new = SrckfState(x_new, s_new, state.q_proc, state.r_meas, state.s_q)
    return SrckfResult(new, float(z_pred), float(innov), s_zz)
