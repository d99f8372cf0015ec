"""Rank-based observability checks for the linearised and nonlinear cell model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError
from .model import CellParams, LinearSystem, OcvCurve

RANK_EPS = 1e-10
SCENARIOS = ("input_nl", "state_nl", "measurement_nl")


@dataclass(frozen=True)
class RankReport:
    matrix_kind: str
    rank: int
    singular_values: tuple
    full_rank: bool
    state_dim: int = 3

    def to_dict(self) -> dict:
        return {
            "matrix_kind": self.matrix_kind,
            "rank": self.rank,
            "singular_values": list(self.singular_values),
            "full_rank": self.full_rank,
        }


def _equilibrate(m: np.ndarray) -> np.ndarray:
    out = np.array(m, dtype=float)
    for axis in (1, 0):
        norms = np.linalg.norm(out, axis=axis, keepdims=True)
        norms[norms == 0] = 1.0
        out = out / norms
    return out


def numeric_rank(m, eps: float = RANK_EPS):
    """Rank of ``m`` after row/column equilibration.

    Returns ``(rank, singular_values)`` where the singular values belong to
    the equilibrated matrix.  Equilibrating first makes the answer immune to
    the unit spread between capacitances and resistances.
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.size == 0:
        return 0, ()
    sv = np.linalg.svd(_equilibrate(m), compute_uv=False)
    if sv[0] == 0:
        return 0, tuple(float(s) for s in sv)
    tol = eps * sv[0] * max(m.shape)
    return int(np.sum(sv > tol)), tuple(float(s) for s in sv)


def rank_report(kind: str, m, state_dim: int = 3) -> RankReport:
    rank, sv = numeric_rank(m)
    return RankReport(kind, rank, sv, rank == state_dim, state_dim)


def controllability_matrix(sys: LinearSystem) -> np.ndarray:
    b = sys.b
    ab = sys.a @ b
    return np.column_stack([b, ab, sys.a @ ab])


def observability_matrix(sys: LinearSystem) -> np.ndarray:
    c = sys.c
    ca = c @ sys.a
    return np.vstack([c, ca, ca @ sys.a])


def ocv_derivatives(curve: OcvCurve, soc: float, order: int, degree: int = 5) -> list:
    """Derivatives ``[dV/ds, d2V/ds2, ..., d^order V/ds^order]`` at ``soc``.

    A piecewise-linear curve has no usable higher derivatives, so a
    least-squares polynomial of ``degree`` is fitted to its breakpoints.
    """
    if order < 1:
        raise DomainError("order must be >= 1")
    poly = np.polynomial.Polynomial.fit(curve.soc, curve.ocv, deg=min(degree, len(curve.soc) - 1))
    return [float(poly.deriv(j)(soc)) for j in range(1, order + 1)]


def lie_observability_matrix(
    scenario: str,
    p: CellParams,
    ocv_derivs: Sequence[float],
    q: Sequence[float] = (0.0, 0.0, 0.0),
    k: int = 2,
):
    """Gradient-of-Lie-derivative matrix for one nonlinear scenario.

    ``ocv_derivs[j]`` is the ``(j+1)``-th derivative of the OCV w.r.t. SOC and
    must reach order ``k``.  ``q`` is the nonlinearity influence vector
    ``(Q1, Q2, Q3)``.  Returns ``(matrix, RankReport)``.

    * ``input_nl``: rows ``dh, dL_f^1 h .. dL_f^k h, dL_g^{k-1} h`` with the
      input gain ``eta/C_t + Q3`` in the last row.
    * ``state_nl``: rows ``dh, dL_f^1 h .. dL_f^{k-1} h, dL_g^{k-1} h`` with
      the drift poles shifted by ``Q1, Q2`` and ``Q3`` coupling the SOC column.
    * ``measurement_nl``: as ``input_nl`` with ``Q = 0`` in the last row.
    """
    if scenario not in SCENARIOS:
        raise DomainError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    if k < 2:
        raise DomainError(f"Lie order k must be >= 2, got {k}")
    d = [float(v) for v in ocv_derivs]
    if len(d) < k:
        raise DomainError(f"need OCV derivatives up to order {k}, got {len(d)}")
    q1, q2, q3 = (float(v) for v in q)
    ra = -1.0 / p.tau_a
    rb = -1.0 / p.tau_b
    g3 = p.eta / p.capacity_c
    rows = [[1.0, 1.0, d[0]]]
    if scenario == "state_nl":
        fa, fb = ra + q1, rb + q2
        for j in range(1, k):
            rows.append([fa ** j, fb ** j, q3 ** j * d[j]])
        rows.append([0.0, 0.0, g3 ** (k - 1) * d[k - 1]])
    else:
        for j in range(1, k + 1):
            rows.append([ra ** j, rb ** j, 0.0])
        gain = g3 + q3 if scenario == "input_nl" else g3
        rows.append([0.0, 0.0, gain ** (k - 1) * d[k - 1]])
    m = np.array(rows)
    return m, rank_report(f"lie_{scenario.split('_')[0]}", m)
