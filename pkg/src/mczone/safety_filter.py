"""CBF/CLF constraint construction and the two-variable tracking QP.

Decision variables are the control ``u`` and the CLF relaxation ``e``.
Every constraint is affine in ``(u, e)``; the QP

    min  beta_e e^2 + (u - u_ref)^2 / 2
    s.t. constraints, u_min <= u <= u_max, e >= 0

is solved exactly by walking candidate active sets of size 0, 1 and 2 and
returning the first KKT point found.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import nnls

from .trajectory import TrajectoryPlan, eval_plan

GEQ = "GEQ"
LEQ = "LEQ"

FEAS_TOL = 1e-9


@dataclass(frozen=True)
class LinearConstraint:
    """``coef_u * u + coef_e * e  (>= | <=)  rhs``."""
    coef_u: float
    coef_e: float
    rhs: float
    sense: str = GEQ
    label: str = ""

    def __post_init__(self):
        if self.sense not in (GEQ, LEQ):
            raise ValueError(f"unknown sense {self.sense!r}")
        if self.coef_e not in (-1.0, 0.0, 1.0):
            raise ValueError("relaxation coefficient must be -1, 0 or +1")

    def as_leq(self) -> Tuple[float, float, float]:
        """(p, q, r) with p u + q e <= r."""
        if self.sense == LEQ:
            return self.coef_u, self.coef_e, self.rhs
        return -self.coef_u, -self.coef_e, -self.rhs

    def slack(self, u: float, e: float = 0.0) -> float:
        """Nonnegative iff satisfied."""
        p, q, r = self.as_leq()
        return r - p * u - q * e


@dataclass
class QpInstance:
    u_ref: float
    beta_e: float
    constraints: List[LinearConstraint]
    u_bounds: Tuple[float, float]
    e_lower: float = 0.0

    def __post_init__(self):
        if not self.beta_e > 0.0:
            raise ValueError("relaxation weight must be positive")
        if self.u_bounds[0] > self.u_bounds[1]:
            raise ValueError("empty control box")

    def objective(self, u: float, e: float) -> float:
        return self.beta_e * e * e + 0.5 * (u - self.u_ref) ** 2


@dataclass
class QpSolution:
    u: float
    e: float
    feasible: bool
    active_set: Tuple[int, ...] = ()
    objective: float = math.nan
    multipliers: Tuple[float, ...] = field(default=(), repr=False)


def _rows(qp: QpInstance) -> Optional[List[Tuple[float, float, float]]]:
    """All constraints as p u + q e <= r; None if a control-free row fails.

    Row order: user constraints, then u <= u_max, -u <= -u_min, -e <= -e_lower.
    """
    rows = []
    for c in qp.constraints:
        p, q, r = c.as_leq()
        rows.append((p, q, r))
    u_lo, u_hi = qp.u_bounds
    rows.append((1.0, 0.0, u_hi))
    rows.append((-1.0, 0.0, -u_lo))
    rows.append((0.0, -1.0, -qp.e_lower))
    for p, q, r in rows:
        if p == 0.0 and q == 0.0 and r < -FEAS_TOL * max(1.0, abs(r)):
            return None
    return rows


def _feasible(rows, u, e, skip=()) -> bool:
    for k, (p, q, r) in enumerate(rows):
        if k in skip:
            continue
        if p * u + q * e > r + FEAS_TOL * max(1.0, abs(r)):
            return False
    return True


def solve_qp(qp: QpInstance) -> QpSolution:
    rows = _rows(qp)
    n_user = len(qp.constraints)
    if rows is None:
        return QpSolution(math.nan, math.nan, False)
    ur, w = qp.u_ref, 2.0 * qp.beta_e  # Hessian diag (1, w)

    def done(u, e, active, lams):
        active_user = tuple(k for k in active if k < n_user)
        return QpSolution(u, e, True, active_user, qp.objective(u, e), lams)

    # empty active set
    e0 = 0.0
    if _feasible(rows, ur, e0):
        return done(ur, e0, (), ())
    usable = [k for k, (p, q, _) in enumerate(rows) if p != 0.0 or q != 0.0]
    # one active row: (u - ur) + lam p = 0, w e + lam q = 0
    for k in usable:
        p, q, r = rows[k]
        denom = p * p + q * q / w
        lam = (p * ur - r) / denom
        if lam < 0.0:
            continue
        u = ur - lam * p
        e = -lam * q / w
        if _feasible(rows, u, e, skip=(k,)):
            return done(u, e, (k,), (lam,))
    # two active rows: vertex, multipliers from stationarity
    for k1, k2 in combinations(usable, 2):
        p1, q1, r1 = rows[k1]
        p2, q2, r2 = rows[k2]
        det = p1 * q2 - p2 * q1
        if abs(det) <= 1e-12 * max(1.0, abs(p1 * q2), abs(p2 * q1)):
            continue
        u = (r1 * q2 - r2 * q1) / det
        e = (p1 * r2 - p2 * r1) / det
        # [p1 p2; q1 q2] [l1; l2] = -[u - ur; w e]
        g_u, g_e = -(u - ur), -w * e
        l1 = (g_u * q2 - p2 * g_e) / det
        l2 = (p1 * g_e - q1 * g_u) / det
        tol = 1e-12 * max(1.0, abs(l1), abs(l2))
        if l1 < -tol or l2 < -tol:
            continue
        if _feasible(rows, u, e, skip=(k1, k2)):
            return done(u, e, (k1, k2), (max(l1, 0.0), max(l2, 0.0)))
    return QpSolution(math.nan, math.nan, False)


def kkt_residual(qp: QpInstance, sol: QpSolution, active_tol: float = 1e-7) -> float:
    """Largest KKT violation of ``sol``: stationarity, primal and dual feasibility.

    Multipliers are re-fitted by nonnegative least squares on the nearly
    active rows, so the check does not trust the solver's own multipliers.
    """
    rows = _rows(qp)
    u, e = sol.u, sol.e
    grad = np.array([u - qp.u_ref, 2.0 * qp.beta_e * e])
    primal = max(0.0, max(p * u + q * e - r for p, q, r in rows))
    act = [(p, q) for p, q, r in rows if abs(p * u + q * e - r) <= active_tol * max(1.0, abs(r))
           and (p != 0.0 or q != 0.0)]
    if not act:
        return max(float(np.abs(grad).max()), primal)
    A = np.array(act).T  # columns are constraint normals
    lam, res = nnls(A, -grad)
    return max(res, primal)


# ---------------------------------------------------------------- builders

def rear_end_barrier(xi, vi, xp, phi, delta) -> float:
    return (xp - xi) - phi * vi - delta


def merge_barrier(xi, vi, x_im1, phi2, delta) -> float:
    return (x_im1 - xi) - phi2 * xi * vi - delta


def build_rear_end_cbf(xi, vi, xp, vp, k1, phi, delta, *, dt: Optional[float] = None,
                       u_lead_min: Optional[float] = None) -> LinearConstraint:
    """Rear-end CBF row.

    With ``dt`` and ``u_lead_min`` the row also carries the second-order term
    of the step, assuming the leader may brake at ``u_lead_min`` while the ego
    control is held: then b1 >= 0 at one sample implies b1 >= 0 at the next.
    """
    b1 = rear_end_barrier(xi, vi, xp, phi, delta)
    coef, const = -phi, vp - vi + k1 * b1
    if dt is not None:
        coef -= 0.5 * dt
        const += 0.5 * u_lead_min * dt
    return LinearConstraint(coef, 0.0, -const, GEQ, "rear_end")


def build_merge_cbf(xi, vi, x_im1, v_im1, k2, phi2, delta, *, dt: Optional[float] = None,
                    u_lead_min: Optional[float] = None, u_abs_max: Optional[float] = None) -> LinearConstraint:
    """Merge CBF row; ``dt`` adds the sampled-data terms as for the rear-end row.

    The exact one-step change of b2 has a u^2 dt^2 term, bounded here by
    ``u_abs_max`` so the row stays linear.
    """
    # at xi = 0 the control drops out and this is a pure feasibility check
    b2 = merge_barrier(xi, vi, x_im1, phi2, delta)
    coef, const = -phi2 * xi, v_im1 - vi - phi2 * vi * vi + k2 * b2
    if dt is not None:
        coef -= 0.5 * dt + 1.5 * phi2 * vi * dt
        const += 0.5 * u_lead_min * dt - 0.5 * phi2 * u_abs_max ** 2 * dt * dt
    return LinearConstraint(coef, 0.0, -const, GEQ, "merge")


def build_speed_cbfs(vi, k, v_min, v_max) -> List[LinearConstraint]:
    return [
        LinearConstraint(-1.0, 0.0, -k * (v_max - vi), GEQ, "v_max"),
        LinearConstraint(1.0, 0.0, -k * (vi - v_min), GEQ, "v_min"),
    ]


def build_clf(vi, v_ref, eps) -> LinearConstraint:
    dv = vi - v_ref
    return LinearConstraint(2.0 * dv, -1.0, -eps * dv * dv, LEQ, "clf")


def build_rear_end_guard(vi, vp, up, k1, phi, u_min) -> LinearConstraint:
    return LinearConstraint(-1.0, 0.0, -(up + k1 * (vp - vi - phi * u_min)), GEQ, "rear_end_guard")


def build_merge_guard(xi, vi, v_im1, u_im1, k2, phi2, u_min) -> LinearConstraint:
    coef = -(1.0 + 2.0 * phi2 * vi)
    const = u_im1 - phi2 * vi * u_min + k2 * (v_im1 - vi - phi2 * vi * vi - phi2 * xi * u_min)
    return LinearConstraint(coef, 0.0, -const, GEQ, "merge_guard")


@dataclass(frozen=True)
class Neighbor:
    """Snapshot of another CAV as seen from the ego lane's coordinates."""
    x: float
    v: float
    u_last: float


def build_feasibility_guards(vi, xi, ip: Optional[Neighbor], im1: Optional[Neighbor],
                             k1, k2, phi, phi2, u_min) -> List[LinearConstraint]:
    out = []
    if ip is not None:
        out.append(build_rear_end_guard(vi, ip.v, ip.u_last, k1, phi, u_min))
    if im1 is not None:
        out.append(build_merge_guard(xi, vi, im1.v, im1.u_last, k2, phi2, u_min))
    return out


def reference_state(plan: TrajectoryPlan, t: float, x: float,
                    hold: Optional[float] = None) -> Tuple[float, float, float]:
    """Position-feedback reference (t_ref, v_ref, u_ref) for a CAV at zone position x.

    With ``hold`` set, u_ref is the plan's mean acceleration over the next
    ``hold`` seconds, which is what a control held constant over a step needs
    to land on the reference speed.
    """
    x_star, v_star, _ = eval_plan(plan, t)
    if abs(v_star) < 0.1:
        t_ref = t
    else:
        t_ref = t - (x_star - (x - plan.x0)) / v_star
    t_ref = min(max(t_ref, plan.t0), plan.t_exit)
    _, v_ref, u_ref = eval_plan(plan, t_ref)
    if hold:
        u_ref = (eval_plan(plan, t_ref + hold)[1] - v_ref) / hold
    return t_ref, v_ref, u_ref


def barrier_values(xi, vi, ip: Optional[Neighbor], im1: Optional[Neighbor], phi, phi2, delta) -> List[float]:
    vals = []
    if ip is not None:
        vals.append(rear_end_barrier(xi, vi, ip.x, phi, delta))
    if im1 is not None:
        vals.append(merge_barrier(xi, vi, im1.x, phi2, delta))
    return vals


def build_constraints(xi, vi, v_ref, ip: Optional[Neighbor], im1: Optional[Neighbor], *,
                      phi, phi2, delta, k1, k2, k_v, v_min, v_max, eps, u_min,
                      guards: bool = True, dt: Optional[float] = None,
                      u_abs_max: Optional[float] = None) -> List[LinearConstraint]:
    """Full per-step constraint list for one CAV (``im1`` already None when redundant).

    Passing ``dt`` switches the rear-end and merge rows to their sampled-data form.
    """
    cons = []
    ua = abs(u_min) if u_abs_max is None else u_abs_max
    if ip is not None:
        cons.append(build_rear_end_cbf(xi, vi, ip.x, ip.v, k1, phi, delta, dt=dt, u_lead_min=u_min))
    if im1 is not None:
        cons.append(build_merge_cbf(xi, vi, im1.x, im1.v, k2, phi2, delta, dt=dt, u_lead_min=u_min,
                                    u_abs_max=ua))
    cons.extend(build_speed_cbfs(vi, k_v, v_min, v_max))
    cons.append(build_clf(vi, v_ref, eps))
    if guards:
        cons.extend(build_feasibility_guards(vi, xi, ip, im1, k1, k2, phi, phi2, u_min))
    return cons


def infeasible_fallback(vi, u_min, k_v, v_min) -> float:
    """Maximum braking, limited by the lower speed barrier."""
    return max(u_min, -k_v * (vi - v_min))


def solution_satisfies(qp: QpInstance, sol: QpSolution, tol: float = FEAS_TOL) -> bool:
    if not sol.feasible:
        return False
    lo, hi = qp.u_bounds
    if sol.u < lo - tol or sol.u > hi + tol or sol.e < qp.e_lower - tol:
        return False
    return all(c.slack(sol.u, sol.e) >= -tol * max(1.0, abs(c.rhs)) for c in qp.constraints)


def constraints_feasible(constraints: Sequence[LinearConstraint], u_bounds, beta_e: float = 1.0) -> bool:
    return solve_qp(QpInstance(0.0, beta_e, list(constraints), tuple(u_bounds))).feasible
