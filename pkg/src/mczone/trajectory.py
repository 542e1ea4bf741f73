"""Unconstrained optimal reference trajectories for a single CAV.

All plans live in shifted time ``s = t - t0`` and are cubic in ``s``:

    u*(s) = a s + b
    v*(s) = a s^2 / 2 + b s + c
    x*(s) = a s^3 / 6 + b s^2 / 2 + c s

The horizon ``tm`` is the root of a cubic obtained by eliminating ``a`` and
``b`` from the boundary conditions and the stationarity condition
``beta - b/2 + a c = 0``.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

log = logging.getLogger(__name__)

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class NoPositiveRoot(ValueError):
    """The terminal-time cubic has no positive real root."""


class InvalidHorizon(ValueError):
    pass


class DegenerateDerivative(ArithmeticError):
    """d f / d tm vanished in the first-order terminal-time update."""


@dataclass(frozen=True)
class CostWeights:
    alpha: float
    u_abs_max: float

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")

    @property
    def beta(self) -> float:
        return self.alpha * self.u_abs_max ** 2 / (2.0 * (1.0 - self.alpha))

    @classmethod
    def from_bounds(cls, alpha: float, u_min: float, u_max: float) -> "CostWeights":
        return cls(alpha, max(abs(u_min), abs(u_max)))


@dataclass(frozen=True)
class TrajectoryPlan:
    a: float
    b: float
    c: float
    d: float
    t0: float
    tm: float
    v0: float
    vm: float
    L: float
    beta: float
    # zone position where the plan starts; plan positions are relative to it
    x0: float = 0.0

    @property
    def t_exit(self) -> float:
        return self.t0 + self.tm

    def residuals(self) -> Tuple[float, float, float, float, float]:
        """Residuals of the five shifted-time conditions, in order
        v(0)=v0, v(tm)=vm, x(0)=0, x(tm)=L, stationarity."""
        x_end, v_end, _ = _poly_eval(self.a, self.b, self.c, self.tm)
        return (self.c - self.v0, v_end - self.vm, self.d, x_end + self.d - self.L,
                self.beta - 0.5 * self.b + self.a * self.c)

    def min_speed(self) -> float:
        return _min_speed(self.a, self.b, self.c, self.tm)


def cubic_coefficients(v0: float, vm: float, L: float, beta: float) -> Tuple[float, float, float, float]:
    """Coefficients (highest degree first) of f(tm) = 0."""
    return (beta, 2.0 * v0 + vm, -3.0 * L + 6.0 * v0 * vm + 6.0 * v0 * v0, -12.0 * L * v0)


def terminal_time_residual(tm: float, v0: float, vm: float, L: float, beta: float) -> float:
    c3, c2, c1, c0 = cubic_coefficients(v0, vm, L, beta)
    return ((c3 * tm + c2) * tm + c1) * tm + c0


def _residual_scale(v0: float, L: float) -> float:
    return 12.0 * L * max(v0, 1.0)


def _poly_eval(a: float, b: float, c: float, s: float) -> Tuple[float, float, float]:
    u = a * s + b
    v = (0.5 * a * s + b) * s + c
    x = ((a * s / 6.0 + 0.5 * b) * s + c) * s
    return x, v, u


def _min_speed(a: float, b: float, c: float, tm: float) -> float:
    lo = min(c, _poly_eval(a, b, c, tm)[1])
    if a != 0.0:
        s = -b / a
        if 0.0 < s < tm:
            lo = min(lo, _poly_eval(a, b, c, s)[1])
    return lo


def _safe_newton(f, df, lo: float, hi: float, f_lo: float, tol: float = 1e-14, maxiter: int = 200) -> float:
    """Newton iteration kept inside a sign-changing bracket [lo, hi]."""
    # orient so that f(lo_) < 0 < f(hi_)
    if f_lo > 0.0:
        lo, hi = hi, lo
    x = 0.5 * (lo + hi)
    dx_old = abs(hi - lo)
    dx = dx_old
    fx, dfx = f(x), df(x)
    for _ in range(maxiter):
        out_of_bracket = ((x - hi) * dfx - fx) * ((x - lo) * dfx - fx) > 0.0
        if out_of_bracket or abs(2.0 * fx) > abs(dx_old * dfx):
            dx_old = dx
            dx = 0.5 * (hi - lo)
            x = lo + dx
        else:
            dx_old = dx
            dx = fx / dfx
            x -= dx
        if abs(dx) <= tol * max(1.0, abs(x)):
            break
        fx, dfx = f(x), df(x)
        if fx == 0.0:
            break
        if fx < 0.0:
            lo = x
        else:
            hi = x
    return x


def _polish(f, df, x: float, steps: int = 3) -> float:
    for _ in range(steps):
        d = df(x)
        if d == 0.0:
            break
        step = f(x) / d
        if not math.isfinite(step):
            break
        x_new = x - step
        if abs(f(x_new)) >= abs(f(x)):
            break
        x = x_new
    return x


def positive_real_roots(c3: float, c2: float, c1: float, c0: float) -> List[float]:
    """All positive real roots of c3 t^3 + c2 t^2 + c1 t + c0, ascending.

    The positive axis is split at the stationary points of the polynomial;
    every monotone piece with a sign change holds exactly one root, which is
    located by bracketed Newton.
    """
    if abs(c3) * 1e15 < abs(c2):
        # the cubic term cannot move a finite root; avoids overflow when bracketing
        c3 = 0.0
    if c3 == 0.0:
        if c2 == 0.0:
            if c1 == 0.0:
                return []
            t = -c0 / c1
            return [t] if t > 0.0 else []
        disc = c1 * c1 - 4.0 * c2 * c0
        if disc < 0.0:
            return []
        sq = math.sqrt(disc)
        q = -0.5 * (c1 + math.copysign(sq, c1))
        roots = []
        if q != 0.0:
            roots += [q / c2, c0 / q]
        else:
            roots += [0.0]
        return sorted({r for r in roots if r > 0.0})

    def f(t):
        return ((c3 * t + c2) * t + c1) * t + c0

    def df(t):
        return (3.0 * c3 * t + 2.0 * c2) * t + c1

    bound = 1.0 + max(abs(c2), abs(c1), abs(c0)) / abs(c3)
    # stationary points split the axis into monotone pieces
    crit = []
    disc = c2 * c2 - 3.0 * c3 * c1
    if disc >= 0.0:
        sq = math.sqrt(disc)
        for cp in ((-c2 - sq) / (3.0 * c3), (-c2 + sq) / (3.0 * c3)):
            if 0.0 < cp < bound:
                crit.append(cp)
    knots = [0.0] + sorted(crit) + [bound]
    scale = max(abs(c0), abs(c1), abs(c2), abs(c3), 1e-300)
    roots: List[float] = []
    for lo, hi in zip(knots[:-1], knots[1:]):
        f_lo, f_hi = f(lo), f(hi)
        if lo > 0.0 and abs(f_lo) <= 1e-13 * scale * max(1.0, lo ** 3):
            # touching root at a stationary point
            if not roots or abs(roots[-1] - lo) > 1e-9 * lo:
                roots.append(lo)
            continue
        if f_lo * f_hi < 0.0:
            r = _polish(f, df, _safe_newton(f, df, lo, hi, f_lo))
            roots.append(r)
        elif f_hi == 0.0 and hi < bound:
            roots.append(hi)
    return sorted(r for r in roots if r > 0.0)


def trajectory_params(v0: float, vm: float, L: float, tm: float) -> Tuple[float, float, float, float]:
    """Cubic coefficients (a, b, c, d) hitting (0, v0) and (L, vm) at horizon tm."""
    if not tm > 0.0:
        raise InvalidHorizon(f"horizon must be positive, got {tm}")
    dv = vm - v0
    dx = L - v0 * tm
    a = 6.0 / tm ** 2 * dv - 12.0 / tm ** 3 * dx
    b = -2.0 / tm * dv + 6.0 / tm ** 2 * dx
    return a, b, v0, 0.0


def _energy(a: float, b: float, tm: float) -> float:
    """Closed form of the integral of (a s + b)^2 / 2 over [0, tm]."""
    return a * a * tm ** 3 / 6.0 + a * b * tm * tm / 2.0 + b * b * tm / 2.0


def _root_cost(v0: float, vm: float, L: float, beta: float, tm: float) -> Tuple[float, float]:
    a, b, c, _ = trajectory_params(v0, vm, L, tm)
    return beta * tm + _energy(a, b, tm), _min_speed(a, b, c, tm)


def _check_inputs(v0, vm, L, beta):
    if v0 < 0.0 or vm < 0.0 or not L > 0.0 or beta < 0.0:
        raise ValueError(f"invalid boundary data v0={v0}, vm={vm}, L={L}, beta={beta}")


def solve_terminal_time(v0: float, vm: float, L: float, beta: float) -> float:
    _check_inputs(v0, vm, L, beta)
    roots = positive_real_roots(*cubic_coefficients(v0, vm, L, beta))
    if not roots:
        raise NoPositiveRoot(f"no positive terminal time for v0={v0}, vm={vm}, L={L}, beta={beta}")
    if len(roots) == 1:
        return roots[0]
    scored = [(_root_cost(v0, vm, L, beta, r), r) for r in roots]
    forward = [(cost, r) for (cost, vmin), r in scored if vmin >= 0.0]
    pool = forward or [(cost, r) for (cost, _), r in scored]
    return min(pool)[1]


def plan_unconstrained(v0: float, vm: float, L: float, beta: float, t0: float = 0.0,
                       x0: float = 0.0) -> TrajectoryPlan:
    tm = solve_terminal_time(v0, vm, L, beta)
    return plan_with_horizon(v0, vm, L, beta, tm, t0, x0)


def plan_with_horizon(v0, vm, L, beta, tm, t0=0.0, x0=0.0) -> TrajectoryPlan:
    a, b, c, d = trajectory_params(v0, vm, L, tm)
    plan = TrajectoryPlan(a, b, c, d, t0, tm, v0, vm, L, beta, x0)
    if _min_speed(a, b, c, tm) < 0.0:
        log.debug("reference with negative speed: v0=%.3f vm=%.3f L=%.3f tm=%.3f", v0, vm, L, tm)
    return plan


def eval_plan(plan: TrajectoryPlan, t: float) -> Tuple[float, float, float]:
    """(x*, v*, u*) at absolute time t, clamped to the plan horizon."""
    s = min(max(t - plan.t0, 0.0), plan.tm)
    return _poly_eval(plan.a, plan.b, plan.c, s)


def unconstrained_cost(v0: float, vm: float, L: float, beta: float) -> float:
    tm = solve_terminal_time(v0, vm, L, beta)
    return _root_cost(v0, vm, L, beta, tm)[0]


def plan_cost(plan: TrajectoryPlan) -> float:
    return plan.beta * plan.tm + _energy(plan.a, plan.b, plan.tm)


def perturb_terminal_time(tm: float, v0: float, vm: float, dv: float, L: float, beta: float) -> float:
    """First-order update of the horizon when the terminal speed moves by dv."""
    vm_new = vm + dv
    denom = 3.0 * beta * tm * tm + (4.0 * v0 + 2.0 * vm_new) * tm - 3.0 * L + 6.0 * v0 * vm_new + 6.0 * v0 * v0
    if abs(denom) < 1e-12:
        raise DegenerateDerivative(f"df/dtm = {denom:.3e} at tm={tm}")
    return tm - (tm * tm + 6.0 * v0 * tm) / denom * dv


def replan_on_vm_change(v: float, x: float, t: float, old_plan: TrajectoryPlan, vm_new: float,
                        L: float, threshold: float = 1.0,
                        stats: Optional[Counter] = None) -> TrajectoryPlan:
    """New reference from the current state (t, x, v) towards terminal speed vm_new.

    Small changes reuse the remaining horizon of ``old_plan`` through the
    first-order update; larger ones (or an old horizon inconsistent with the
    current state) re-solve the cubic.
    """
    L_rem = L - x
    if not L_rem > 0.0:
        raise ValueError(f"vehicle already past the merging point (x={x}, L={L})")
    beta = old_plan.beta
    dv = vm_new - old_plan.vm
    tm_rem = old_plan.t_exit - t
    if abs(dv) <= threshold and tm_rem > 0.0:
        scale = _residual_scale(v, L_rem)
        if abs(terminal_time_residual(tm_rem, v, old_plan.vm, L_rem, beta)) <= 1e-3 * scale:
            try:
                tm_new = perturb_terminal_time(tm_rem, v, old_plan.vm, dv, L_rem, beta)
            except DegenerateDerivative:
                tm_new = -1.0
            if tm_new > 0.0:
                if stats is not None:
                    stats["perturbed"] += 1
                return plan_with_horizon(v, vm_new, L_rem, beta, tm_new, t, x)
    if stats is not None:
        stats["exact"] += 1
    return plan_unconstrained(v, vm_new, L_rem, beta, t, x)


def reanchor(plan: TrajectoryPlan, t0: float) -> TrajectoryPlan:
    return replace(plan, t0=t0)


def _grid_costs(v0: float, L: float, beta: float, vms: np.ndarray) -> np.ndarray:
    """Vectorised cost of every terminal speed in ``vms`` (companion eigenvalues)."""
    n = vms.size
    c2 = 2.0 * v0 + vms
    c1 = -3.0 * L + 6.0 * v0 * vms + 6.0 * v0 * v0
    c0 = np.full(n, -12.0 * L * v0)
    if beta * 1e15 >= np.abs(c2).max():
        comp = np.zeros((n, 3, 3))
        comp[:, 0, 0] = -c2 / beta
        comp[:, 0, 1] = -c1 / beta
        comp[:, 0, 2] = -c0 / beta
        comp[:, 1, 0] = 1.0
        comp[:, 2, 1] = 1.0
        roots = np.linalg.eigvals(comp)
    else:
        disc = np.sqrt(np.maximum(c1 * c1 - 4.0 * c2 * c0, 0.0) + 0j)
        with np.errstate(divide="ignore", invalid="ignore"):
            roots = np.stack([(-c1 + disc) / (2 * c2), (-c1 - disc) / (2 * c2)], axis=1)
    real = np.abs(roots.imag) <= 1e-7 * np.maximum(1.0, np.abs(roots.real))
    tm = np.where(real & (roots.real > 0.0), roots.real, np.nan)
    v = vms[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        a = 6.0 / tm ** 2 * (v - v0) - 12.0 / tm ** 3 * (L - v0 * tm)
        b = -2.0 / tm * (v - v0) + 6.0 / tm ** 2 * (L - v0 * tm)
        cost = beta * tm + a * a * tm ** 3 / 6.0 + a * b * tm * tm / 2.0 + b * b * tm / 2.0
        s_star = -b / a
        v_mid = np.where((s_star > 0) & (s_star < tm), 0.5 * a * s_star ** 2 + b * s_star + v0, np.inf)
    vmin = np.minimum(np.minimum(v0, v), v_mid)
    ok = np.isfinite(cost)
    fwd_cost = np.where(ok & (vmin >= -1e-12), cost, np.inf)
    any_cost = np.where(ok, cost, np.inf)
    best_fwd = fwd_cost.min(axis=1)
    return np.where(np.isfinite(best_fwd), best_fwd, any_cost.min(axis=1))


def optimal_terminal_velocity(v0: float, L: float, beta: float, vmin: float, vmax: float,
                              grid_step: float = 0.01, tol: float = 1e-3) -> float:
    """Terminal speed in [vmin, vmax] minimising the unconstrained cost.

    A grid scan picks the basin, then golden-section search refines it.
    """
    if not vmin < vmax:
        raise ValueError("need vmin < vmax")
    n = int(math.floor((vmax - vmin) / grid_step + 1e-9)) + 1
    grid = vmin + grid_step * np.arange(n)
    if grid[-1] < vmax:
        grid = np.append(grid, vmax)
    costs = _grid_costs(v0, L, beta, grid)
    k = int(np.argmin(costs))
    lo = float(grid[max(k - 1, 0)])
    hi = float(grid[min(k + 1, grid.size - 1)])

    def J(vm):
        try:
            return unconstrained_cost(v0, vm, L, beta)
        except NoPositiveRoot:
            return math.inf

    x1 = hi - _GOLDEN * (hi - lo)
    x2 = lo + _GOLDEN * (hi - lo)
    f1, f2 = J(x1), J(x2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - _GOLDEN * (hi - lo)
            f1 = J(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + _GOLDEN * (hi - lo)
            f2 = J(x2)
    best = 0.5 * (lo + hi)
    # endpoints of the admissible range can win outright
    candidates = [(J(best), best), (float(costs[k]), float(grid[k]))]
    return min(candidates)[1]
