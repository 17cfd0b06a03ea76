"""Damped second-order pose optimization with the first pose held fixed."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg

from .ba_problem import BAProblem, assemble, rounding_scale, total_cost
from .core_geom import boxplus_all
from .errors import NumericalFailure, SolverStalled


class Termination(str, Enum):
    STEP_TOL = "StepTol"
    MAX_ITERS = "MaxIters"


@dataclass(frozen=True)
class SolverOptions:
    mu0: float = 0.01
    nu0: float = 2.0
    max_iters: int = 50
    step_tol_rot: float = 1e-6
    step_tol_trans: float = 1e-6
    threads: int | None = None

    def __post_init__(self):
        for name in ("mu0", "nu0", "max_iters", "step_tol_rot", "step_tol_trans"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class SolveReport:
    iterations: int = 0
    cost_trace: list = field(default_factory=list)
    # (max rotation, max translation) of every accepted step
    step_trace: list = field(default_factory=list)
    final_cost: float = float("nan")
    termination: Termination = Termination.MAX_ITERS
    accepted: int = 0
    rejected: int = 0
    gap_drops: int = 0
    time_derivatives: float = 0.0
    time_linear_solve: float = 0.0
    time_cost: float = 0.0


# consecutive rejections with huge damping before giving up
STALL_REJECTIONS = 10
STALL_MU = 1e12


def gauge_reduce(J, H):
    """Drop the first pose's 6 rows/columns (its update is held at zero)."""
    return np.asarray(J)[6:], np.asarray(H)[6:, 6:]


def gauge_embed(dx):
    return np.concatenate([np.zeros(6), dx])


def solve_damped(H, J, mu):
    """Solve ``(H + mu I) x = -J``.  Returns ``None`` if the solve fails."""
    A = H + mu * np.eye(len(H))
    try:
        c = scipy.linalg.cho_factor(A, check_finite=False)
        return scipy.linalg.cho_solve(c, -J, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    try:
        x = scipy.linalg.solve(A, -J, assume_a="sym", check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        return None
    return x if np.all(np.isfinite(x)) else None


def step_size(dx):
    """Largest per-pose rotation and translation norms of a stacked step."""
    d = np.asarray(dx).reshape(-1, 6)
    return (float(np.linalg.norm(d[:, :3], axis=1).max()),
            float(np.linalg.norm(d[:, 3:], axis=1).max()))


def _step_small(dx, opts):
    rot, trans = step_size(dx)
    return rot < opts.step_tol_rot and trans < opts.step_tol_trans


def solve(problem: BAProblem, init_poses, opts: SolverOptions | None = None):
    """Optimize all poses but the first.  Returns ``(poses, SolveReport)``."""
    opts = opts or SolverOptions()
    poses = list(init_poses)
    if len(poses) != problem.num_poses:
        raise ValueError(f"expected {problem.num_poses} poses, got {len(poses)}")
    rep = SolveReport()
    if problem.num_poses <= 1 or not problem.features:
        rep.final_cost = total_cost(problem, poses)
        rep.cost_trace.append(rep.final_cost)
        rep.termination = Termination.STEP_TOL
        return poses, rep

    mu, nu = opts.mu0, opts.nu0
    eps = np.finfo(float).eps
    # cost changes below this are rounding noise of the eigenvalues
    floor = 1e3 * eps * rounding_scale(problem, poses)
    stalls = 0
    bundle = None
    for it in range(opts.max_iters):
        rep.iterations = it + 1
        if bundle is None:
            t0 = time.perf_counter()
            bundle = assemble(problem, poses, threads=opts.threads)
            rep.time_derivatives += time.perf_counter() - t0
            rep.gap_drops += bundle.gap_drops
            if not (np.isfinite(bundle.cost) and np.all(np.isfinite(bundle.J))
                    and np.all(np.isfinite(bundle.H))):
                raise NumericalFailure("non-finite cost or derivatives", it + 1)
            if not rep.cost_trace:
                rep.cost_trace.append(bundle.cost)
            Jr, Hr = gauge_reduce(bundle.J, bundle.H)
        c = bundle.cost

        t0 = time.perf_counter()
        dx = solve_damped(Hr, Jr, mu)
        rep.time_linear_solve += time.perf_counter() - t0
        accepted = False
        small = False
        if dx is not None:
            step = gauge_embed(dx)
            small = _step_small(step, opts)
            trial = boxplus_all(poses, step)
            trial[0] = poses[0]
            t0 = time.perf_counter()
            c_new = total_cost(problem, trial)
            rep.time_cost += time.perf_counter() - t0
            if not np.isfinite(c_new):
                raise NumericalFailure("non-finite trial cost", it + 1)
            pred = 0.5 * dx @ (mu * dx - Jr)
            rho = (c - c_new) / pred if pred > 0 else -np.inf
            accepted = rho > 0 and c_new < c
        if accepted:
            poses = trial
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = 2.0
            rep.accepted += 1
            rep.cost_trace.append(c_new)
            rep.step_trace.append(step_size(step))
            bundle = None
            stalls = 0
            if small:
                rep.termination = Termination.STEP_TOL
                break
        else:
            rep.rejected += 1
            # already at a minimum to rounding: nothing left to gain
            if small and dx is not None and pred <= max(floor, 1e3 * eps * abs(c)):
                rep.termination = Termination.STEP_TOL
                break
            mu *= nu
            nu *= 2.0
            stalls = stalls + 1 if mu > STALL_MU else 0
            if stalls >= STALL_REJECTIONS:
                rep.final_cost = c
                raise SolverStalled(
                    f"no acceptable step after {rep.rejected} rejections (mu={mu:.3g})",
                    poses, rep)
    else:
        rep.termination = Termination.MAX_ITERS
    rep.final_cost = rep.cost_trace[-1]
    return poses, rep


def effective_iterations(rep: SolveReport, opts: SolverOptions | None = None):
    """Accepted steps that moved some pose by at least the step tolerance.

    A terminating sub-tolerance step only certifies convergence, so it is
    not counted.
    """
    opts = opts or SolverOptions()
    return sum(1 for r, t in rep.step_trace
               if not (r < opts.step_tol_rot and t < opts.step_tol_trans))
