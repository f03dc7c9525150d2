"""Trajectory cost stack, parallel multi-seed optimizer, retiming, and metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .arm import ArmModel, Pose2, fk_pose, ik_solve, nonadjacent_point_pairs
from .geometry import SdfGrid, World, wrap_angle

DEFAULT_T = 32
TERM_NAMES = ("goal_pos", "goal_rot", "smooth", "self", "world")


@dataclass(frozen=True)
class CostWeights:
    w_goal_pos: float = 100.0
    w_goal_rot: float = 10.0
    w_smooth: float = 1.0
    w_self: float = 50.0
    w_world: float = 50.0
    d_act: float = 0.05   # world-cost activation distance (m)
    d_self: float = 0.03  # self-clearance threshold (m)

    def __post_init__(self):
        for name in ("w_goal_pos", "w_goal_rot", "w_smooth", "w_self", "w_world"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def as_array(self) -> np.ndarray:
        return np.array([self.w_goal_pos, self.w_goal_rot, self.w_smooth,
                         self.w_self, self.w_world])


@dataclass
class OptResult:
    trajectory: np.ndarray
    cost: float
    breakdown: Dict[str, float]
    iterations: int
    converged: bool
    n_accepted: int = 0


@dataclass
class TrajectoryMetrics:
    success: bool
    plan_time: float
    max_jerk: float
    motion_time: float
    translation_error: float
    angle_error_deg: float
    collision_free: bool


# ----------------------------------------------------------------------------
# Finite-difference operators over waypoints (unit spacing)
# ----------------------------------------------------------------------------

@lru_cache(maxsize=None)
def diff_matrix(n: int) -> np.ndarray:
    """First-derivative stencil matching numpy.gradient: central inside, one-sided at the ends."""
    d = np.zeros((n, n))
    for i in range(1, n - 1):
        d[i, i - 1] = -0.5
        d[i, i + 1] = 0.5
    d[0, 0], d[0, 1] = -1.0, 1.0
    d[-1, -2], d[-1, -1] = -1.0, 1.0
    return d


@lru_cache(maxsize=None)
def jerk_matrix(n: int) -> np.ndarray:
    """Third-derivative operator: the first-derivative stencil applied three times."""
    d = diff_matrix(n)
    return d @ d @ d


@lru_cache(maxsize=None)
def _jerk_quad(n: int) -> np.ndarray:
    j = jerk_matrix(n)
    return 2.0 * (j.T @ j)


def _kernel_args(arm: ArmModel, esdf: SdfGrid, goal: Pose2, w: CostWeights, t_len: int):
    pair_a, pair_b = nonadjacent_point_pairs(arm)
    return (
        arm.lengths, float(arm.base[0]), float(arm.base[1]), arm.point_fractions(),
        pair_a, pair_b,
        esdf.values, float(esdf.origin[0]), float(esdf.origin[1]), float(esdf.h),
        float(goal.pos[0]), float(goal.pos[1]), float(goal.theta),
        w.as_array(), float(w.d_act), float(w.d_self),
        jerk_matrix(t_len), _jerk_quad(t_len),
    )


# ----------------------------------------------------------------------------
# Cost evaluation
# ----------------------------------------------------------------------------

def evaluate_cost_batch(
    arm: ArmModel, esdf: SdfGrid, goal: Pose2, trajs: np.ndarray, w: CostWeights,
    want_grad: bool = True,
):
    """Total cost, per-term breakdown, and gradient for a stack of trajectories (S,T,D).

    Raises if any arm collision point leaves the ESDF extent.
    """
    trajs = np.asarray(trajs, dtype=np.float64)
    terms, totals, grads, clamped = _kernels.cost_terms_batch(
        trajs, *_kernel_args(arm, esdf, goal, w, trajs.shape[1]), want_grad)
    if np.any(clamped):
        raise ValueError("trajectory collision points leave the ESDF extent "
                         f"(seeds {np.nonzero(clamped)[0].tolist()})")
    return totals, grads, terms


def evaluate_cost(
    arm: ArmModel, esdf: SdfGrid, goal: Pose2, traj: np.ndarray, w: CostWeights,
) -> Tuple[float, np.ndarray]:
    """Cost and analytic gradient of one trajectory; row 0 gradient is zeroed."""
    totals, grads, _ = evaluate_cost_batch(arm, esdf, goal, np.asarray(traj)[None], w)
    return float(totals[0]), grads[0]


def cost_breakdown(arm, esdf, goal, traj, w: CostWeights) -> Dict[str, float]:
    _, _, terms = evaluate_cost_batch(arm, esdf, goal, np.asarray(traj)[None], w,
                                      want_grad=False)
    return dict(zip(TERM_NAMES, terms[0].tolist()))


# ----------------------------------------------------------------------------
# Multi-seed optimization
# ----------------------------------------------------------------------------

def optimize(
    arm: ArmModel,
    esdf: SdfGrid,
    goal: Pose2,
    seeds: Sequence[np.ndarray],
    n_iters: int,
    w: CostWeights,
    momentum: float = 0.9,
    armijo_c: float = 1e-4,
    shrink: float = 0.5,
    max_backtracks: int = 40,
) -> List[OptResult]:
    """Refine each seed independently for exactly n_iters momentum/backtracking steps.

    Seeds run in lockstep over a shared batched cost kernel; results are ordered
    like the input and deterministic for identical inputs.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    if len(seeds) == 0:
        raise ValueError("need at least one seed")
    stack = np.stack([np.asarray(s, dtype=np.float64) for s in seeds])
    # surfaces the out-of-extent error up front, same contract as evaluate_cost
    evaluate_cost_batch(arm, esdf, goal, stack, w, want_grad=False)
    trajs, terms, totals, frozen, n_acc = _kernels.optimize_batch(
        stack, n_iters, momentum, armijo_c, shrink, max_backtracks, 1.0, 4.0,
        *_kernel_args(arm, esdf, goal, w, stack.shape[1]))
    results = []
    for s in range(stack.shape[0]):
        results.append(OptResult(
            trajectory=trajs[s],
            cost=float(totals[s]),
            breakdown=dict(zip(TERM_NAMES, terms[s].tolist())),
            iterations=n_iters,
            converged=bool(frozen[s]),
            n_accepted=int(n_acc[s]),
        ))
    return results


# ----------------------------------------------------------------------------
# Seeding
# ----------------------------------------------------------------------------

def linear_seed(
    arm: ArmModel,
    q0: np.ndarray,
    goal: Pose2,
    rng: np.random.Generator,
    t_len: int = DEFAULT_T,
) -> np.ndarray:
    """Joint-space straight line from q0 toward an IK solution of the goal.

    IK starts from a randomized perturbation of q0, which keeps the solution on
    a nearby branch while still sampling distinct branches (elbow flips) across
    rng draws; if IK does not converge the interpolation still targets its
    final iterate (best effort).
    """
    q0 = np.asarray(q0, dtype=np.float64)
    ik_seed = np.clip(q0 + rng.uniform(-0.7, 0.7, size=arm.dof), arm.lo, arm.hi)
    q_goal, _ = ik_solve(arm, goal, ik_seed)
    alphas = np.linspace(0.0, 1.0, t_len)[:, None]
    return q0[None, :] + alphas * (q_goal - q0)[None, :]


# ----------------------------------------------------------------------------
# Retiming and metrics
# ----------------------------------------------------------------------------

def retime(arm: ArmModel, traj: np.ndarray) -> Tuple[float, np.ndarray]:
    """Uniformly scale waypoint spacing so velocity/acceleration/jerk limits hold.

    Returns (motion_time, per-waypoint timestamps). A constant trajectory needs
    zero time.
    """
    traj = np.asarray(traj, dtype=np.float64)
    t_len = traj.shape[0]
    d1 = diff_matrix(t_len)
    v = d1 @ traj
    a = d1 @ v
    j = d1 @ a
    vmax = np.max(np.abs(v), axis=0)
    amax = np.max(np.abs(a), axis=0)
    jmax = np.max(np.abs(j), axis=0)
    dt = max(
        float(np.max(vmax / arm.vel_limit)),
        float(np.sqrt(np.max(amax / arm.acc_limit))),
        float(np.cbrt(np.max(jmax / arm.jerk_limit))),
    )
    return dt * (t_len - 1), dt * np.arange(t_len)


def success_flag(collision_free: bool, translation_error: float, angle_error_deg: float,
                 delta_t: float, delta_r_deg: float) -> bool:
    """Success invariant: collision-free and both end-pose errors within threshold."""
    return bool(collision_free and translation_error <= delta_t
                and angle_error_deg <= delta_r_deg)


def metrics(
    arm: ArmModel,
    gt_world: World,
    goal: Pose2,
    traj: np.ndarray,
    plan_time: float = 0.0,
    delta_t: float = 0.005,
    delta_r_deg: float = 2.86,
    interp_per_seg: int = 4,
) -> TrajectoryMetrics:
    """Judge a trajectory against ground-truth geometry and the pose thresholds."""
    traj = np.asarray(traj, dtype=np.float64)
    clearance = _kernels.traj_min_clearance(
        traj, interp_per_seg, arm.lengths, float(arm.base[0]), float(arm.base[1]),
        arm.point_fractions(), gt_world.circle_arr, gt_world.box_arr, gt_world.sdf_cap)
    collision_free = bool(clearance > 0.0)
    end = fk_pose(arm, traj[-1])
    terr = float(np.hypot(*(end.pos - goal.pos)))
    aerr = float(np.degrees(abs(wrap_angle(end.theta - goal.theta))))
    motion_time, _ = retime(arm, traj)
    if motion_time > 0.0:
        dt = motion_time / (traj.shape[0] - 1)
        max_jerk = float(np.max(np.abs(jerk_matrix(traj.shape[0]) @ traj)) / dt ** 3)
    else:
        max_jerk = 0.0
    return TrajectoryMetrics(
        success=success_flag(collision_free, terr, aerr, delta_t, delta_r_deg),
        plan_time=plan_time,
        max_jerk=max_jerk,
        motion_time=motion_time,
        translation_error=terr,
        angle_error_deg=aerr,
        collision_free=collision_free,
    )
