"""End-to-end planners over partial observations.

The diffusion pipeline observes one depth scan, reconstructs an ESDF from the
scan alone, samples seed trajectories from the conditional model and refines
them with the multi-seed optimizer. The linear/graph baselines share the same
partially observed collision world and retry with fresh seed batches.
Ground-truth geometry never enters planning; it is only consulted afterwards
by the evaluation metrics.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .arm import ArmModel, Pose2, fk_pose, fk_points_batch
from .diffusion import DenoiserNet, NoiseSchedule, ddim_sample, encode_condition, guided_ddim_sample
from .geometry import (
    WORKSPACE,
    Circle,
    DepthScan,
    Rect,
    SdfGrid,
    World,
    sample_esdf_many,
    sdf_points,
    wrap_angle,
)
from .rrt import GraphPlanQuery, collision_free_ik, config_free, rrt_connect, shortcut_and_resample
from .trajopt import CostWeights, OptResult, evaluate_cost_batch, linear_seed, optimize


@dataclass
class PlanRequest:
    q_start: np.ndarray
    goal: Pose2
    scan: DepthScan
    n_trajs: int = 12
    n_iters: int = 50
    n_denoising: int = 5
    seed: int = 0
    bounds: Rect = WORKSPACE
    esdf_cell: float = 0.01
    delta_t: float = 0.005
    delta_r_deg: float = 2.86
    world: Optional[World] = None  # ground truth; evaluation only, planners never read it

    def __post_init__(self):
        if self.n_trajs < 1:
            raise ValueError("n_trajs must be >= 1")


@dataclass
class GuidanceParams:
    k_guide_frac: float = 0.6
    n_grad: int = 20
    alpha_guide: float = 1.0


@dataclass
class PlanResult:
    seeder: str
    best_index: int
    trajectory: np.ndarray
    results: List[OptResult]
    successes: List[bool]
    plan_time: float
    esdf_time: float
    attempts: int = 1
    seed_trajectories: Optional[np.ndarray] = None

    @property
    def best(self) -> OptResult:
        return self.results[self.best_index]

    def to_dict(self) -> dict:
        return {
            "seeder": self.seeder,
            "best_index": self.best_index,
            "attempts": self.attempts,
            "plan_time_s": self.plan_time,
            "esdf_time_s": self.esdf_time,
            "best_cost": self.best.cost,
            "cost_breakdown": self.best.breakdown,
            "planner_successes": [bool(s) for s in self.successes],
            "trajectory": self.trajectory.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# ----------------------------------------------------------------------------
# Scan-derived collision world
# ----------------------------------------------------------------------------

def reconstruct_world(bounds: Rect, scan: DepthScan, cell_size: float = 0.01,
                      inflate_cells: float = 1.5) -> World:
    """Obstacles implied by the scan: each hit point becomes a small disc.

    Unobserved space stays free. The world's nominal bounds are padded by the
    disc radius so boundary hits remain representable.
    """
    r = inflate_cells * cell_size
    hits = scan.hit_points()
    pad = Rect((bounds.lo[0] - r, bounds.lo[1] - r), (bounds.hi[0] + r, bounds.hi[1] + r))
    discs = [Circle(center=(float(x), float(y)), radius=r) for x, y in hits]
    return World(discs, bounds=pad)


def build_planner_esdf(bounds: Rect, scan: DepthScan, cell_size: float = 0.01,
                       inflate_cells: float = 1.5) -> SdfGrid:
    """ESDF from one scan over the same grid layout as the ground-truth ESDF."""
    world = reconstruct_world(bounds, scan, cell_size, inflate_cells)
    ext = bounds.extent
    nx = int(np.ceil(ext[0] / cell_size)) + 1
    ny = int(np.ceil(ext[1] / cell_size)) + 1
    origin = np.array(bounds.lo, dtype=np.float64)
    xs = origin[0] + cell_size * np.arange(nx)
    ys = origin[1] + cell_size * np.arange(ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([gx.ravel(), gy.ravel()])
    values = np.empty(nodes.shape[0])
    chunk = 8192  # nodes x hit-discs distance matrix; keep temporaries small
    for i in range(0, nodes.shape[0], chunk):
        values[i:i + chunk] = sdf_points(world, nodes[i:i + chunk])
    return SdfGrid(origin=origin, h=float(cell_size), nx=nx, ny=ny,
                   values=values.reshape(nx, ny))


# ----------------------------------------------------------------------------
# Planner-side success and selection
# ----------------------------------------------------------------------------

def planner_success(arm: ArmModel, esdf: SdfGrid, goal: Pose2, traj: np.ndarray,
                    delta_t: float = 0.005, delta_r_deg: float = 2.86,
                    interp_per_seg: int = 4) -> bool:
    """Success as far as the planner can tell from its partial ESDF."""
    traj = np.asarray(traj)
    t_len = traj.shape[0]
    fracs = np.arange(1, interp_per_seg + 1) / (interp_per_seg + 1)
    dense = [traj]
    for f in fracs:
        dense.append(traj[:-1] + f * (traj[1:] - traj[:-1]))
    configs = np.concatenate(dense, axis=0)
    pts = fk_points_batch(arm, configs).reshape(-1, 2)
    d, _, _ = sample_esdf_many(esdf, pts)
    if np.min(d) <= 0.0:
        return False
    end = fk_pose(arm, traj[-1])
    terr = float(np.hypot(*(end.pos - goal.pos)))
    aerr = float(np.degrees(abs(wrap_angle(end.theta - goal.theta))))
    return terr <= delta_t and aerr <= delta_r_deg


def select_best(results: Sequence[OptResult], successes: Sequence[bool]) -> int:
    """Lowest-cost success when any exists, else lowest cost; ties to lower index."""
    if len(results) == 0:
        raise ValueError("no results to select from")
    pool = [i for i, s in enumerate(successes) if s] or list(range(len(results)))
    return min(pool, key=lambda i: (results[i].cost, i))


# ----------------------------------------------------------------------------
# Planners
# ----------------------------------------------------------------------------

def plan_diffusion(
    arm: ArmModel,
    net: DenoiserNet,
    schedule: NoiseSchedule,
    req: PlanRequest,
    weights: CostWeights = CostWeights(),
    guidance: Optional[GuidanceParams] = None,
) -> PlanResult:
    """Sample n_trajs seeds from the conditional model, then optimize them all."""
    t0 = time.perf_counter()
    esdf = build_planner_esdf(req.bounds, req.scan, req.esdf_cell)
    esdf_time = time.perf_counter() - t0

    t1 = time.perf_counter()
    rng = np.random.default_rng(req.seed)
    cond = encode_condition(net, req.scan, req.q_start, req.goal)
    x_K = rng.standard_normal((req.n_trajs, net.config.t_len, net.config.dof))
    if guidance is not None and guidance.alpha_guide != 0.0:
        def cost_fn(trajs):
            totals, grads, _ = evaluate_cost_batch(arm, esdf, req.goal, trajs, weights)
            return totals, grads

        seeds, _ = guided_ddim_sample(
            net, schedule, cond, x_K, req.q_start, arm, cost_fn,
            n_steps=req.n_denoising, k_guide_frac=guidance.k_guide_frac,
            n_grad=guidance.n_grad, alpha_guide=guidance.alpha_guide)
    else:
        seeds = ddim_sample(net, schedule, cond, x_K, req.q_start, arm,
                            n_steps=req.n_denoising)
    results = optimize(arm, esdf, req.goal, list(seeds), req.n_iters, weights)
    successes = [planner_success(arm, esdf, req.goal, r.trajectory,
                                 req.delta_t, req.delta_r_deg) for r in results]
    best = select_best(results, successes)
    plan_time = time.perf_counter() - t1
    return PlanResult(seeder="diffusion", best_index=best,
                      trajectory=results[best].trajectory, results=results,
                      successes=successes, plan_time=plan_time, esdf_time=esdf_time,
                      seed_trajectories=seeds)


def _graph_seeds(arm: ArmModel, world: World, req: PlanRequest, rng: np.random.Generator,
                 t_len: int) -> Optional[List[np.ndarray]]:
    """Seed batch derived from one RRT-Connect solve; None if planning failed."""
    if not config_free(arm, world, req.q_start):
        return None
    q_goal = collision_free_ik(arm, world, req.goal, rng)
    if q_goal is None:
        return None
    query = GraphPlanQuery(q_start=req.q_start, q_goal=q_goal, world=world, arm=arm,
                           seed=int(rng.integers(0, 2**31)))
    path = rrt_connect(query)
    if path is None:
        return None
    return [shortcut_and_resample(path, t_len, arm, world, rng)
            for _ in range(req.n_trajs)]


def plan_baseline(
    arm: ArmModel,
    req: PlanRequest,
    weights: CostWeights = CostWeights(),
    seeder: str = "linear",
    n_atp: int = 1,
    t_len: int = 32,
) -> PlanResult:
    """Heuristic baseline with retry semantics: per attempt a fresh batch of
    n_trajs seeds is optimized; planning stops at the first attempt whose best
    candidate passes the planner-side success check."""
    if n_atp < 1:
        raise ValueError("n_atp must be >= 1")
    if seeder not in ("linear", "graph"):
        raise ValueError(f"unknown seeder {seeder!r}")
    t0 = time.perf_counter()
    esdf = build_planner_esdf(req.bounds, req.scan, req.esdf_cell)
    recon = reconstruct_world(req.bounds, req.scan, req.esdf_cell) if seeder == "graph" else None
    esdf_time = time.perf_counter() - t0

    plan_time = 0.0
    last: Optional[Tuple[List[OptResult], List[bool]]] = None
    attempts_used = 0
    for attempt in range(n_atp):
        t1 = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(req.seed, attempt)))
        seeds = None
        if seeder == "graph":
            seeds = _graph_seeds(arm, recon, req, rng, t_len)
        if seeds is None:  # linear seeder, or graph planner failure fallback
            seeds = [linear_seed(arm, req.q_start, req.goal, rng, t_len)
                     for _ in range(req.n_trajs)]
        results = optimize(arm, esdf, req.goal, seeds, req.n_iters, weights)
        successes = [planner_success(arm, esdf, req.goal, r.trajectory,
                                     req.delta_t, req.delta_r_deg) for r in results]
        plan_time += time.perf_counter() - t1
        last = (results, successes)
        attempts_used = attempt + 1
        if any(successes):
            break
    results, successes = last
    best = select_best(results, successes)
    return PlanResult(seeder=seeder, best_index=best,
                      trajectory=results[best].trajectory, results=results,
                      successes=successes, plan_time=plan_time, esdf_time=esdf_time,
                      attempts=attempts_used)
