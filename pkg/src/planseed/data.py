"""Procedural scenes, problem sampling, expert trajectory generation, observation
rendering with goal-visibility filtering, and dataset serialization."""

from __future__ import annotations

import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .arm import ArmModel, Pose2
from .geometry import (
    WORKSPACE,
    Box,
    Circle,
    DepthScan,
    Rect,
    SdfGrid,
    SensorPose,
    World,
    build_esdf,
    goal_visible,
    render_depth_scan,
    sample_sensor_poses,
    sdf_point,
    world_from_dict,
    world_to_dict,
)
from .rrt import (
    GraphPlanQuery,
    collision_free_ik,
    config_free,
    rrt_connect,
    shortcut_and_resample,
)
from .trajopt import CostWeights, DEFAULT_T, linear_seed, metrics, optimize

SCENE_KINDS = ("cubby", "tabletop", "dresser")
DS_MAGIC = b"PSDS"


class DatasetFormatError(Exception):
    pass


@dataclass(frozen=True)
class PlanningProblem:
    world_id: str
    q_start: np.ndarray
    goal: Pose2


@dataclass
class ProblemRecord:
    problem: PlanningProblem
    world: World
    expert: np.ndarray          # (T, D) joint trajectory
    graph_used: bool
    scans: List[DepthScan]


# ----------------------------------------------------------------------------
# Scene generation
# ----------------------------------------------------------------------------

def _gen_cubby(rng: np.random.Generator) -> List:
    x0 = rng.uniform(0.32, 0.42)
    x1 = rng.uniform(0.78, 0.86)
    t = rng.uniform(0.025, 0.04)
    y_lo = rng.uniform(-0.75, -0.55)
    y_hi = rng.uniform(0.55, 0.75)
    n_rows = int(rng.integers(2, 5))
    ys = np.linspace(y_lo, y_hi, n_rows + 1)
    obstacles = [Box(lo=(x1, y_lo), hi=(x1 + t, y_hi))]
    for y in ys:
        obstacles.append(Box(lo=(x0, y - t / 2), hi=(x1, y + t / 2)))
    open_cells = 0
    for ca, cb in zip(ys[:-1], ys[1:]):
        cell_lo, cell_hi = ca + t / 2, cb - t / 2
        r = rng.random()
        if r < 0.15 and open_cells > 0:
            obstacles.append(Box(lo=(x0 - t, cell_lo), hi=(x0, cell_hi)))  # closed slot
        elif r < 0.55:
            # partial front lip narrows the slot entry
            frac = rng.uniform(0.3, 0.55)
            h = (cell_hi - cell_lo) * frac
            if rng.random() < 0.5:
                obstacles.append(Box(lo=(x0 - t, cell_lo), hi=(x0, cell_lo + h)))
            else:
                obstacles.append(Box(lo=(x0 - t, cell_hi - h), hi=(x0, cell_hi)))
            open_cells += 1
        else:
            open_cells += 1
    return obstacles


def _gen_tabletop(rng: np.random.Generator) -> List:
    y_top = rng.uniform(-0.42, -0.28)
    xa = rng.uniform(-0.25, -0.05)
    xb = rng.uniform(0.7, 0.88)
    obstacles = [Box(lo=(xa, y_top - 0.04), hi=(xb, y_top))]
    n_blocks = int(rng.integers(2, 7))
    placed = 0
    tries = 0
    while placed < n_blocks and tries < 60:
        tries += 1
        cx = rng.uniform(xa + 0.06, xb - 0.06)
        if rng.random() < 0.5:
            r = rng.uniform(0.03, 0.07)
            c = Circle(center=(cx, y_top + r), radius=r)
        else:
            w = rng.uniform(0.04, 0.1)
            h = rng.uniform(0.06, 0.22)
            c = Box(lo=(cx - w / 2, y_top), hi=(cx + w / 2, y_top + h))
        # keep the arm base region clear
        if sdf_point(World([c]), np.zeros(2)) < 0.12:
            continue
        obstacles.append(c)
        placed += 1
    return obstacles


def _gen_dresser(rng: np.random.Generator) -> List:
    x0 = rng.uniform(0.34, 0.44)
    x1 = rng.uniform(0.78, 0.86)
    t = rng.uniform(0.025, 0.04)
    y_lo = rng.uniform(-0.7, -0.5)
    y_hi = rng.uniform(0.5, 0.7)
    n_slabs = int(rng.integers(3, 6))
    ys = np.linspace(y_lo, y_hi, n_slabs)
    obstacles = [Box(lo=(x1, y_lo - t), hi=(x1 + t, y_hi + t))]
    for i, y in enumerate(ys):
        if 0 < i < n_slabs - 1 and rng.random() < 0.5:
            # slab with an opening
            g_w = rng.uniform(0.16, 0.28)
            g_c = rng.uniform(x0 + g_w / 2 + 0.02, x1 - g_w / 2 - 0.02)
            obstacles.append(Box(lo=(x0, y - t / 2), hi=(g_c - g_w / 2, y + t / 2)))
            obstacles.append(Box(lo=(g_c + g_w / 2, y - t / 2), hi=(x1, y + t / 2)))
        else:
            obstacles.append(Box(lo=(x0, y - t / 2), hi=(x1, y + t / 2)))
    return obstacles


_SCENE_BUILDERS = {"cubby": _gen_cubby, "tabletop": _gen_tabletop, "dresser": _gen_dresser}


def generate_scene(kind: str, rng: np.random.Generator, bounds: Rect = WORKSPACE,
                   base=np.zeros(2), max_retries: int = 50) -> World:
    """One procedurally generated world; regenerates until the arm base is clear."""
    if kind not in _SCENE_BUILDERS:
        raise ValueError(f"unknown scene kind {kind!r}; pick one of {SCENE_KINDS}")
    for _ in range(max_retries):
        world = World(_SCENE_BUILDERS[kind](rng), bounds=bounds)
        if sdf_point(world, base) > 0.08:
            return world
    raise RuntimeError(f"could not place a {kind} scene with a free base")


# ----------------------------------------------------------------------------
# Problem sampling
# ----------------------------------------------------------------------------



def sample_base_pair(world: World, arm: ArmModel, rng: np.random.Generator,
                     tries: int = 60) -> Optional[Tuple[Pose2, Pose2]]:
    """A start pose in open space and a goal pose biased into the cluttered region."""
    bbox = world.obstacle_bbox()
    goal = None
    for _ in range(tries):
        if rng.random() < 0.75:
            p = rng.uniform(bbox.lo, bbox.hi)
        else:
            ang = rng.uniform(-np.pi, np.pi)
            p = arm.base + rng.uniform(0.2, 0.92) * arm.reach * np.array([np.cos(ang), np.sin(ang)])
        d = np.hypot(*(p - arm.base))
        if d > arm.reach - 0.04 or d < 0.1:
            continue
        if sdf_point(world, p) < 0.03:
            continue
        theta = np.arctan2(p[1] - arm.base[1], p[0] - arm.base[0]) + rng.uniform(-0.6, 0.6)
        goal = Pose2(position=(float(p[0]), float(p[1])), theta=float(theta))
        break
    if goal is None:
        return None
    for _ in range(tries):
        ang = rng.uniform(-np.pi, np.pi)
        p = arm.base + rng.uniform(0.15, 0.9) * arm.reach * np.array([np.cos(ang), np.sin(ang)])
        if sdf_point(world, p) < 0.05 or not world.bounds.contains(p):
            continue
        theta = np.arctan2(p[1] - arm.base[1], p[0] - arm.base[0]) + rng.uniform(-0.8, 0.8)
        return Pose2(position=(float(p[0]), float(p[1])), theta=float(theta)), goal
    return None


def _perturb(pose: Pose2, rng: np.random.Generator, box: float = 0.3,
             rot: float = 0.3) -> Pose2:
    p = pose.pos + rng.uniform(-box / 2, box / 2, size=2)
    return Pose2(position=(float(p[0]), float(p[1])), theta=pose.theta + rng.uniform(-rot, rot))


def sample_problems(world: World, arm: ArmModel, base_start: Pose2, base_goal: Pose2,
                    n: int, rng: np.random.Generator, world_id: str = "w") -> List[PlanningProblem]:
    """Base pair, n-1 perturbed pairs, n near-goal pairs, and n free-space pairs,
    keeping only pairs where both poses admit collision-free IK."""
    if n < 1:
        raise ValueError("n must be >= 1")
    candidates: List[Tuple[Pose2, Pose2]] = [(base_start, base_goal)]
    for _ in range(n - 1):
        candidates.append((_perturb(base_start, rng), _perturb(base_goal, rng)))
    for _ in range(n):
        candidates.append((_perturb(base_goal, rng), _perturb(base_goal, rng)))
    region = _free_space_region(world, arm, rng)
    for _ in range(n):
        if region is None:
            break
        lo, hi = region
        pa = rng.uniform(lo, hi)
        pb = rng.uniform(lo, hi)
        ta, tb = rng.uniform(-np.pi, np.pi, size=2)
        candidates.append((
            Pose2(position=(float(pa[0]), float(pa[1])), theta=float(ta)),
            Pose2(position=(float(pb[0]), float(pb[1])), theta=float(tb)),
        ))
    problems = []
    for start_pose, goal_pose in candidates:
        q_start = collision_free_ik(arm, world, start_pose, rng)
        if q_start is None:
            continue
        if collision_free_ik(arm, world, goal_pose, rng) is None:
            continue
        problems.append(PlanningProblem(world_id=world_id, q_start=q_start, goal=goal_pose))
    return problems


def _free_space_region(world: World, arm: ArmModel, rng: np.random.Generator,
                       side: float = 0.6, tries: int = 40):
    """Random free-space square of the given side, inside reach."""
    for _ in range(tries):
        ang = rng.uniform(-np.pi, np.pi)
        c = arm.base + rng.uniform(0.15, 0.7) * arm.reach * np.array([np.cos(ang), np.sin(ang)])
        if sdf_point(world, c) < 0.05:
            continue
        lo = np.maximum(c - side / 2, np.array(world.bounds.lo) + 0.02)
        hi = np.minimum(c + side / 2, np.array(world.bounds.hi) - 0.02)
        return lo, hi
    return None


# ----------------------------------------------------------------------------
# Expert generation
# ----------------------------------------------------------------------------

def solve_expert(
    arm: ArmModel,
    world: World,
    problem: PlanningProblem,
    rng: np.random.Generator,
    esdf: Optional[SdfGrid] = None,
    weights: CostWeights = CostWeights(),
    n_seeds: int = 12,
    n_iters: int = 475,
    t_len: int = DEFAULT_T,
    delta_t: float = 0.005,
    delta_r_deg: float = 2.86,
    rrt_attempts: int = 3,
) -> Optional[Tuple[np.ndarray, bool]]:
    """Expert trajectory: optimized linear seeds first, RRT fallback second.

    Returns (trajectory, graph_used) or None when the problem should be discarded.
    """
    if esdf is None:
        esdf = build_esdf(world, 0.01)
    seeds = [linear_seed(arm, problem.q_start, problem.goal, rng, t_len)
             for _ in range(n_seeds)]
    results = optimize(arm, esdf, problem.goal, seeds, n_iters, weights)
    best = None
    for r in results:
        if metrics(arm, world, problem.goal, r.trajectory, delta_t=delta_t,
                   delta_r_deg=delta_r_deg).success:
            if best is None or r.cost < best.cost:
                best = r
    if best is not None:
        return best.trajectory, False

    for _ in range(rrt_attempts):
        q_goal = collision_free_ik(arm, world, problem.goal, rng)
        if q_goal is None:
            continue
        if not config_free(arm, world, problem.q_start):
            return None
        query = GraphPlanQuery(q_start=problem.q_start, q_goal=q_goal, world=world,
                               arm=arm, seed=int(rng.integers(0, 2**31)))
        path = rrt_connect(query)
        if path is None:
            continue
        raw = shortcut_and_resample(path, t_len, arm, world, rng)
        refined = optimize(arm, esdf, problem.goal, [raw], n_iters, weights)[0]
        if metrics(arm, world, problem.goal, refined.trajectory, delta_t=delta_t,
                   delta_r_deg=delta_r_deg).success:
            return refined.trajectory, True
        if metrics(arm, world, problem.goal, raw, delta_t=delta_t,
                   delta_r_deg=delta_r_deg).success:
            return raw, True
    return None


# ----------------------------------------------------------------------------
# Observations
# ----------------------------------------------------------------------------

def generate_observations(
    world: World,
    arm: ArmModel,
    problem: PlanningProblem,
    rng: np.random.Generator,
    n_poses: int = 12,
    max_keep: int = 4,
    n_rays: int = 256,
) -> List[DepthScan]:
    """Depth scans from sensors that can see the goal; at most max_keep survive."""
    center = world.scene_center
    base_dir = float(np.arctan2(arm.base[1] - center[1], arm.base[0] - center[0]))
    poses = sample_sensor_poses(
        world, rng, n_poses,
        angle_range=(base_dir - np.pi / 4, base_dir + np.pi / 4),
        n_rays=n_rays,
    )
    # a sensor buried inside an obstacle renders garbage; drop it before filtering
    visible = [p for p in poses
               if sdf_point(world, p.position) > 0 and goal_visible(world, p, problem.goal.pos)]
    if not visible:
        return []
    if len(visible) > max_keep:
        idx = rng.choice(len(visible), size=max_keep, replace=False)
        visible = [visible[i] for i in sorted(idx)]
    return [render_depth_scan(world, p) for p in visible]


# ----------------------------------------------------------------------------
# Dataset orchestration
# ----------------------------------------------------------------------------

@dataclass
class GenConfig:
    scenes_per_kind: int = 667
    kinds: Tuple[str, ...] = SCENE_KINDS
    pairs_per_scene: int = 2      # the N of the 3N sampling recipe
    t_len: int = DEFAULT_T
    esdf_cell: float = 0.01
    n_seeds: int = 12
    n_iters: int = 475
    delta_t: float = 0.005
    delta_r_deg: float = 2.86
    weights: CostWeights = field(default_factory=CostWeights)


def _scene_records(args) -> List[ProblemRecord]:
    cfg, arm, master_seed, scene_index, kind = args
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(master_seed, scene_index)))
    try:
        world = generate_scene(kind, rng, base=arm.base)
    except RuntimeError:
        return []
    world_id = f"{kind}-{scene_index:05d}"
    pair = sample_base_pair(world, arm, rng)
    if pair is None:
        return []
    esdf = build_esdf(world, cfg.esdf_cell)
    records = []
    for problem in sample_problems(world, arm, pair[0], pair[1], cfg.pairs_per_scene,
                                   rng, world_id=world_id):
        solved = solve_expert(arm, world, problem, rng, esdf=esdf, weights=cfg.weights,
                              n_seeds=cfg.n_seeds, n_iters=cfg.n_iters, t_len=cfg.t_len,
                              delta_t=cfg.delta_t, delta_r_deg=cfg.delta_r_deg)
        if solved is None:
            continue
        traj, graph_used = solved
        scans = generate_observations(world, arm, problem, rng)
        if not scans:
            continue
        records.append(ProblemRecord(problem=problem, world=world, expert=traj,
                                     graph_used=graph_used, scans=scans))
    return records


def generate_records(cfg: GenConfig, arm: ArmModel, master_seed: int,
                     n_workers: int = 1, progress_every: int = 0) -> List[ProblemRecord]:
    """All scene records; per-scene rng streams keyed by (master_seed, scene index)
    make the output independent of worker count and execution order."""
    tasks = []
    idx = 0
    for kind in cfg.kinds:
        for _ in range(cfg.scenes_per_kind):
            tasks.append((cfg, arm, master_seed, idx, kind))
            idx += 1
    records: List[ProblemRecord] = []
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            for i, recs in enumerate(pool.map(_scene_records, tasks, chunksize=4)):
                records.extend(recs)
                if progress_every and (i + 1) % progress_every == 0:
                    print(f"scenes {i + 1}/{len(tasks)}: {len(records)} records")
    else:
        for i, task in enumerate(tasks):
            records.extend(_scene_records(task))
            if progress_every and (i + 1) % progress_every == 0:
                print(f"scenes {i + 1}/{len(tasks)}: {len(records)} records")
    return records


# ----------------------------------------------------------------------------
# Serialization: JSON header + length-prefixed binary records (little-endian f64)
# ----------------------------------------------------------------------------

def _arm_to_dict(arm: ArmModel) -> dict:
    return {
        "lengths": arm.lengths.tolist(),
        "lo": arm.lo.tolist(),
        "hi": arm.hi.tolist(),
        "base": arm.base.tolist(),
        "points_per_link": arm.points_per_link,
        "vel_limit": arm.vel_limit.tolist(),
        "acc_limit": arm.acc_limit.tolist(),
        "jerk_limit": arm.jerk_limit.tolist(),
    }


def arm_from_dict(d: dict) -> ArmModel:
    return ArmModel(
        lengths=np.array(d["lengths"]), lo=np.array(d["lo"]), hi=np.array(d["hi"]),
        base=np.array(d["base"]), points_per_link=int(d["points_per_link"]),
        vel_limit=np.array(d["vel_limit"]), acc_limit=np.array(d["acc_limit"]),
        jerk_limit=np.array(d["jerk_limit"]),
    )


def write_dataset(records: Sequence[ProblemRecord], path, arm: ArmModel,
                  master_seed: Optional[int] = None):
    if not records:
        t_len, dof, n_rays = DEFAULT_T, arm.dof, 256
    else:
        t_len, dof = records[0].expert.shape
        n_rays = records[0].scans[0].depths.shape[0]
    header = {
        "format": 1,
        "arm": _arm_to_dict(arm),
        "T": t_len,
        "D": dof,
        "n_rays": n_rays,
        "count": len(records),
        "master_seed": master_seed,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(DS_MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for rec in records:
            meta = {
                "world_id": rec.problem.world_id,
                "world": world_to_dict(rec.world),
                "q_start": rec.problem.q_start.tolist(),
                "goal": {"pos": [float(rec.problem.goal.pos[0]), float(rec.problem.goal.pos[1])],
                         "theta": rec.problem.goal.theta},
                "graph_used": rec.graph_used,
                "scan_poses": [
                    {"position": list(s.pose.position), "heading": s.pose.heading,
                     "fov": s.pose.fov, "n_rays": s.pose.n_rays, "max_range": s.pose.max_range}
                    for s in rec.scans
                ],
            }
            meta_b = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
            blob = np.ascontiguousarray(rec.expert, dtype="<f8").tobytes()
            for s in rec.scans:
                blob += np.ascontiguousarray(s.depths, dtype="<f8").tobytes()
            payload = struct.pack("<I", len(meta_b)) + meta_b + blob
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)


def read_dataset(path) -> Tuple[List[ProblemRecord], dict]:
    """Streaming read; raises DatasetFormatError naming the last good record."""
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != DS_MAGIC:
            raise DatasetFormatError(f"{path} is not a dataset file")
        raw = f.read(8)
        if len(raw) < 8:
            raise DatasetFormatError("truncated header length")
        (hlen,) = struct.unpack("<Q", raw)
        head = f.read(hlen)
        if len(head) < hlen:
            raise DatasetFormatError("truncated header")
        header = json.loads(head.decode())
        t_len, dof = header["T"], header["D"]
        n_rays = header["n_rays"]
        records: List[ProblemRecord] = []
        while True:
            raw = f.read(8)
            if len(raw) == 0:
                break
            if len(raw) < 8:
                raise DatasetFormatError(f"truncated after record {len(records) - 1}")
            (plen,) = struct.unpack("<Q", raw)
            payload = f.read(plen)
            if len(payload) < plen:
                raise DatasetFormatError(f"truncated after record {len(records) - 1}")
            try:
                records.append(_decode_record(payload, t_len, dof, n_rays))
            except (KeyError, ValueError, struct.error) as e:
                raise DatasetFormatError(
                    f"malformed record {len(records)} (last good: {len(records) - 1}): {e}")
    return records, header


def _decode_record(payload: bytes, t_len: int, dof: int, n_rays: int) -> ProblemRecord:
    (mlen,) = struct.unpack("<I", payload[:4])
    meta = json.loads(payload[4:4 + mlen].decode())
    blob = payload[4 + mlen:]
    n_scans = len(meta["scan_poses"])
    need = (t_len * dof + n_scans * n_rays) * 8
    if len(blob) != need:
        raise ValueError(f"float blob has {len(blob)} bytes, expected {need}")
    expert = np.frombuffer(blob, dtype="<f8", count=t_len * dof).reshape(t_len, dof).copy()
    scans = []
    off = t_len * dof * 8
    for sp in meta["scan_poses"]:
        depths = np.frombuffer(blob, dtype="<f8", count=n_rays, offset=off).copy()
        off += n_rays * 8
        pose = SensorPose(position=tuple(sp["position"]), heading=sp["heading"],
                          fov=sp["fov"], n_rays=sp["n_rays"], max_range=sp["max_range"])
        scans.append(DepthScan(pose=pose, depths=depths))
    goal = Pose2(position=tuple(meta["goal"]["pos"]), theta=meta["goal"]["theta"])
    problem = PlanningProblem(world_id=meta["world_id"],
                              q_start=np.array(meta["q_start"]), goal=goal)
    return ProblemRecord(problem=problem, world=world_from_dict(meta["world"]),
                         expert=expert, graph_used=bool(meta["graph_used"]), scans=scans)


def validate_dataset(records: Sequence[ProblemRecord], arm: ArmModel,
                     delta_t: float = 0.005, delta_r_deg: float = 2.86) -> dict:
    """Re-verify every stored expert against its ground-truth world."""
    n_fail = 0
    n_graph = 0
    for rec in records:
        m = metrics(arm, rec.world, rec.problem.goal, rec.expert,
                    delta_t=delta_t, delta_r_deg=delta_r_deg)
        if not m.success:
            n_fail += 1
        n_graph += int(rec.graph_used)
    return {"count": len(records), "failed": n_fail,
            "graph_used": n_graph,
            "graph_used_frac": n_graph / len(records) if records else 0.0}
