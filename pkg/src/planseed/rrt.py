"""Bidirectional RRT in joint space with shortcutting, the graph-fallback seeder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import _kernels
from .arm import ArmModel, Pose2, ik
from .geometry import World


@dataclass
class GraphPlanQuery:
    q_start: np.ndarray
    q_goal: np.ndarray
    world: World
    arm: ArmModel
    max_nodes: int = 20000
    step: float = 0.1
    goal_bias: float = 0.1
    seed: int = 0


def _clearance_args(arm: ArmModel, world: World):
    return (arm.lengths, float(arm.base[0]), float(arm.base[1]), arm.point_fractions(),
            world.circle_arr, world.box_arr, world.sdf_cap)


def config_free(arm: ArmModel, world: World, q: np.ndarray) -> bool:
    return _kernels.config_clearance(np.asarray(q, dtype=np.float64),
                                     *_clearance_args(arm, world)) > 0.0


def config_clearance(arm: ArmModel, world: World, q: np.ndarray) -> float:
    """Min analytic SDF over the arm's collision points."""
    return float(_kernels.config_clearance(np.asarray(q, dtype=np.float64),
                                           *_clearance_args(arm, world)))


def collision_free_ik(arm: ArmModel, world: World, pose: Pose2, rng: np.random.Generator,
                      tries: int = 8, clearance: float = 1e-3) -> Optional[np.ndarray]:
    """Collision-free IK solution for a pose, searching across random seed configs."""
    for _ in range(tries):
        q = ik(arm, pose, arm.random_config(rng))
        if q is not None and config_clearance(arm, world, q) > clearance:
            return q
    return None


def _lipschitz(arm: ArmModel) -> float:
    # bound on collision-point speed per unit joint-space (L2) distance
    return float(np.sqrt(arm.dof) * arm.reach)


def edge_free(arm: ArmModel, world: World, qa: np.ndarray, qb: np.ndarray,
              step: float = 0.1, min_advance: float = 1e-4) -> bool:
    """Conservative collision check of the straight joint-space segment.

    Sample spacing adapts to the local clearance (never above `step`), which
    makes acceptance a proof that the entire continuum segment is free.
    """
    return _kernels.edge_free_conservative(
        np.asarray(qa, dtype=np.float64), np.asarray(qb, dtype=np.float64),
        step, _lipschitz(arm), min_advance, *_clearance_args(arm, world))


class _Tree:
    def __init__(self, root: np.ndarray, capacity: int):
        d = root.shape[0]
        self.nodes = np.empty((capacity, d))
        self.parent = np.empty(capacity, dtype=np.int64)
        self.nodes[0] = root
        self.parent[0] = -1
        self.size = 1

    def nearest(self, q: np.ndarray) -> int:
        diff = self.nodes[:self.size] - q
        return int(np.argmin(np.einsum("ij,ij->i", diff, diff)))

    def add(self, q: np.ndarray, parent: int) -> int:
        i = self.size
        self.nodes[i] = q
        self.parent[i] = parent
        self.size += 1
        return i

    def path_to_root(self, i: int) -> List[np.ndarray]:
        out = []
        while i >= 0:
            out.append(self.nodes[i].copy())
            i = self.parent[i]
        return out


def rrt_connect(query: GraphPlanQuery) -> Optional[List[np.ndarray]]:
    """Bidirectional RRT-Connect; returns the node path or None at the node budget.

    Deterministic for a fixed query seed.
    """
    arm, world = query.arm, query.world
    q_start = np.asarray(query.q_start, dtype=np.float64)
    q_goal = np.asarray(query.q_goal, dtype=np.float64)
    if not config_free(arm, world, q_start) or not config_free(arm, world, q_goal):
        raise ValueError("rrt_connect endpoints must be collision-free")
    if np.allclose(q_start, q_goal):
        return [q_start.copy()]

    rng = np.random.default_rng(query.seed)
    step = query.step
    lip = _lipschitz(arm)
    cl_args = _clearance_args(arm, world)

    ta = _Tree(q_start, query.max_nodes)
    tb = _Tree(q_goal, query.max_nodes)
    a_is_start = True

    def extend(tree: _Tree, q_rand: np.ndarray) -> Optional[int]:
        """One bounded step from the nearest node toward q_rand; None when blocked."""
        ni = tree.nearest(q_rand)
        q_near = tree.nodes[ni]
        delta = q_rand - q_near
        dist = float(np.linalg.norm(delta))
        if dist < 1e-12:
            return None
        q_new = q_rand if dist <= step else q_near + (step / dist) * delta
        if not _kernels.edge_free_conservative(q_near, q_new, step, lip, 1e-4, *cl_args):
            return None
        return tree.add(q_new, ni)

    while ta.size + tb.size < query.max_nodes:
        if rng.random() < query.goal_bias:
            q_rand = tb.nodes[0].copy()
        else:
            q_rand = rng.uniform(arm.lo, arm.hi)
        new_i = extend(ta, q_rand)
        if new_i is not None:
            # connect: greedily grow the other tree toward the new node
            q_target = ta.nodes[new_i]
            last = None
            while True:
                ci = extend(tb, q_target)
                if ci is None:
                    break
                last = ci
                if np.linalg.norm(tb.nodes[ci] - q_target) < 1e-9:
                    path_a = ta.path_to_root(new_i)[::-1]
                    path_b = tb.path_to_root(last)
                    if not a_is_start:
                        path_a, path_b = path_b[::-1], path_a[::-1]
                    full = path_a + path_b[1:] if np.allclose(path_a[-1], path_b[0]) \
                        else path_a + path_b
                    return full
                if ta.size + tb.size >= query.max_nodes:
                    return None
        ta, tb = tb, ta
        a_is_start = not a_is_start
    return None


def shortcut_and_resample(
    path: List[np.ndarray],
    t_len: int,
    arm: ArmModel,
    world: World,
    rng: np.random.Generator,
    attempts: int = 200,
    step: float = 0.1,
) -> np.ndarray:
    """Randomized shortcutting followed by arclength-uniform resampling to t_len rows.

    One output row is snapped onto each surviving interior corner so the
    resampled piecewise-linear path lies exactly on the validated polyline
    (plain chord resampling would cut corners into obstacles).
    """
    if len(path) == 0:
        raise ValueError("path must have at least one node")
    nodes = [np.asarray(p, dtype=np.float64) for p in path]
    for _ in range(attempts):
        if len(nodes) <= 2:
            break
        i = int(rng.integers(0, len(nodes) - 2))
        j = int(rng.integers(i + 2, len(nodes)))
        if edge_free(arm, world, nodes[i], nodes[j], step):
            nodes = nodes[:i + 1] + nodes[j:]
    pts = np.stack(nodes) if len(nodes) > 1 else np.stack([nodes[0], nodes[0]])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total < 1e-12:
        return np.tile(pts[0], (t_len, 1))
    targets = np.linspace(0.0, total, t_len)
    n_corners = pts.shape[0] - 2
    if 0 < n_corners <= t_len - 2:
        used = 1
        for ci in range(1, pts.shape[0] - 1):
            remaining_after = n_corners - ci
            idx = int(np.clip(round(cum[ci] / total * (t_len - 1)),
                              used, t_len - 2 - remaining_after))
            targets[idx] = cum[ci]
            used = idx + 1
        targets = np.sort(targets)
    out = np.empty((t_len, pts.shape[1]))
    for k, sdist in enumerate(targets):
        i = int(np.clip(np.searchsorted(cum, sdist) - 1, 0, len(seg) - 1))
        f = (sdist - cum[i]) / seg[i] if seg[i] > 0 else 0.0
        out[k] = pts[i] + f * (pts[i + 1] - pts[i])
    out[0] = pts[0]
    return out
