"""Planar serial arm: forward kinematics, collision points, damped-least-squares IK."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .geometry import wrap_angle


@dataclass(frozen=True)
class Pose2:
    """Planar pose; theta is stored wrapped to (-pi, pi]."""

    position: Tuple[float, float]
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", float(wrap_angle(self.theta)))

    @property
    def pos(self) -> np.ndarray:
        return np.asarray(self.position, dtype=np.float64)


@dataclass(frozen=True)
class ArmModel:
    """Planar revolute chain. Joint k rotates link k; angles accumulate along the chain."""

    lengths: np.ndarray
    lo: np.ndarray  # per-joint lower limits (rad)
    hi: np.ndarray
    base: np.ndarray = field(default_factory=lambda: np.zeros(2))
    points_per_link: int = 4
    vel_limit: np.ndarray = None
    acc_limit: np.ndarray = None
    jerk_limit: np.ndarray = None

    def __post_init__(self):
        lengths = np.asarray(self.lengths, dtype=np.float64)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))
        object.__setattr__(self, "base", np.asarray(self.base, dtype=np.float64))
        d = lengths.shape[0]
        if self.vel_limit is None:
            object.__setattr__(self, "vel_limit", np.full(d, 2.1))
        if self.acc_limit is None:
            object.__setattr__(self, "acc_limit", np.full(d, 15.0))
        if self.jerk_limit is None:
            object.__setattr__(self, "jerk_limit", np.full(d, 7500.0))
        if np.any(lengths <= 0):
            raise ValueError("link lengths must be positive")
        if np.any(self.lo >= self.hi):
            raise ValueError("joint limits must satisfy lo < hi")

    @property
    def dof(self) -> int:
        return self.lengths.shape[0]

    @property
    def reach(self) -> float:
        return float(self.lengths.sum())

    def point_fractions(self) -> np.ndarray:
        """Midpoint-rule sample fractions along each link."""
        m = self.points_per_link
        return (np.arange(m) + 0.5) / m

    def random_config(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lo, self.hi)

    def within_limits(self, q: np.ndarray, slack: float = 1e-9) -> bool:
        return bool(np.all(q >= self.lo - slack) and np.all(q <= self.hi + slack))


def default_arm(dof: int = 7) -> ArmModel:
    """7-joint arm whose 0.85 m reach fits the 2 m x 2 m workspace from any fold."""
    lengths = np.array([0.16, 0.14, 0.13, 0.12, 0.11, 0.10, 0.09])[:dof]
    if dof > 7:
        raise ValueError("default arm supports up to 7 joints")
    lim = 2.8973
    return ArmModel(lengths=lengths, lo=np.full(dof, -lim), hi=np.full(dof, lim))


# ----------------------------------------------------------------------------
# Forward kinematics
# ----------------------------------------------------------------------------

def fk_pose(arm: ArmModel, q: np.ndarray) -> Pose2:
    """End-effector pose of the cumulative-angle chain."""
    th = np.cumsum(np.asarray(q, dtype=np.float64))
    x = arm.base[0] + float(np.dot(arm.lengths, np.cos(th)))
    y = arm.base[1] + float(np.dot(arm.lengths, np.sin(th)))
    return Pose2(position=(x, y), theta=float(th[-1]))


def joint_positions(arm: ArmModel, q: np.ndarray) -> np.ndarray:
    """Positions of the base and every joint, (D+1, 2); row k is link k's proximal end."""
    th = np.cumsum(np.asarray(q, dtype=np.float64))
    seg = arm.lengths[:, None] * np.column_stack([np.cos(th), np.sin(th)])
    return arm.base[None, :] + np.vstack([np.zeros((1, 2)), np.cumsum(seg, axis=0)])


def fk_points(arm: ArmModel, q: np.ndarray) -> np.ndarray:
    """Collision points sampled along each link, (D * points_per_link, 2)."""
    return fk_points_batch(arm, np.asarray(q, dtype=np.float64)[None, :])[0]


def fk_points_batch(arm: ArmModel, qs: np.ndarray) -> np.ndarray:
    """fk_points over a batch of configurations (..., D) -> (..., D*M, 2)."""
    qs = np.asarray(qs, dtype=np.float64)
    th = np.cumsum(qs, axis=-1)
    c, s = np.cos(th), np.sin(th)
    lx = arm.lengths * c
    ly = arm.lengths * s
    pre_x = np.cumsum(lx, axis=-1) - lx
    pre_y = np.cumsum(ly, axis=-1) - ly
    f = arm.point_fractions()
    px = arm.base[0] + pre_x[..., None] + f * lx[..., None]
    py = arm.base[1] + pre_y[..., None] + f * ly[..., None]
    pts = np.stack([px, py], axis=-1)
    return pts.reshape(qs.shape[:-1] + (arm.dof * arm.points_per_link, 2))


def jac_pose(arm: ArmModel, q: np.ndarray) -> np.ndarray:
    """Analytic end-effector Jacobian, rows (dx/dq, dy/dq, dtheta/dq), shape (3, D)."""
    origins = joint_positions(arm, q)
    tip = origins[-1]
    rel = tip[None, :] - origins[:-1]
    jac = np.empty((3, arm.dof))
    jac[0] = -rel[:, 1]
    jac[1] = rel[:, 0]
    jac[2] = 1.0
    return jac


# ----------------------------------------------------------------------------
# Inverse kinematics (damped least squares)
# ----------------------------------------------------------------------------

def _pose_error(arm: ArmModel, q: np.ndarray, target: Pose2) -> np.ndarray:
    p = fk_pose(arm, q)
    return np.array([
        target.pos[0] - p.pos[0],
        target.pos[1] - p.pos[1],
        float(wrap_angle(target.theta - p.theta)),
    ])


def ik_solve(
    arm: ArmModel,
    target: Pose2,
    seed: np.ndarray,
    tol: float = 1e-4,
    tol_rad: float = 1e-3,
    damping: float = 1e-2,
    max_iters: int = 200,
) -> Tuple[np.ndarray, bool]:
    """Damped least-squares iteration; returns (final iterate, converged)."""
    q = np.clip(np.asarray(seed, dtype=np.float64).copy(), arm.lo, arm.hi)
    lam2 = damping * damping
    for _ in range(max_iters):
        e = _pose_error(arm, q, target)
        if np.hypot(e[0], e[1]) <= tol and abs(e[2]) <= tol_rad:
            return q, True
        jac = jac_pose(arm, q)
        jjt = jac @ jac.T + lam2 * np.eye(3)
        q = np.clip(q + jac.T @ np.linalg.solve(jjt, e), arm.lo, arm.hi)
    e = _pose_error(arm, q, target)
    return q, bool(np.hypot(e[0], e[1]) <= tol and abs(e[2]) <= tol_rad)


def ik(
    arm: ArmModel,
    target: Pose2,
    seed: np.ndarray,
    tol: float = 1e-4,
    tol_rad: float = 1e-3,
    **kwargs,
) -> Optional[np.ndarray]:
    """IK from a seed config; None when the target is unreachable or iteration fails."""
    if np.hypot(*(target.pos - arm.base)) > arm.reach + tol:
        return None
    q, ok = ik_solve(arm, target, seed, tol=tol, tol_rad=tol_rad, **kwargs)
    return q if ok and arm.within_limits(q) else None


# ----------------------------------------------------------------------------
# Normalization and self-clearance
# ----------------------------------------------------------------------------

def normalize(arm: ArmModel, q: np.ndarray) -> np.ndarray:
    """Per-joint affine map [lo, hi] -> [0, 1]; applies along the last axis."""
    return (np.asarray(q, dtype=np.float64) - arm.lo) / (arm.hi - arm.lo)


def denormalize(arm: ArmModel, u: np.ndarray) -> np.ndarray:
    return arm.lo + np.asarray(u, dtype=np.float64) * (arm.hi - arm.lo)


def nonadjacent_point_pairs(arm: ArmModel) -> Tuple[np.ndarray, np.ndarray]:
    """Index pairs (into the fk_points list) on links at least two apart."""
    m = arm.points_per_link
    ii, jj = [], []
    for a in range(arm.dof):
        for b in range(a + 2, arm.dof):
            for pa in range(m):
                for pb in range(m):
                    ii.append(a * m + pa)
                    jj.append(b * m + pb)
    return np.array(ii, dtype=np.int64), np.array(jj, dtype=np.int64)


def self_clearance(arm: ArmModel, q: np.ndarray) -> float:
    """Minimum distance between collision points on non-adjacent links.

    Arms with fewer than 3 links have no such pairs; returns 2x reach as the cap.
    """
    ii, jj = nonadjacent_point_pairs(arm)
    if ii.size == 0:
        return 2.0 * arm.reach
    pts = fk_points(arm, q)
    d = pts[ii] - pts[jj]
    return float(np.sqrt(np.min(np.einsum("ij,ij->i", d, d))))
