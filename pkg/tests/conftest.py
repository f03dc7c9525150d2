import numpy as np
import pytest

from planseed.arm import default_arm, fk_pose
from planseed.data import PlanningProblem, ProblemRecord
from planseed.geometry import Box, Circle, SensorPose, World, render_depth_scan


@pytest.fixture(scope="session")
def arm():
    return default_arm()


def synthetic_record(rng, arm, t_len=32, n_scans=2, graph_used=False, n_rays=256):
    """A structurally valid record (not necessarily a feasible expert) for IO and
    training-plumbing tests."""
    world = World([
        Circle(center=(rng.uniform(0.3, 0.6), rng.uniform(-0.3, 0.3)),
               radius=rng.uniform(0.05, 0.12)),
        Box(lo=(0.7, -0.2), hi=(0.85, 0.2)),
    ])
    q0 = rng.uniform(-1.0, 1.0, size=arm.dof)
    q1 = rng.uniform(-1.0, 1.0, size=arm.dof)
    alphas = np.linspace(0, 1, t_len)[:, None]
    smooth = 0.5 - 0.5 * np.cos(np.pi * alphas)  # ease-in-out keeps jerk moderate
    traj = q0 + smooth * (q1 - q0)
    goal = fk_pose(arm, q1)
    scans = []
    for i in range(n_scans):
        pose = SensorPose(position=(-0.6 + 0.1 * i, 0.4 - 0.2 * i),
                          heading=rng.uniform(-0.6, 0.2), n_rays=n_rays)
        scans.append(render_depth_scan(world, pose))
    problem = PlanningProblem(world_id=f"synthetic-{rng.integers(1e6):06d}",
                              q_start=traj[0].copy(), goal=goal)
    return ProblemRecord(problem=problem, world=world, expert=traj,
                         graph_used=graph_used, scans=scans)
