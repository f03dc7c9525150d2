import numpy as np
import pytest

from planseed.arm import default_arm, fk_points_batch
from planseed.geometry import Box, World, sdf_points
from planseed.rrt import GraphPlanQuery, config_free, edge_free, rrt_connect, shortcut_and_resample

ARM = default_arm()


def dense_collision_free(arm, world, path, spacing):
    """Oracle: interpolate every segment at `spacing` and check analytic SDF of all
    collision points, independently of the kernel edge checker."""
    for qa, qb in zip(path, path[1:]):
        n = max(2, int(np.ceil(np.linalg.norm(qb - qa) / spacing)) + 1)
        for t in np.linspace(0, 1, n):
            pts = fk_points_batch(arm, qa + t * (qb - qa))
            if np.min(sdf_points(world, pts)) <= 0:
                return False
    return True


def gap_world():
    """A wall at x ~ 0.45 with a single gap; start region left, goal region right."""
    return World([
        Box(lo=(0.42, -0.95), hi=(0.5, -0.18)),
        Box(lo=(0.42, 0.18), hi=(0.5, 0.95)),
    ])


class TestRrtConnect:
    def test_empty_world_finds_path(self):
        q_start = np.zeros(7)
        q_goal = np.full(7, 0.4)
        q = GraphPlanQuery(q_start=q_start, q_goal=q_goal, world=World([]), arm=ARM, seed=1)
        path = rrt_connect(q)
        assert path is not None
        assert np.allclose(path[0], q_start) and np.allclose(path[-1], q_goal)

    def test_same_start_goal_single_node(self):
        q0 = np.full(7, 0.2)
        q = GraphPlanQuery(q_start=q0, q_goal=q0.copy(), world=World([]), arm=ARM, seed=2)
        path = rrt_connect(q)
        assert len(path) == 1

    def test_threads_gap_collision_free(self):
        world = gap_world()
        q_start = np.array([2.0, -0.4, -0.4, -0.3, -0.2, -0.1, 0.0])
        q_goal = np.array([-0.15, 0.1, 0.05, 0.05, 0.0, 0.0, 0.0])
        assert config_free(ARM, world, q_start) and config_free(ARM, world, q_goal)
        q = GraphPlanQuery(q_start=q_start, q_goal=q_goal, world=world, arm=ARM, seed=3)
        path = rrt_connect(q)
        assert path is not None
        # dense recheck at 4x the search validation density
        assert dense_collision_free(ARM, world, path, spacing=q.step / 4)

    def test_deterministic_for_seed(self):
        world = gap_world()
        q_start = np.array([2.0, -0.4, -0.4, -0.3, -0.2, -0.1, 0.0])
        q_goal = np.array([-0.15, 0.1, 0.05, 0.05, 0.0, 0.0, 0.0])
        q = GraphPlanQuery(q_start=q_start, q_goal=q_goal, world=world, arm=ARM, seed=7)
        p1 = rrt_connect(q)
        p2 = rrt_connect(q)
        assert len(p1) == len(p2)
        for a, b in zip(p1, p2):
            assert np.array_equal(a, b)

    def test_rejects_colliding_endpoint(self):
        world = World([Box(lo=(0.1, -0.5), hi=(0.9, 0.5))])
        with pytest.raises(ValueError):
            rrt_connect(GraphPlanQuery(q_start=np.zeros(7), q_goal=np.full(7, 0.3),
                                       world=world, arm=ARM))


class TestShortcutAndResample:
    def test_two_node_path_linear_resample(self):
        rng = np.random.default_rng(0)
        qa = np.zeros(7)
        qb = np.full(7, 0.5)
        traj = shortcut_and_resample([qa, qb], 16, ARM, World([]), rng)
        assert traj.shape == (16, 7)
        for t in range(16):
            np.testing.assert_allclose(traj[t], qa + (t / 15) * (qb - qa), atol=1e-12)

    def test_exact_row_count_and_start(self):
        rng = np.random.default_rng(1)
        world = gap_world()
        q_start = np.array([2.0, -0.4, -0.4, -0.3, -0.2, -0.1, 0.0])
        q_goal = np.array([-0.15, 0.1, 0.05, 0.05, 0.0, 0.0, 0.0])
        path = rrt_connect(GraphPlanQuery(q_start=q_start, q_goal=q_goal,
                                          world=world, arm=ARM, seed=5))
        for t_len in (8, 32):
            traj = shortcut_and_resample(path, t_len, ARM, world, rng)
            assert traj.shape == (t_len, 7)
            assert np.array_equal(traj[0], path[0])

    def test_resampled_collision_free(self):
        world = gap_world()
        rng = np.random.default_rng(2)
        q_start = np.array([2.0, -0.4, -0.4, -0.3, -0.2, -0.1, 0.0])
        q_goal = np.array([-0.15, 0.1, 0.05, 0.05, 0.0, 0.0, 0.0])
        path = rrt_connect(GraphPlanQuery(q_start=q_start, q_goal=q_goal,
                                          world=world, arm=ARM, seed=6))
        traj = shortcut_and_resample(path, 32, ARM, world, rng)
        assert dense_collision_free(ARM, world, list(traj), spacing=0.025)

    def test_single_node_path(self):
        rng = np.random.default_rng(3)
        traj = shortcut_and_resample([np.full(7, 0.1)], 10, ARM, World([]), rng)
        assert traj.shape == (10, 7)
        assert np.all(traj == 0.1)


class TestEdgeFree:
    def test_blocked_edge(self):
        world = World([Box(lo=(0.3, -0.05), hi=(0.5, 0.05))])
        qa = np.zeros(7)
        qa[0] = np.pi / 2
        qb = np.zeros(7)
        assert config_free(ARM, world, qa)
        assert not config_free(ARM, world, qb)  # extended arm hits the box
        assert not edge_free(ARM, world, qa, qb)
