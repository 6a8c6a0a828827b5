import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dswm.gridworld import (ALL_KINDS, GRID, OBS_DIM, OPTIMAL_STEPS, RED, GREEN, NONE, Action, GoalTask,
                            Topology, TopologyKind, bfs_distances, bfs_optimal_action, build_topology,
                            collect_dataset, flatten_observation, generate_pattern_map, goal_episode,
                            load_dataset, load_goal_task, load_pattern_maps, render_observation,
                            run_behaviour, save_dataset, save_pattern_maps, semi_random_policy,
                            step_dynamics)


@pytest.mark.parametrize("kind,n_free", [("Open", 81), ("Rooms", 68), ("Ring", 72), ("Hallway", 65)])
def test_layout_free_cells(kind, n_free):
    topo = build_topology(kind)
    assert topo.n_free == n_free
    assert topo.walls[0].all() and topo.walls[:, -1].all()


def test_parse_kind():
    assert TopologyKind.parse("open") is TopologyKind.OPEN
    assert TopologyKind.parse("HALLWAY") is TopologyKind.HALLWAY
    with pytest.raises(ValueError):
        TopologyKind.parse("maze")


def test_topology_validation():
    walls = np.zeros((GRID, GRID), dtype=bool)
    with pytest.raises(ValueError, match="border"):
        Topology(None, walls)
    walls[0, :] = walls[-1, :] = walls[:, 0] = walls[:, -1] = True
    walls[:, 5] = True  # splits the grid in two
    with pytest.raises(ValueError, match="connected"):
        Topology(None, walls)
    with pytest.raises(ValueError):
        Topology(None, np.ones((5, 5), dtype=bool))


def test_step_dynamics_blocks_walls():
    topo = build_topology("Open")
    assert step_dynamics((1, 1), Action.NORTH, topo) == (1, 1)
    assert step_dynamics((1, 1), Action.WEST, topo) == (1, 1)
    assert step_dynamics((1, 1), Action.EAST, topo) == (1, 2)
    assert step_dynamics((1, 1), Action.SOUTH, topo) == (2, 1)
    rooms = build_topology("Rooms")
    assert step_dynamics((4, 4), Action.SOUTH, rooms) == (4, 4)
    assert step_dynamics((4, 2), Action.SOUTH, rooms) == (5, 2)  # doorway


@pytest.mark.parametrize("kind", [k.value for k in ALL_KINDS])
@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_walks_stay_on_free_cells(kind, seed):
    topo = build_topology(kind)
    rng = np.random.default_rng(seed)
    free = topo.free_cells()
    pos = free[int(rng.integers(len(free)))]
    for _ in range(50):
        pos = step_dynamics(pos, int(rng.integers(4)), topo)
        assert topo.is_free(pos)


def test_pattern_map_colors():
    topo = build_topology("Ring")
    pm = generate_pattern_map(topo, 3, map_id=7)
    assert pm.map_id == 7
    assert np.all(pm.colors[topo.walls] == NONE)
    free = pm.colors[~topo.walls]
    assert set(np.unique(free)) <= {RED, GREEN}
    assert np.array_equal(pm.colors, generate_pattern_map(topo, 3).colors)


def test_observation_channels():
    topo = build_topology("Open")
    pm = generate_pattern_map(topo, 0)
    obs = render_observation(topo, pm, (1, 1))
    assert obs.shape == (5, 5, 3) and obs.dtype == np.uint8
    assert np.all(obs.sum(axis=2) == 1)  # every cell is exactly one of red, green or wall
    assert obs[:2, :, 2].all() and obs[:, :2, 2].all()  # beyond the grid renders as wall
    assert obs[2, 2, 0] == (pm.colors[1, 1] == RED)
    assert flatten_observation(obs).shape == (OBS_DIM,)


def test_semi_random_policy_repeats():
    rng = np.random.default_rng(0)
    same = sum(semi_random_policy(((1, 1), Action.EAST), rng) == Action.EAST for _ in range(4000))
    # P(repeat) = 0.7 + 0.3 / 4
    assert abs(same / 4000 - 0.775) < 0.03
    assert semi_random_policy(((1, 1), None), rng) in tuple(Action)


def test_collect_dataset_consistency():
    topo = build_topology("Rooms")
    pool = [generate_pattern_map(topo, [1, i], i) for i in range(4)]
    ds = collect_dataset(topo, pool, n_episodes=6, episode_len=20, seed=5)
    assert len(ds) == 6
    for ep in ds.episodes:
        assert len(ep) == 20 and ep.observations.shape == (20, 5, 5, 3)
        pattern = pool[ep.map_id]
        for t in range(19):
            pos = tuple(int(v) for v in ep.positions[t])
            assert topo.is_free(pos)
            assert np.array_equal(ep.observations[t], render_observation(topo, pattern, pos))
            assert tuple(ep.positions[t + 1]) == step_dynamics(pos, int(ep.actions[t]), topo)
    obs, actions, positions = ds.arrays([0, 2])
    assert obs.shape == (20, 2, OBS_DIM) and actions.shape == (20, 2) and positions.shape == (20, 2, 2)
    again = collect_dataset(topo, pool, n_episodes=6, episode_len=20, seed=5)
    assert all(np.array_equal(a.observations, b.observations) for a, b in zip(ds.episodes, again.episodes))


def test_collect_dataset_needs_pool():
    with pytest.raises(ValueError):
        collect_dataset(build_topology("Open"), [], 1)


def test_dataset_roundtrip(tmp_path):
    topo = build_topology("Hallway")
    pool = [generate_pattern_map(topo, i, i) for i in range(3)]
    ds = collect_dataset(topo, pool, n_episodes=4, episode_len=13, seed=2)
    ds.config_hash = "abc123"
    save_dataset(ds, tmp_path / "d.bin")
    back = load_dataset(tmp_path / "d.bin")
    assert back.topology_kind is TopologyKind.HALLWAY and back.config_hash == "abc123"
    assert back.seed == 2 and back.episode_length == 13
    for a, b in zip(ds.episodes, back.episodes):
        assert a.map_id == b.map_id
        assert np.array_equal(a.observations, b.observations)
        assert np.array_equal(a.actions, b.actions) and np.array_equal(a.positions, b.positions)
    save_pattern_maps(pool, "Hallway", tmp_path / "m.bin", "abc123")
    maps = load_pattern_maps(tmp_path / "m.bin")
    assert [m.map_id for m in maps] == [0, 1, 2]
    assert all(np.array_equal(a.colors, b.colors) for a, b in zip(pool, maps))
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "m.bin")


@pytest.mark.parametrize("kind", [k.value for k in ALL_KINDS])
def test_goal_task_optimal_distances(kind):
    task = load_goal_task(kind)
    topo = build_topology(kind)
    dist = bfs_distances(topo, task.start)
    opt = OPTIMAL_STEPS[TopologyKind.parse(kind)]
    assert dist[task.goal_phase1] == opt and dist[task.goal_phase2] == opt
    assert task.switch_episode == 50 and task.max_steps == 100


@pytest.mark.parametrize("kind", [k.value for k in ALL_KINDS])
def test_bfs_policy_reaches_goal_optimally(kind):
    topo = build_topology(kind)
    task = load_goal_task(kind)
    for ep in (0, 60):
        goal = task.goal_for(ep)
        out = goal_episode(task, topo, lambda p: bfs_optimal_action(topo, p, goal), episode=ep)
        assert out.steps_to_goal == OPTIMAL_STEPS[topo.kind]
        assert out.total_reward == 1.0 and out.rewards[-1] == 1.0
        assert out.trajectory[-1] == goal


def test_goal_episode_timeout():
    topo = build_topology("Open")
    task = load_goal_task("Open")
    out = goal_episode(task, topo, lambda p: Action.NORTH)
    assert out.steps_to_goal == 100 and out.total_reward == 0.0 and len(out.actions) == 100


def test_goal_task_validation_rejects_wrong_distance():
    topo = build_topology("Open")
    with pytest.raises(ValueError):
        GoalTask((1, 1), (1, 2), (6, 1)).validate(topo, optimal=5)
    with pytest.raises(ValueError):
        GoalTask((0, 0), (1, 6), (6, 1)).validate(topo)


def test_run_behaviour_length():
    topo = build_topology("Open")
    ep = run_behaviour(topo, generate_pattern_map(topo, 1), (5, 5), 30, np.random.default_rng(1))
    assert len(ep) == 30 and tuple(ep.positions[0]) == (5, 5)
