import numpy as np
import pytest

from dswm.evaluation import (RolloutResult, aggregate_rollouts, behaviour_trajectory, export_field_images,
                             field_image, footprint, footprint_summary, paired_permutation_test,
                             place_field_maps, rollout_eval, write_rollout_csv, write_summary_csv,
                             zero_prediction_mse)
from dswm.gridworld import (build_topology, collect_dataset, flatten_observation, generate_pattern_map,
                            render_observation, step_dynamics)
from dswm.models import DSWM, ModelConfig, WorldModel

SMALL = ModelConfig(hidden=16, h_size=12)


class OracleModel:
    """Cheating baseline: localises itself from the real observations, then renders the true map."""

    kind = "ORACLE"

    def new_rollout(self, rng, topology, pattern):
        return _OracleRollout(topology, pattern)


class _OracleRollout:
    def __init__(self, topology, pattern):
        self.topology, self.pattern = topology, pattern
        self.candidates = topology.free_cells()

    def _render(self, pos):
        return flatten_observation(render_observation(self.topology, self.pattern, pos))

    def observe(self, o_t, a_t):
        self.candidates = [p for p in self.candidates if np.array_equal(self._render(p), o_t)]
        return self.imagine(a_t)

    def imagine(self, a_t):
        self.candidates = sorted({step_dynamics(p, a_t, self.topology) for p in self.candidates})
        return self._render(self.candidates[0])


@pytest.fixture(scope="module")
def open_maze():
    topo = build_topology("Open")
    return topo, generate_pattern_map(topo, 123, map_id=100)


def test_oracle_rollout_has_zero_error(open_maze):
    topo, pm = open_maze
    for seed in range(3):
        r = rollout_eval(OracleModel(), topo, pm, seed)
        assert r.step_mse.shape == (20,) and r.mean_mse == 0.0


def test_zero_prediction_baseline_is_25_for_onehot_cells():
    topo = build_topology("Ring")
    pool = [generate_pattern_map(topo, i, i) for i in range(3)]
    ds = collect_dataset(topo, pool, 4, 10, seed=0)
    obs, _, _ = ds.arrays(range(4))
    assert zero_prediction_mse(obs) == 25.0


class ZeroModel:
    kind = "ZERO"

    def new_rollout(self, rng, topology, pattern):
        return self

    def observe(self, o_t, a_t):
        return np.zeros(75)

    def imagine(self, a_t):
        return np.zeros(75)


def test_rollout_against_zero_model_matches_closed_form(open_maze):
    topo, pm = open_maze
    r = rollout_eval(ZeroModel(), topo, pm, 5)
    assert np.all(r.step_mse == 25.0)


def test_rollout_shapes_and_no_leak(open_maze):
    topo, pm = open_maze
    for model in (DSWM(SMALL, seed=0), WorldModel(SMALL, seed=0)):
        r = rollout_eval(model, topo, pm, 1, warmup=8, horizon=5)
        assert r.step_mse.shape == (5,) and np.all(r.step_mse >= 0)
        assert r.model == model.kind and r.key == ("Open", 100, 1)
        again = rollout_eval(model, topo, pm, 1, warmup=8, horizon=5)
        assert np.array_equal(r.step_mse, again.step_mse)


class _Recorder:
    kind = "REC"

    def __init__(self):
        self.seen = []

    def new_rollout(self, rng, topology, pattern):
        return self

    def observe(self, o_t, a_t):
        self.seen.append(np.array(o_t))
        return np.zeros(75)

    def imagine(self, a_t):
        return np.zeros(75)


def test_imagination_only_receives_actions(open_maze):
    topo, pm = open_maze
    rec = _Recorder()
    rollout_eval(rec, topo, pm, 2, warmup=7, horizon=6)
    ep = behaviour_trajectory(topo, pm, 2, 13)
    assert len(rec.seen) == 7
    assert all(np.array_equal(a, b.reshape(-1)) for a, b in zip(rec.seen, ep.observations[:7]))


def test_topology_mismatch_raises(open_maze):
    topo, pm = open_maze
    m = DSWM(SMALL, seed=0)
    m.topology = "Rooms"
    with pytest.raises(ValueError):
        rollout_eval(m, topo, pm, 0)


def _result(model, topo, map_id, seed, values):
    v = np.asarray(values, dtype=float)
    return RolloutResult(model, topo, map_id, seed, v, np.zeros(len(v), bool))


def test_aggregate_identical_sets_and_stats():
    rng = np.random.default_rng(0)
    res = []
    for m in range(3):
        for s in range(4):
            vals = rng.random(20) * 10
            res += [_result("DSWM", "Open", m, s, vals), _result("WORLD", "Open", m, s, vals)]
    agg = aggregate_rollouts(res)
    assert agg["paired"]["mean_difference"] == 0.0 and agg["paired"]["p_value"] == 1.0
    st = agg["per_topology"]["Open"]["DSWM"]
    assert st["n"] == 12
    assert st["stderr"] == pytest.approx(st["std"] / np.sqrt(12))


def test_aggregate_unpaired_or_duplicate_raises():
    a = _result("DSWM", "Open", 0, 0, [1.0])
    with pytest.raises(ValueError):
        aggregate_rollouts([a, _result("WORLD", "Open", 0, 1, [1.0])])
    with pytest.raises(ValueError):
        aggregate_rollouts([a, a, _result("WORLD", "Open", 0, 0, [1.0])])


def test_permutation_test():
    a = np.arange(10, dtype=float)
    assert paired_permutation_test(a + 1, a) == pytest.approx(2 / 1024)
    rng = np.random.default_rng(1)
    x = rng.normal(size=40)
    assert paired_permutation_test(x, x + rng.normal(size=40) * 0.01) > 0.01
    assert paired_permutation_test(x, x - 1.0) < 1e-3


def test_summary_csv(tmp_path):
    res = [_result(m, t, 0, s, [s + (m == "WORLD")]) for m in ("DSWM", "WORLD") for t in ("Open", "Ring")
           for s in range(3)]
    agg = aggregate_rollouts(res)
    write_summary_csv(tmp_path / "s.csv", agg, "config=x seed=0")
    write_rollout_csv(tmp_path / "r.csv", res, "config=x seed=0")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "# config=x seed=0"
    assert len(lines) == 2 + 4 + 2 + 1
    assert (tmp_path / "r.csv").read_text().splitlines()[1] == "model,topology,map_id,seed,step_index,mse"


def test_footprint_rules():
    act = np.full((11, 11), np.nan)
    act[1:5, 1:5] = 0.1
    act[2, 2] = 0.8
    assert footprint(act) == pytest.approx(1 / 16)
    assert footprint(np.where(np.isnan(act), np.nan, 0.01)) is None  # never active
    uniform = np.where(np.isnan(act), np.nan, 0.3)
    assert footprint(uniform) == 1.0


def test_place_fields_and_images(tmp_path, open_maze):
    topo, pm = open_maze
    m = DSWM(SMALL, seed=1)
    maps = place_field_maps(m, topo, [pm], n_episodes=3, seed=0, episode_len=15)
    assert len(maps) == 2 * 49
    inferred = np.stack([x.activation for x in maps if x.variant == "inferred"], axis=-1)
    visited = ~np.isnan(inferred[:, :, 0])
    np.testing.assert_allclose(inferred[visited].sum(-1), 1.0, atol=1e-12)
    assert np.all(inferred[visited] >= 0) and np.all(inferred[visited] <= 1)
    summ = footprint_summary(maps)
    assert set(summ) == {"inferred", "generated"}
    files = export_field_images(maps[:3], tmp_path / "a", topo, "c")
    again = export_field_images(maps[:3], tmp_path / "b", topo, "c")
    assert [f.read_bytes() for f in files] == [f.read_bytes() for f in again]
    assert files[0].read_bytes().startswith(b"P5\n# c\n88 88\n255\n")


def test_field_image_brightness(open_maze):
    topo, _ = open_maze
    from dswm.evaluation import PlaceFieldMap
    act = np.where(topo.walls, np.nan, 0.2)
    img = field_image(PlaceFieldMap(0, "inferred", act, 1.0), topo.walls, scale=1)
    assert set(np.unique(img[~topo.walls])) == {255} and np.all(img[topo.walls] == 0)
    act[3, 4] = 0.5
    img = field_image(PlaceFieldMap(0, "inferred", act, 0.1), topo.walls, scale=1)
    assert np.unravel_index(np.argmax(img), img.shape) == (3, 4)
