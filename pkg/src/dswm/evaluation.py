"""Rollout evaluation of the generative models and place-field analysis of the context latent."""

from __future__ import annotations

import csv
import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .gridworld import GRID, PatternMap, Topology, run_behaviour
from .models.dswm import DSWM
from .models.world import WorldModel
from .numerics.ops import softmax_np

WARMUP = 30
HORIZON = 20
ACTIVE_PEAK = 0.05


# -- rollouts ----------------------------------------------------------------

class DswmRollout:
    """Warm-up with real observations, then imagine in context space.

    While imagining, the GRU is driven by its own predicted ``s*`` and the store is
    only read, never written.
    """

    def __init__(self, model: DSWM, rng):
        self.model = model
        self.rng = rng
        self.store = model.new_store()
        self.h = model.initial_hidden(1)
        self.prev = None
        self.s_pred = None

    def observe(self, o_t, a_t) -> np.ndarray:
        st = self.model.step(self.store, o_t, self.prev, a_t, self.h, self.model.step_noise(self.rng))
        self.h, self.s_pred, self.prev = st.h, st.s_pred, a_t
        return st.o_pred.data[0]

    def imagine(self, a_t) -> np.ndarray:
        noise = self.model.step_noise(self.rng)["s_pred"]
        self.h, _, self.s_pred = self.model.forward_context(self.s_pred, a_t, self.h, noise)
        return self.model.decode(self.store.read(self.s_pred)).data[0]


class WorldRollout:
    """Warm-up with real observations, then feed back the model's own predictions."""

    def __init__(self, model: WorldModel, rng):
        self.model = model
        self.rng = rng
        self.h = model.initial_hidden(1)
        self.last = None

    def observe(self, o_t, a_t) -> np.ndarray:
        st = self.model.step(o_t, a_t, self.h, self.model.step_noise(self.rng))
        self.h, self.last = st.h, st.o_pred.data[0]
        return self.last

    def imagine(self, a_t) -> np.ndarray:
        return self.observe(self.last, a_t)


def make_rollout(model, rng, topology=None, pattern=None):
    if hasattr(model, "new_rollout"):
        return model.new_rollout(rng, topology, pattern)
    if isinstance(model, DSWM):
        return DswmRollout(model, rng)
    if isinstance(model, WorldModel):
        return WorldRollout(model, rng)
    raise TypeError(f"cannot roll out {type(model).__name__}")


@dataclass
class RolloutResult:
    model: str
    topology: str
    map_id: int
    seed: int
    step_mse: np.ndarray
    visited: np.ndarray = field(repr=False)

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.step_mse))

    @property
    def key(self):
        return (self.topology, self.map_id, self.seed)


def behaviour_trajectory(topology: Topology, pattern: PatternMap, seed, length=WARMUP + HORIZON,
                         p_repeat=0.7):
    """The shared evaluation trajectory for ``(topology, pattern, seed)``."""
    rng = np.random.default_rng([seed, 0])
    free = topology.free_cells()
    ep = run_behaviour(topology, pattern, free[int(rng.integers(len(free)))], length, rng, p_repeat)
    return ep


def rollout_eval(model, topology: Topology, pattern: PatternMap, seed: int,
                 warmup: int = WARMUP, horizon: int = HORIZON, p_repeat: float = 0.7) -> RolloutResult:
    """Per-step MSE of ``horizon`` autoregressive predictions after ``warmup`` real steps."""
    trained_on = getattr(model, "topology", None)
    if trained_on is not None and topology.kind is not None and trained_on != topology.kind.value:
        raise ValueError(f"model was trained on {trained_on}, not {topology.name}")
    ep = behaviour_trajectory(topology, pattern, seed, warmup + horizon, p_repeat)
    obs = ep.observations.reshape(len(ep), -1).astype(np.float64)
    actions = [int(a) for a in ep.actions]
    roll = make_rollout(model, np.random.default_rng([seed, 1]), topology, pattern)
    pred = None
    for t in range(warmup):
        pred = roll.observe(obs[t], actions[t])
    preds = [pred]
    for t in range(warmup, warmup + horizon - 1):
        preds.append(roll.imagine(actions[t]))
    preds = np.stack(preds)
    truth = obs[warmup:warmup + horizon]
    step_mse = np.sum((preds - truth) ** 2, axis=1)
    seen = {tuple(p) for p in ep.positions[:warmup].tolist()}
    visited = np.array([tuple(p) in seen for p in ep.positions[warmup:warmup + horizon].tolist()])
    return RolloutResult(getattr(model, "kind", type(model).__name__), topology.name,
                         pattern.map_id, seed, step_mse, visited)


def zero_prediction_mse(observations) -> float:
    """Rollout error of always predicting the all-zeros observation: the mean of |o|^2."""
    o = np.asarray(observations, dtype=np.float64)
    return float(np.mean(np.sum(o.reshape(-1, o.shape[-1]) ** 2, axis=1)))


def _stats(x):
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    std = float(np.std(x, ddof=1)) if n > 1 else 0.0
    return {"mean": float(np.mean(x)), "std": std, "stderr": std / math.sqrt(n), "n": n}


def paired_permutation_test(a, b, n_resamples=20000, seed=0):
    """Two-sided sign-flip permutation test on paired differences ``a - b``.

    Exact enumeration for up to 16 pairs, Monte Carlo otherwise.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    n = len(d)
    observed = abs(d.mean())
    if n == 0 or np.all(d == 0):
        return 1.0
    if n <= 16:
        signs = np.array(list(itertools.product((1.0, -1.0), repeat=n)))
    else:
        rng = np.random.default_rng(seed)
        signs = rng.choice((1.0, -1.0), size=(n_resamples, n))
    stats = np.abs((signs * d).mean(axis=1))
    hits = np.sum(stats >= observed - 1e-15)
    if n <= 16:
        return float(hits / len(signs))
    return float((hits + 1) / (n_resamples + 1))


def aggregate_rollouts(results: list[RolloutResult], models=("DSWM", "WORLD")) -> dict:
    """Per-topology statistics per model plus a paired comparison of the two models."""
    by_model = defaultdict(dict)
    for r in results:
        if r.key in by_model[r.model]:
            raise ValueError(f"duplicate rollout {r.model} {r.key}")
        by_model[r.model][r.key] = r
    a_name, b_name = models
    a, b = by_model.get(a_name, {}), by_model.get(b_name, {})
    if set(a) != set(b) or not a:
        raise ValueError("rollout results are not paired across models")
    keys = sorted(a)
    out = {"per_topology": {}, "overall": {}, "paired": {}}
    for model, table in ((a_name, a), (b_name, b)):
        out["overall"][model] = _stats([table[k].mean_mse for k in keys])
        for topo in sorted({k[0] for k in keys}):
            vals = [table[k].mean_mse for k in keys if k[0] == topo]
            out["per_topology"].setdefault(topo, {})[model] = _stats(vals)
    da = [a[k].mean_mse for k in keys]
    db = [b[k].mean_mse for k in keys]
    out["paired"] = {"models": [a_name, b_name], "n": len(keys),
                     "mean_difference": float(np.mean(np.subtract(da, db))),
                     "p_value": paired_permutation_test(da, db)}
    return out


def write_rollout_csv(path, results, header_comment=""):
    with open(path, "w", newline="") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("model", "topology", "map_id", "seed", "step_index", "mse"))
        for r in results:
            for i, m in enumerate(r.step_mse):
                w.writerow((r.model, r.topology, r.map_id, r.seed, i, repr(float(m))))


def write_summary_csv(path, summary, header_comment=""):
    with open(path, "w", newline="") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("topology", "model", "mean", "std", "stderr", "n"))
        rows = [(t, m, s) for t, d in summary["per_topology"].items() for m, s in d.items()]
        rows += [("ALL", m, s) for m, s in summary["overall"].items()]
        for t, m, s in rows:
            w.writerow((t, m, repr(s["mean"]), repr(s["std"]), repr(s["stderr"]), s["n"]))
        p = summary["paired"]
        w.writerow(("PAIRED", "-".join(p["models"]), repr(p["mean_difference"]), "", repr(p["p_value"]), p["n"]))


# -- place fields ------------------------------------------------------------

@dataclass
class PlaceFieldMap:
    unit: int
    variant: str  # "inferred" or "generated"
    activation: np.ndarray = field(repr=False)  # (11, 11); NaN on walls / unvisited cells
    footprint: Optional[float]

    @property
    def peak(self) -> float:
        return float(np.nanmax(self.activation))

    @property
    def active(self) -> bool:
        return self.footprint is not None


def footprint(activation: np.ndarray, active_peak=ACTIVE_PEAK) -> Optional[float]:
    """Fraction of (visited) free cells at or above half the unit's peak; None if inactive."""
    vals = activation[~np.isnan(activation)]
    if vals.size == 0:
        return None
    peak = vals.max()
    if peak < active_peak:
        return None
    return float(np.mean(vals >= 0.5 * peak))


def place_field_maps(model: DSWM, topology: Topology, patterns: list, n_episodes: int = 50,
                     seed: int = 0, episode_len: int = 50, p_repeat: float = 0.7,
                     active_peak: float = ACTIVE_PEAK) -> list[PlaceFieldMap]:
    """Mean softmax activation of every context unit per cell, inferred (s_t at pos_t)
    and generated (s*_{t+1} at pos_{t+1})."""
    S = model.config.s_total
    sums = {"inferred": np.zeros((GRID, GRID, S)), "generated": np.zeros((GRID, GRID, S))}
    counts = {"inferred": np.zeros((GRID, GRID)), "generated": np.zeros((GRID, GRID))}
    free = topology.free_cells()
    for e in range(n_episodes):
        rng = np.random.default_rng([seed, e])
        pattern = patterns[int(rng.integers(len(patterns)))]
        ep = run_behaviour(topology, pattern, free[int(rng.integers(len(free)))], episode_len, rng, p_repeat)
        obs = ep.observations.reshape(len(ep), -1).astype(np.float64)
        store, h, prev = model.new_store(), model.initial_hidden(1), None
        for t in range(len(ep)):
            a = int(ep.actions[t])
            st = model.step(store, obs[t], prev, a, h, model.step_noise(rng))
            h, prev = st.h, a
            r, c = ep.positions[t]
            sums["inferred"][r, c] += softmax_np(st.s_logits.data[0], model.config.s_groups)
            counts["inferred"][r, c] += 1
            if t + 1 < len(ep):
                r, c = ep.positions[t + 1]
                sums["generated"][r, c] += softmax_np(st.s_pred_logits.data[0], model.config.s_groups)
                counts["generated"][r, c] += 1
    maps = []
    for variant in ("inferred", "generated"):
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = sums[variant] / counts[variant][:, :, None]
        mean[counts[variant] == 0] = np.nan
        mean[topology.walls] = np.nan
        for u in range(S):
            act = mean[:, :, u].copy()
            maps.append(PlaceFieldMap(u, variant, act, footprint(act, active_peak)))
    return maps


def footprint_summary(maps: list[PlaceFieldMap]) -> dict:
    out = {}
    for variant in ("inferred", "generated"):
        fps = [m.footprint for m in maps if m.variant == variant and m.active]
        out[variant] = {"n_active": len(fps),
                        "mean_footprint": float(np.mean(fps)) if fps else float("nan"),
                        "frac_below_quarter": float(np.mean(np.array(fps) < 0.25)) if fps else float("nan")}
    return out


def field_image(m: PlaceFieldMap, walls: np.ndarray, scale: int = 8) -> np.ndarray:
    """uint8 image: walls 0, free cells 40..255 by activation relative to the peak."""
    act = np.nan_to_num(m.activation, nan=0.0)
    peak = np.nanmax(m.activation) if np.any(~np.isnan(m.activation)) else 0.0
    rel = act / peak if peak > 0 else np.zeros_like(act)
    img = np.where(walls, 0, np.round(40 + 215 * rel)).astype(np.uint8)
    return np.kron(img, np.ones((scale, scale), dtype=np.uint8))


def write_pgm(path, img: np.ndarray, comment: str = "") -> None:
    h, w = img.shape
    head = b"P5\n" + (f"# {comment}\n".encode() if comment else b"") + f"{w} {h}\n255\n".encode()
    Path(path).write_bytes(head + np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def export_field_images(maps: list[PlaceFieldMap], path, topology: Topology, comment: str = "") -> list[Path]:
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for m in maps:
        p = out_dir / f"{topology.name}_{m.variant}_unit{m.unit:02d}.pgm"
        write_pgm(p, field_image(m, topology.walls), comment)
        written.append(p)
    return written
