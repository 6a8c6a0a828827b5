"""Experiment stages: datasets, model training, rollout evaluation and RL sessions.

Every stage writes into one output tree and records its files (with sha256) in
``manifest.json`` together with a digest of the config sections it depends on.
A stage whose digest and files still match the manifest is skipped.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .. import evaluation as ev
from ..gridworld import (OPTIMAL_STEPS, TopologyKind, build_topology, collect_dataset, generate_pattern_map,
                         load_dataset, load_goal_task, load_pattern_maps, save_dataset, save_pattern_maps)
from ..models import build_model, load_model, train_model, write_curves_csv
from ..numerics import load_arrays
from ..successor_rl import (BasisKind, FeatureBasis, rl_table, run_session, switch_report,
                            write_learning_curves, write_rl_table)
from .config import ExperimentConfig

log = logging.getLogger(__name__)

MODEL_KINDS = ("DSWM", "WORLD")


class MissingPrerequisite(RuntimeError):
    pass


class AcceptanceFailure(RuntimeError):
    pass


# -- manifest ----------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, root: Path, config_hash: str):
        self.root = Path(root)
        self.path = self.root / "manifest.json"
        self.data = {"config_hash": config_hash, "stages": {}}
        if self.path.exists():
            old = json.loads(self.path.read_text())
            self.data["stages"] = old.get("stages", {})

    def is_done(self, stage: str, digest: str) -> bool:
        entry = self.data["stages"].get(stage)
        if not entry or entry["digest"] != digest:
            return False
        for rel, sha in entry["files"].items():
            p = self.root / rel
            if not p.exists() or sha256_file(p) != sha:
                return False
        return True

    def record(self, stage: str, digest: str, files) -> None:
        rels = sorted(str(Path(f).resolve().relative_to(self.root.resolve())) for f in files)
        self.data["stages"][stage] = {"digest": digest, "files": {r: sha256_file(self.root / r) for r in rels}}
        self.save()

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        stages = dict(sorted(self.data["stages"].items()))
        body = {"config_hash": self.data["config_hash"], "stages": stages}
        self.path.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")

    def files(self) -> list[str]:
        return sorted(f for e in self.data["stages"].values() for f in e["files"])


# -- layout ------------------------------------------------------------------

class Layout:
    def __init__(self, root):
        self.root = Path(root)

    def dataset(self, topo):
        return self.root / "datasets" / f"{topo}_episodes.bin"

    def maps(self, topo, split):
        return self.root / "datasets" / f"{topo}_maps_{split}.bin"

    def checkpoint(self, topo, kind):
        return self.root / "models" / f"{topo}_{kind}.ckpt"

    def curves(self, topo, kind):
        return self.root / "models" / f"{topo}_{kind}_loss.csv"

    @property
    def rollouts(self):
        return self.root / "rollouts"

    @property
    def agents(self):
        return self.root / "agents"


def _stamp(cfg: ExperimentConfig, seed) -> str:
    return f"config={cfg.digest()} seed={seed}"


def _require(path, what):
    if not Path(path).exists():
        raise MissingPrerequisite(f"missing {what}: {path}")


def _run_jobs(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


# -- stage: datasets ---------------------------------------------------------

def make_datasets(cfg: ExperimentConfig, out, topologies=None, workers=1, manifest=None) -> list[Path]:
    lay = Layout(out)
    manifest = manifest or Manifest(out, cfg.digest())
    written = []
    for topo in topologies or cfg.topologies:
        stage = f"datasets/{topo}"
        digest = cfg.stage_digest("environment")
        paths = [lay.dataset(topo), lay.maps(topo, "train"), lay.maps(topo, "test")]
        if manifest.is_done(stage, digest):
            log.info("skip %s (up to date)", stage)
            written += paths
            continue
        files = _make_dataset(cfg, lay, topo)
        manifest.record(stage, digest, files)
        written += files
    return written


def pattern_pools(cfg: ExperimentConfig, topo: str):
    """Train maps get ids 0..n-1, test maps continue from n, so the pools are disjoint by id."""
    topology = build_topology(topo)
    n_train, n_test = int(cfg.env["train pattern maps"]), int(cfg.env["test pattern maps"])
    train = [generate_pattern_map(topology, cfg.derive_seed("map-train", topo, i), i) for i in range(n_train)]
    test = [generate_pattern_map(topology, cfg.derive_seed("map-test", topo, i), n_train + i)
            for i in range(n_test)]
    return train, test


def _make_dataset(cfg, lay: Layout, topo):
    topology = build_topology(topo)
    train, test = pattern_pools(cfg, topo)
    seed = cfg.derive_seed("dataset", topo)
    ds = collect_dataset(topology, train, int(cfg.env["episodes"]), int(cfg.env["episode length"]), seed,
                         float(cfg.env["repeat probability"]))
    ds.config_hash = cfg.digest()
    lay.dataset(topo).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, lay.dataset(topo))
    save_pattern_maps(train, topo, lay.maps(topo, "train"), cfg.digest())
    save_pattern_maps(test, topo, lay.maps(topo, "test"), cfg.digest())
    return [lay.dataset(topo), lay.maps(topo, "train"), lay.maps(topo, "test")]


# -- stage: training ---------------------------------------------------------

def train(cfg: ExperimentConfig, out, topologies=None, models=None, workers=1, manifest=None) -> list[Path]:
    lay = Layout(out)
    manifest = manifest or Manifest(out, cfg.digest())
    digest = cfg.stage_digest("environment", "generative")
    jobs, written = [], []
    for topo in topologies or cfg.topologies:
        _require(lay.dataset(topo), f"{topo} dataset (run make-datasets first)")
        for kind in models or MODEL_KINDS:
            stage = f"train/{topo}/{kind}"
            if manifest.is_done(stage, digest):
                log.info("skip %s (up to date)", stage)
                written += [lay.checkpoint(topo, kind), lay.curves(topo, kind)]
                continue
            jobs.append((cfg.data, str(out), topo, kind, digest))
    for stage_files in _run_jobs(_train_job, jobs, workers):
        stage, files = stage_files
        manifest.record(stage, digest, files)
        written += files
    return written


def _train_job(cfg_data, out, topo, kind, digest):
    cfg = ExperimentConfig(cfg_data)
    lay = Layout(out)
    ds = load_dataset(lay.dataset(topo))
    seed = cfg.derive_seed(f"train/{kind}", topo)
    model = build_model(kind, cfg.model_config(), seed)
    ckpt = lay.checkpoint(topo, kind)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    meta = {"topology": topo, "seed": seed, "config_hash": cfg.digest(), "stage_digest": digest}
    if ckpt.exists() and load_arrays(ckpt)[1].get("stage_digest") != digest:
        ckpt.unlink()  # written under other settings; resuming from it would mix runs
    log.info("training %s on %s", kind, topo)
    curves = train_model(model, ds, cfg.train_config(), seed, checkpoint_path=ckpt, meta=meta)
    write_curves_csv(lay.curves(topo, kind), curves, _stamp(cfg, seed) + f" model={kind} topology={topo}")
    return f"train/{topo}/{kind}", [ckpt, lay.curves(topo, kind)]


def _load_trained(lay: Layout, topo, kind):
    _require(lay.checkpoint(topo, kind), f"{kind} checkpoint for {topo} (run train first)")
    model, meta = load_model(lay.checkpoint(topo, kind))
    return model


# -- stage: rollout evaluation -----------------------------------------------

def eval_rollouts(cfg: ExperimentConfig, out, topologies=None, workers=1, manifest=None) -> dict:
    """Paired rollouts, summary, place fields and content check; returns the aggregate summary.

    Raises :class:`AcceptanceFailure` after writing everything if the DSWM aggregate
    mean is not below the WORLD mean.
    """
    lay = Layout(out)
    manifest = manifest or Manifest(out, cfg.digest())
    topos = topologies or cfg.topologies
    digest = cfg.stage_digest("environment", "generative", "evaluation") + "/" + ",".join(topos)
    stage = "eval-rollouts"
    summary_path = lay.rollouts / "summary.json"
    if manifest.is_done(stage, digest):
        log.info("skip %s (up to date)", stage)
        summary = json.loads(summary_path.read_text())
    else:
        for topo in topos:
            for kind in MODEL_KINDS:
                _require(lay.checkpoint(topo, kind), f"{kind} checkpoint for {topo} (run train first)")
        parts = _run_jobs(_eval_topology_job, [(cfg.data, str(out), t) for t in topos], workers)
        results = [r for p in parts for r in p["results"]]
        files = [f for p in parts for f in p["files"]]
        lay.rollouts.mkdir(parents=True, exist_ok=True)
        stamp = _stamp(cfg, cfg.master_seed)
        ev.write_rollout_csv(lay.rollouts / "rollouts.csv", results, stamp)
        summary = ev.aggregate_rollouts(results)
        ev.write_summary_csv(lay.rollouts / "summary.csv", summary, stamp)
        summary["generalization"] = _write_generalization(lay.rollouts / "generalization.csv",
                                                          [g for p in parts for g in p["generalization"]], stamp)
        summary["footprints"] = {p["topology"]: p["footprints"] for p in parts}
        _write_footprints(lay.rollouts / "footprints.csv", summary["footprints"], stamp)
        summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        files += [lay.rollouts / n for n in ("rollouts.csv", "summary.csv", "generalization.csv",
                                             "footprints.csv", "summary.json")]
        manifest.record(stage, digest, files)
    o = summary["overall"]
    if not o["DSWM"]["mean"] < o["WORLD"]["mean"]:
        raise AcceptanceFailure(f"DSWM rollout MSE {o['DSWM']['mean']:.4f} is not below "
                                f"WORLD {o['WORLD']['mean']:.4f}")
    return summary


def rollout_seed(cfg, topo, map_index, k):
    return cfg.derive_seed("rollout", topo, map_index * 1000 + k)


def _eval_topology_job(cfg_data, out, topo):
    cfg = ExperimentConfig(cfg_data)
    lay = Layout(out)
    e = cfg.evaluation
    topology = build_topology(topo)
    _require(lay.maps(topo, "test"), f"{topo} test maps")
    train_maps = load_pattern_maps(lay.maps(topo, "train"))
    test_maps = load_pattern_maps(lay.maps(topo, "test"))
    models = {k: _load_trained(lay, topo, k) for k in MODEL_KINDS}
    p_repeat = float(cfg.env["repeat probability"])
    results, gen = [], []
    baseline = mean_prediction_mse(load_dataset(lay.dataset(topo)))
    for i, pattern in enumerate(test_maps):
        for k in range(int(e["rollout seeds"])):
            seed = rollout_seed(cfg, topo, i, k)
            for kind in MODEL_KINDS:
                r = ev.rollout_eval(models[kind], topology, pattern, seed, int(e["warmup steps"]),
                                    int(e["rollout steps"]), p_repeat)
                results.append(r)
                if kind == "DSWM":
                    vis = r.step_mse[r.visited]
                    gen.append((topo, r.map_id, seed, int(r.visited.sum()),
                                float(vis.mean()) if vis.size else float("nan"), baseline))
    maps = ev.place_field_maps(models["DSWM"], topology, train_maps, int(e["place field episodes"]),
                               cfg.derive_seed("place-fields", topo), int(cfg.env["episode length"]), p_repeat,
                               float(e["active peak"]))
    files = ev.export_field_images(maps, lay.rollouts / "fields", topology, _stamp(cfg, cfg.master_seed))
    return {"topology": topo, "results": results, "generalization": gen, "files": files,
            "footprints": ev.footprint_summary(maps)}


def mean_prediction_mse(dataset) -> float:
    """Closed-form error of the best constant predictor (the dataset mean observation)."""
    obs, _, _ = dataset.arrays(range(len(dataset)))
    o = obs.reshape(-1, obs.shape[-1])
    return float(np.sum(o.var(axis=0)))


def _write_generalization(path, rows, stamp) -> dict:
    with open(path, "w", newline="") as f:
        f.write(f"# {stamp}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("topology", "map_id", "seed", "visited_steps", "visited_mse", "baseline_mse", "below"))
        for topo, map_id, seed, n, m, base in rows:
            w.writerow((topo, map_id, seed, n, repr(m), repr(base), int(n > 0 and m < base)))
    scored = [r for r in rows if r[3] > 0]
    below = [r[4] < r[5] for r in scored]
    return {"n_rollouts": len(rows), "n_with_visited": len(scored),
            "fraction_below": float(np.mean(below)) if below else float("nan")}


def _write_footprints(path, footprints: dict, stamp):
    with open(path, "w", newline="") as f:
        f.write(f"# {stamp}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("topology", "variant", "n_active", "mean_footprint", "frac_below_quarter"))
        for topo, d in footprints.items():
            for variant, s in d.items():
                w.writerow((topo, variant, s["n_active"], repr(s["mean_footprint"]), repr(s["frac_below_quarter"])))


# -- stage: RL agents --------------------------------------------------------

def train_agents(cfg: ExperimentConfig, out, topologies=None, workers=1, manifest=None) -> dict:
    lay = Layout(out)
    manifest = manifest or Manifest(out, cfg.digest())
    topos = topologies or cfg.topologies
    digest = cfg.stage_digest("environment", "generative", "reinforcement") + "/" + ",".join(topos)
    stage = "train-agents"
    table_path = lay.agents / "rl_table.json"
    if manifest.is_done(stage, digest):
        log.info("skip %s (up to date)", stage)
        return json.loads(table_path.read_text())
    for topo in topos:
        _require(lay.maps(topo, "test"), f"{topo} test maps (run make-datasets first)")
        for kind in MODEL_KINDS:
            if any(v.startswith(kind) for v in cfg.variants):
                _require(lay.checkpoint(topo, kind), f"{kind} checkpoint for {topo} (run train first)")
    jobs = [(cfg.data, str(out), topo, variant, s)
            for topo in topos for variant in cfg.variants for s in range(cfg.rl_seeds)]
    results = _run_jobs(_session_job, jobs, workers)
    lay.agents.mkdir(parents=True, exist_ok=True)
    stamp = _stamp(cfg, cfg.master_seed)
    write_learning_curves(lay.agents / "learning_curves.csv", results, stamp)
    optimal = {t: OPTIMAL_STEPS[TopologyKind.parse(t)] for t in topos}
    table = rl_table(results, optimal)
    write_rl_table(lay.agents / "rl_table.csv", table, cfg.variants, stamp)
    switches = _write_switches(lay.agents / "goal_switch.csv", results, stamp)
    body = {"table": table, "switch": switches}
    table_path.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
    manifest.record(stage, digest, [lay.agents / n for n in ("learning_curves.csv", "rl_table.csv",
                                                             "goal_switch.csv", "rl_table.json")])
    return body


_MODEL_CACHE: dict = {}


def _session_job(cfg_data, out, topo, variant, index):
    cfg = ExperimentConfig(cfg_data)
    lay = Layout(out)
    topology = build_topology(topo)
    test_maps = load_pattern_maps(lay.maps(topo, "test"))
    kind = BasisKind(variant.split("+")[0])
    model = None
    if kind is not BasisKind.ONEHOT:
        key = (str(lay.checkpoint(topo, kind.value)), sha256_file(lay.checkpoint(topo, kind.value)))
        if key not in _MODEL_CACHE:
            _MODEL_CACHE[key] = _load_trained(lay, topo, kind.value)
        model = _MODEL_CACHE[key]
    basis = FeatureBasis(kind, model)
    seed = cfg.derive_seed("agent", topo, index)
    res = run_session(topology, load_goal_task(topo), basis, test_maps[index % len(test_maps)], seed,
                      cfg.agent_config(variant.endswith("+DYNA")))
    res.basis = variant
    return res


def _write_switches(path, results, stamp) -> list:
    rows = []
    with open(path, "w", newline="") as f:
        f.write(f"# {stamp}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("basis", "topology", "seed", "first_old_goal_visit", "first_zeroing", "fired_by_first_visit",
                    "post_switch_median"))
        for r in results:
            rep = switch_report(r, load_goal_task(r.topology))
            med = float(np.median(rep["post_switch_steps"])) if rep["post_switch_steps"] else float("nan")
            fv = rep["first_old_goal_visit"]
            fz = rep["first_zeroing"]
            w.writerow((r.basis, r.topology, r.seed, "" if fv is None else f"{fv[0]}:{fv[1]}",
                        "" if fz is None else f"{fz[0]}:{fz[1]}", int(rep["fired_by_first_visit"]), repr(med)))
            rows.append({"basis": r.basis, "topology": r.topology, "seed": r.seed,
                         "first_old_goal_visit": fv, "first_zeroing": fz,
                         "fired_by_first_visit": rep["fired_by_first_visit"],
                         "post_switch_steps": rep["post_switch_steps"]})
    return rows


# -- everything --------------------------------------------------------------

def reproduce_all(cfg: ExperimentConfig, out, workers=1) -> dict:
    """Run every stage; a failed rollout assertion is reported after the RL stage has run."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    manifest = Manifest(out, cfg.digest())
    make_datasets(cfg, out, workers=workers, manifest=manifest)
    train(cfg, out, workers=workers, manifest=manifest)
    failure = None
    try:
        summary = eval_rollouts(cfg, out, workers=workers, manifest=manifest)
    except AcceptanceFailure as e:
        failure = e
        summary = json.loads((Layout(out).rollouts / "summary.json").read_text())
    agents = train_agents(cfg, out, workers=workers, manifest=manifest)
    manifest.data["stages"]["config"] = {"digest": cfg.digest(),
                                         "files": {"config.yaml": sha256_file(out / "config.yaml")}}
    manifest.save()
    if failure is not None:
        raise failure
    return {"rollouts": summary, "agents": agents}
