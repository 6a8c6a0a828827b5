"""Adam training loops and model checkpoints.

Every iteration draws its batch and gumbel noise from a generator seeded by
``(seed, iteration)``, so a run resumed from a checkpoint continues exactly as an
uninterrupted run would.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ..numerics import checkpoint
from ..numerics.optim import Adam
from ..numerics.tensor import GradientTape
from .base import LossBreakdown, ModelConfig
from .dswm import DSWM
from .world import WorldModel

log = logging.getLogger(__name__)

CURVE_FIELDS = LossBreakdown.FIELDS
MODEL_KINDS = {"DSWM": DSWM, "WORLD": WorldModel}


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 3
    learning_rate: float = 5e-4
    checkpoint_every: int = 500


def build_model(kind: str, config: ModelConfig, seed: int):
    try:
        cls = MODEL_KINDS[kind.upper()]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}") from None
    return cls(config, seed=np.random.SeedSequence([seed, 0]))


def train_model(model, dataset, train: TrainConfig = TrainConfig(), seed: int = 0,
                checkpoint_path: Optional[Path] = None, meta: Optional[dict] = None,
                progress: Optional[Callable] = None):
    """Train ``model`` in place; returns the per-iteration loss curve (list of dicts)."""
    opt = Adam(list(model.params), learning_rate=train.learning_rate)
    curves: list[dict] = []
    start = 0
    if checkpoint_path is not None and Path(checkpoint_path).exists():
        start, curves = _restore(checkpoint_path, model, opt)
        log.info("resuming %s from iteration %d", model.kind, start)
    n = len(dataset)
    for it in range(start, train.iterations):
        rng = np.random.default_rng([seed, 1, it])
        idx = rng.choice(n, size=train.batch_size, replace=train.batch_size > n)
        obs, actions, positions = dataset.arrays(idx)
        noise = model.sequence_noise(rng, obs.shape[0], obs.shape[1])
        with GradientTape() as tape:
            losses = model.sequence_loss(obs, actions, positions, noise)
        opt.zero_grad()
        tape.backward(losses.total)
        opt.step()
        row = {"iteration": it + 1, **losses.values()}
        curves.append(row)
        if progress is not None:
            progress(row)
        done = it + 1
        if checkpoint_path is not None and (done % train.checkpoint_every == 0 or done == train.iterations):
            save_model(checkpoint_path, model, meta, opt, curves)
    return curves


def train_dswm(dataset, config: ModelConfig = ModelConfig(), train: TrainConfig = TrainConfig(),
               seed: int = 0, **kw):
    model = build_model("DSWM", config, seed)
    return model, train_model(model, dataset, train, seed, **kw)


def train_world(dataset, config: ModelConfig = ModelConfig(), train: TrainConfig = TrainConfig(),
                seed: int = 0, **kw):
    model = build_model("WORLD", config, seed)
    return model, train_model(model, dataset, train, seed, **kw)


# -- checkpoints -------------------------------------------------------------

def save_model(path, model, meta: Optional[dict] = None, opt: Optional[Adam] = None,
               curves: Optional[list] = None) -> None:
    arrays = {f"param/{k}": v for k, v in model.params.arrays().items()}
    info = dict(meta or {})
    info.update(model_kind=model.kind, model_config=model.config.to_dict())
    if opt is not None:
        for name, m, v in zip(model.params.names(), opt.state.m, opt.state.v):
            arrays[f"adam_m/{name}"] = m
            arrays[f"adam_v/{name}"] = v
        info["adam_step"] = opt.state.step
    if curves:
        arrays["curves"] = np.array([[r["iteration"]] + [r[f] for f in CURVE_FIELDS] for r in curves])
    info["iteration"] = int(curves[-1]["iteration"]) if curves else 0
    tmp = Path(str(path) + ".tmp")
    checkpoint.save_arrays(tmp, arrays, info)
    tmp.replace(path)


def load_model(path):
    """Return ``(model, meta)`` from a checkpoint written by :func:`save_model`."""
    arrays, meta = checkpoint.load_arrays(path)
    cls = MODEL_KINDS[meta["model_kind"]]
    model = cls(ModelConfig(**meta["model_config"]), seed=0)
    model.params.load({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    model.topology = meta.get("topology")
    return model, meta


def load_curves(path) -> list[dict]:
    arrays, _ = checkpoint.load_arrays(path)
    return _curves_from(arrays)


def _curves_from(arrays):
    if "curves" not in arrays:
        return []
    return [{"iteration": int(r[0]), **{f: float(x) for f, x in zip(CURVE_FIELDS, r[1:])}}
            for r in arrays["curves"]]


def _restore(path, model, opt: Adam):
    arrays, meta = checkpoint.load_arrays(path)
    if meta.get("model_kind") != model.kind:
        raise ValueError(f"{path} holds a {meta.get('model_kind')} model, not {model.kind}")
    model.params.load({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    for i, name in enumerate(model.params.names()):
        opt.state.m[i] = arrays[f"adam_m/{name}"].copy()
        opt.state.v[i] = arrays[f"adam_v/{name}"].copy()
    opt.state.step = int(meta["adam_step"])
    return int(meta["iteration"]), _curves_from(arrays)


def write_curves_csv(path, curves: list[dict], header_comment: str = "") -> None:
    with open(path, "w", newline="") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("iteration",) + CURVE_FIELDS)
        for r in curves:
            w.writerow([r["iteration"]] + [repr(r[k]) for k in CURVE_FIELDS])
