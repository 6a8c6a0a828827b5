"""Parameter containers and shared building blocks."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from ..gridworld import N_ACTIONS, OBS_DIM
from ..numerics import ops
from ..numerics.tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    obs_dim: int = OBS_DIM
    n_actions: int = N_ACTIONS
    z_total: int = 128
    z_groups: int = 8
    s_total: int = 49
    s_groups: int = 1
    hidden: int = 256
    h_size: int = 256
    temperature: float = 1.0
    top_k: int = 5
    kappa: float = 0.1
    beta_z: float = 0.001
    beta_s: float = 0.001
    position_scale: float = 10.0
    mse_scale: float = float(OBS_DIM)  # MSE terms are elementwise means times this

    def to_dict(self):
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class Params:
    """Ordered named leaf tensors."""

    def __init__(self, arrays: dict):
        self.tensors = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)
                        for k, v in arrays.items()}

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    def arrays(self) -> dict:
        return {k: t.data for k, t in self.tensors.items()}

    def load(self, arrays: dict):
        for k, t in self.tensors.items():
            if arrays[k].shape != t.data.shape:
                raise ValueError(f"{k}: checkpoint shape {arrays[k].shape} != {t.data.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def init_linear(rng, arrays, name, fan_in, fan_out):
    bound = np.sqrt(1.0 / fan_in)
    arrays[f"{name}.w"] = rng.uniform(-bound, bound, (fan_out, fan_in))
    arrays[f"{name}.b"] = rng.uniform(-bound, bound, fan_out)


def init_mlp(rng, arrays, name, sizes):
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        init_linear(rng, arrays, f"{name}.{i}", a, b)


def init_gru(rng, arrays, name, n_in, n_hidden):
    bound = np.sqrt(1.0 / n_hidden)
    arrays[f"{name}.w_ih"] = rng.uniform(-bound, bound, (3 * n_hidden, n_in))
    arrays[f"{name}.w_hh"] = rng.uniform(-bound, bound, (3 * n_hidden, n_hidden))
    arrays[f"{name}.b_ih"] = np.zeros(3 * n_hidden)
    arrays[f"{name}.b_hh"] = np.zeros(3 * n_hidden)


def mlp(params: Params, name: str, x, n_layers=3, final=None) -> Tensor:
    """Swish after every layer but the last; ``final`` optionally applied to the output."""
    for i in range(n_layers):
        x = ops.linear(x, params[f"{name}.{i}.w"], params[f"{name}.{i}.b"])
        if i < n_layers - 1:
            x = ops.swish(x)
    return final(x) if final is not None else x


def onehot_actions(actions, n_actions=N_ACTIONS) -> np.ndarray:
    """Onehot rows for integer actions; ``None`` or ``-1`` map to the zero vector."""
    a = np.asarray([-1 if x is None else int(x) for x in np.atleast_1d(actions)], dtype=np.int64)
    out = np.zeros((len(a), n_actions))
    ok = a >= 0
    out[np.nonzero(ok)[0], a[ok]] = 1.0
    return out


def as_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(1, -1) if x.ndim == 1 else x.reshape(x.shape[0], -1)


@dataclass
class LossBreakdown:
    l_obs: Tensor
    l_pos: Tensor
    l_s: Tensor
    neg_entropy_z: Tensor
    neg_entropy_s: Tensor
    total: Tensor

    FIELDS = ("l_obs", "l_pos", "l_s", "neg_entropy_z", "neg_entropy_s", "total")

    def values(self) -> dict:
        return {f: float(getattr(self, f).data) for f in self.FIELDS}


def combine_losses(l_obs, l_pos, l_s, neg_h_z, neg_h_s, beta_z, beta_s) -> LossBreakdown:
    total = ops.add_n([l_obs, l_pos, l_s, ops.scale(neg_h_z, beta_z), ops.scale(neg_h_s, beta_s)])
    return LossBreakdown(l_obs, l_pos, l_s, neg_h_z, neg_h_s, total)


def zero_scalar() -> Tensor:
    return Tensor(0.0)


@dataclass
class SequenceNoise:
    """Gumbel noise for a (T, B) batch; field names match the sampled latents."""

    z: np.ndarray
    s: Optional[np.ndarray] = None
    s_pred: Optional[np.ndarray] = None
    z_pred: Optional[np.ndarray] = None
