"""Single-stream world model baseline: one gumbel-softmax latent z and a GRU forward model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import ops
from ..numerics.tensor import Tensor
from .base import (LossBreakdown, ModelConfig, Params, SequenceNoise, as_rows, combine_losses,
                   init_gru, init_linear, init_mlp, mlp, onehot_actions, zero_scalar)


@dataclass
class WorldStep:
    z_logits: Tensor
    z: Tensor
    h: Tensor
    z_pred_logits: Tensor
    z_pred: Tensor
    o_pred: Tensor


class WorldModel:
    kind = "WORLD"

    def __init__(self, config: ModelConfig = ModelConfig(), seed=0):
        self.config = c = config
        rng = np.random.default_rng(seed)
        arrays = {}
        init_mlp(rng, arrays, "enc_z", [c.obs_dim, c.hidden, c.hidden, c.z_total])
        init_gru(rng, arrays, "gru", c.z_total + c.n_actions, c.h_size)
        init_linear(rng, arrays, "head_z", c.h_size, c.z_total)
        init_mlp(rng, arrays, "dec", [c.z_total, c.hidden, c.hidden, c.obs_dim])
        self.params = Params(arrays)

    def initial_hidden(self, batch=1) -> Tensor:
        return Tensor(np.zeros((batch, self.config.h_size)))

    def step_noise(self, rng: np.random.Generator, batch=1) -> dict:
        c = self.config
        return {"z": ops.gumbel_noise(rng, (batch, c.z_total)),
                "z_pred": ops.gumbel_noise(rng, (batch, c.z_total))}

    def _sample(self, logits, noise):
        return ops.gumbel_softmax(logits, noise, self.config.temperature, self.config.z_groups)

    def content_logits(self, o_t) -> Tensor:
        o = o_t if isinstance(o_t, Tensor) else Tensor(as_rows(o_t))
        return mlp(self.params, "enc_z", o)

    def encode_content(self, o_t, noise):
        logits = self.content_logits(o_t)
        return logits, self._sample(logits, noise)

    def _mse(self, a, b) -> Tensor:
        return ops.scale(ops.mse(a, b), self.config.mse_scale)

    def decode(self, z) -> Tensor:
        return mlp(self.params, "dec", z, final=ops.sigmoid)

    def step(self, o_t, a_t, h_prev, noise) -> WorldStep:
        p = self.params
        z_logits, z = self.encode_content(o_t, noise["z"])
        x = ops.concat([z, Tensor(onehot_actions(a_t, self.config.n_actions))], axis=1)
        h = ops.gru_cell(x, h_prev, p["gru.w_ih"], p["gru.w_hh"], p["gru.b_ih"], p["gru.b_hh"])
        zp_logits = ops.linear(h, p["head_z.w"], p["head_z.b"])
        zp = self._sample(zp_logits, noise["z_pred"])
        return WorldStep(z_logits, z, h, zp_logits, zp, self.decode(zp))

    def compute_losses(self, step: WorldStep, o_t, o_next=None, z_logits_next=None) -> LossBreakdown:
        c = self.config
        l_obs = self._mse(self.decode(step.z), as_rows(o_t))
        if o_next is not None:
            l_obs = ops.add(l_obs, self._mse(step.o_pred, as_rows(o_next)))
        if z_logits_next is not None:
            l_s = ops.mean(ops.categorical_kl(z_logits_next, step.z_pred_logits, c.z_groups))
        else:
            l_s = zero_scalar()
        neg_h_z = ops.scale(ops.mean(ops.entropy(step.z_logits, c.z_groups)), -1.0)
        return combine_losses(l_obs, zero_scalar(), l_s, neg_h_z, zero_scalar(), c.beta_z, c.beta_s)

    def sequence_noise(self, rng, T, B) -> SequenceNoise:
        c = self.config
        return SequenceNoise(z=ops.gumbel_noise(rng, (T, B, c.z_total)),
                             z_pred=ops.gumbel_noise(rng, (T, B, c.z_total)))

    def sequence_loss(self, obs, actions, positions, noise: SequenceNoise) -> LossBreakdown:
        """Time-vectorised equivalent of per-step :meth:`compute_losses` summed over t."""
        c = self.config
        p = self.params
        T, B, _ = obs.shape
        N = T * B
        O = obs.reshape(N, -1)
        A = onehot_actions(actions.reshape(-1), c.n_actions)

        z_logits = mlp(p, "enc_z", Tensor(O))
        z = self._sample(z_logits, noise.z.reshape(N, -1))
        gi = ops.linear(ops.concat([z, Tensor(A)], axis=1), p["gru.w_ih"], p["gru.b_ih"])
        hs = ops.gru_sequence(ops.reshape(gi, (T, B, -1)), np.zeros((B, c.h_size)),
                              p["gru.w_hh"], p["gru.b_hh"])
        zp_logits = ops.linear(ops.reshape(hs, (N, -1)), p["head_z.w"], p["head_z.b"])
        zp = self._sample(zp_logits, noise.z_pred.reshape(N, -1))

        decoded = self.decode(ops.concat([z, zp], axis=0))
        l_obs = ops.scale(self._mse(ops.take_rows(decoded, 0, N), O), T)
        if T > 1:
            pred = ops.take_rows(decoded, N, 2 * N - B)
            l_obs = ops.add(l_obs, ops.scale(self._mse(pred, O[B:]), T - 1))
            kl = ops.categorical_kl(ops.take_rows(z_logits, B, N), ops.take_rows(zp_logits, 0, N - B),
                                    c.z_groups)
            l_s = ops.scale(ops.total(kl), 1.0 / B)
        else:
            l_s = zero_scalar()
        neg_h_z = ops.scale(ops.total(ops.entropy(z_logits, c.z_groups)), -1.0 / B)
        return combine_losses(l_obs, zero_scalar(), l_s, neg_h_z, zero_scalar(), c.beta_z, c.beta_s)


def world_step(model: WorldModel, o_t, a_t, h_prev, noise) -> WorldStep:
    return model.step(o_t, a_t, h_prev, noise)
