"""Dual-stream world model: content stream z, context stream s, and a DND joining them.

Per step, inference encodes the content ``z_t`` from ``o_t`` and the context
``s_t`` from ``(o_t, a_{t-1})``, writes ``(s_t, z_t)`` to the store and advances
the GRU with ``(s_t, a_t)``. Generation predicts ``s*_{t+1}`` from the hidden
state, reads ``z*_{t+1}`` from the store and decodes ``o*_{t+1}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dnd import DndStore, dnd_causal_read
from ..numerics import ops
from ..numerics.tensor import Tensor
from .base import (LossBreakdown, ModelConfig, Params, SequenceNoise, as_rows, combine_losses,
                   init_gru, init_linear, init_mlp, mlp, onehot_actions, zero_scalar)


@dataclass
class DswmStep:
    z_logits: Tensor
    z: Tensor
    s_logits: Tensor
    s: Tensor
    h: Tensor
    s_pred_logits: Tensor
    s_pred: Tensor
    z_pred: Tensor
    o_pred: Tensor


class DSWM:
    kind = "DSWM"

    def __init__(self, config: ModelConfig = ModelConfig(), seed=0):
        self.config = c = config
        rng = np.random.default_rng(seed)
        arrays = {}
        init_mlp(rng, arrays, "enc_z", [c.obs_dim, c.hidden, c.hidden, c.z_total])
        init_mlp(rng, arrays, "enc_s", [c.obs_dim + c.n_actions, c.hidden, c.hidden, c.s_total])
        init_gru(rng, arrays, "gru", c.s_total + c.n_actions, c.h_size)
        init_linear(rng, arrays, "head_s", c.h_size, c.s_total)
        init_mlp(rng, arrays, "dec", [c.z_total, c.hidden, c.hidden, c.obs_dim])
        init_linear(rng, arrays, "pos", c.s_total, 2)
        # start the position head at the grid centre so no single category wins every input
        arrays["pos.b"] = np.full(2, 0.5)
        self.params = Params(arrays)

    # -- pieces ---------------------------------------------------------------

    def new_store(self) -> DndStore:
        c = self.config
        return DndStore(c.s_total, c.z_total, c.top_k, c.kappa)

    def initial_hidden(self, batch=1) -> Tensor:
        return Tensor(np.zeros((batch, self.config.h_size)))

    def step_noise(self, rng: np.random.Generator, batch=1) -> dict:
        c = self.config
        return {"z": ops.gumbel_noise(rng, (batch, c.z_total)),
                "s": ops.gumbel_noise(rng, (batch, c.s_total)),
                "s_pred": ops.gumbel_noise(rng, (batch, c.s_total))}

    def _sample(self, logits, noise, groups):
        return ops.gumbel_softmax(logits, noise, self.config.temperature, groups)

    def encode_content(self, o_t, noise):
        o = o_t if isinstance(o_t, Tensor) else Tensor(as_rows(o_t))
        logits = mlp(self.params, "enc_z", o)
        return logits, self._sample(logits, noise, self.config.z_groups)

    def context_logits(self, o_t, a_prev) -> Tensor:
        o = as_rows(o_t)
        a = onehot_actions(a_prev, self.config.n_actions)
        if len(a) == 1 and len(o) > 1:
            a = np.repeat(a, len(o), axis=0)
        x = np.concatenate([o, a], axis=1)
        return mlp(self.params, "enc_s", Tensor(x))

    def encode_context(self, o_t, a_prev, noise):
        logits = self.context_logits(o_t, a_prev)
        return logits, self._sample(logits, noise, self.config.s_groups)

    def advance(self, s, a_t, h_prev) -> Tensor:
        p = self.params
        x = ops.concat([s, Tensor(onehot_actions(a_t, self.config.n_actions))], axis=1)
        return ops.gru_cell(x, h_prev, p["gru.w_ih"], p["gru.w_hh"], p["gru.b_ih"], p["gru.b_hh"])

    def predict_context(self, h, noise):
        logits = ops.linear(h, self.params["head_s.w"], self.params["head_s.b"])
        return logits, self._sample(logits, noise, self.config.s_groups)

    def forward_context(self, s, a_t, h_prev, noise):
        """GRU over (s_t, a_t), then the forward head: returns (h_t, logits, sample) for t+1."""
        h = self.advance(s, a_t, h_prev)
        logits, sample = self.predict_context(h, noise)
        return h, logits, sample

    def decode(self, z) -> Tensor:
        return mlp(self.params, "dec", z, final=ops.sigmoid)

    def _mse(self, a, b) -> Tensor:
        return ops.scale(ops.mse(a, b), self.config.mse_scale)

    def position(self, s) -> Tensor:
        return ops.linear(s, self.params["pos.w"], self.params["pos.b"])

    # -- one step -------------------------------------------------------------

    def step(self, store: DndStore, o_t, a_prev, a_t, h_prev, noise) -> DswmStep:
        z_logits, z = self.encode_content(o_t, noise["z"])
        s_logits, s = self.encode_context(o_t, a_prev, noise["s"])
        store.write(s, z)
        h, sp_logits, sp = self.forward_context(s, a_t, h_prev, noise["s_pred"])
        z_pred = store.read(sp)
        return DswmStep(z_logits, z, s_logits, s, h, sp_logits, sp, z_pred, self.decode(z_pred))

    def compute_losses(self, step: DswmStep, o_t, pos_t, o_next=None, s_logits_next=None) -> LossBreakdown:
        """Per-step losses; ``o_next``/``s_logits_next`` are None on an episode's last step."""
        c = self.config
        o_t = as_rows(o_t)
        l_obs = self._mse(self.decode(step.z), o_t)
        if o_next is not None:
            l_obs = ops.add(l_obs, self._mse(step.o_pred, as_rows(o_next)))
        l_pos = self._mse(self.position(step.s), as_rows(pos_t) / c.position_scale)
        if s_logits_next is not None:
            l_s = ops.mean(ops.categorical_kl(s_logits_next, step.s_pred_logits, c.s_groups))
        else:
            l_s = zero_scalar()
        neg_h_z = ops.scale(ops.mean(ops.entropy(step.z_logits, c.z_groups)), -1.0)
        neg_h_s = ops.scale(ops.mean(ops.entropy(step.s_logits, c.s_groups)), -1.0)
        return combine_losses(l_obs, l_pos, l_s, neg_h_z, neg_h_s, c.beta_z, c.beta_s)

    # -- whole sequences (training path) --------------------------------------

    def sequence_noise(self, rng, T, B) -> SequenceNoise:
        c = self.config
        return SequenceNoise(z=ops.gumbel_noise(rng, (T, B, c.z_total)),
                             s=ops.gumbel_noise(rng, (T, B, c.s_total)),
                             s_pred=ops.gumbel_noise(rng, (T, B, c.s_total)))

    def sequence_loss(self, obs, actions, positions, noise: SequenceNoise) -> LossBreakdown:
        """Sum of per-step losses over (T, B) episodes, vectorised over time.

        Matches running :meth:`step` / :meth:`compute_losses` for t = 0..T-1 with a
        fresh store and zero hidden state per episode, losses averaged over the batch.
        """
        c = self.config
        p = self.params
        T, B, _ = obs.shape
        N = T * B
        O = obs.reshape(N, -1)
        A = onehot_actions(actions.reshape(-1), c.n_actions)
        A_prev = np.zeros_like(A)
        A_prev[B:] = A[:-B]

        z_logits = mlp(p, "enc_z", Tensor(O))
        z = self._sample(z_logits, noise.z.reshape(N, -1), c.z_groups)
        s_logits = mlp(p, "enc_s", Tensor(np.concatenate([O, A_prev], axis=1)))
        s = self._sample(s_logits, noise.s.reshape(N, -1), c.s_groups)

        gi = ops.linear(ops.concat([s, Tensor(A)], axis=1), p["gru.w_ih"], p["gru.b_ih"])
        hs = ops.gru_sequence(ops.reshape(gi, (T, B, -1)), np.zeros((B, c.h_size)),
                              p["gru.w_hh"], p["gru.b_hh"])
        sp_logits = ops.linear(ops.reshape(hs, (N, -1)), p["head_s.w"], p["head_s.b"])
        sp = self._sample(sp_logits, noise.s_pred.reshape(N, -1), c.s_groups)
        z_pred = dnd_causal_read(ops.reshape(sp, (T, B, -1)), ops.reshape(s, (T, B, -1)),
                                 ops.reshape(z, (T, B, -1)), c.top_k, c.kappa)

        decoded = self.decode(ops.concat([z, ops.reshape(z_pred, (N, -1))], axis=0))
        l_obs = ops.scale(self._mse(ops.take_rows(decoded, 0, N), O), T)
        l_pos = ops.scale(self._mse(self.position(s), positions.reshape(N, 2) / c.position_scale), T)
        if T > 1:
            pred = ops.take_rows(decoded, N, 2 * N - B)
            l_obs = ops.add(l_obs, ops.scale(self._mse(pred, O[B:]), T - 1))
            kl = ops.categorical_kl(ops.take_rows(s_logits, B, N), ops.take_rows(sp_logits, 0, N - B),
                                    c.s_groups)
            l_s = ops.scale(ops.total(kl), 1.0 / B)
        else:
            l_s = zero_scalar()
        neg_h_z = ops.scale(ops.total(ops.entropy(z_logits, c.z_groups)), -1.0 / B)
        neg_h_s = ops.scale(ops.total(ops.entropy(s_logits, c.s_groups)), -1.0 / B)
        return combine_losses(l_obs, l_pos, l_s, neg_h_z, neg_h_s, c.beta_z, c.beta_s)


def dswm_step(model: DSWM, store: DndStore, o_t, a_prev, a_t, h_prev, noise) -> DswmStep:
    return model.step(store, o_t, a_prev, a_t, h_prev, noise)
