"""Episode-scoped differentiable neural dictionary.

Keys are context samples, values are content samples. A read takes the cosine
similarity of the query to every stored key, keeps the ``top_k`` best (earlier
entries win ties), weights them by ``softmax(similarity / kappa)`` and returns
the weighted sum of their values. Gradients reach the query and the stored
key/value tensors.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .numerics.ops import reshape
from .numerics.tensor import Tensor, as_tensor, record

TOP_K = 5
KAPPA = 0.1


def dnd_read(query, keys, values, top_k=TOP_K, kappa=KAPPA) -> Tensor:
    """Read a (B, Dk) query batch against per-row memories.

    ``keys``/``values`` are sequences of (B, D) tensors, one per write.
    """
    query = as_tensor(query)
    if not keys:
        raise ValueError("cannot read from an empty DND store")
    keys = [as_tensor(k) for k in keys]
    values = [as_tensor(v) for v in values]
    K = np.ascontiguousarray(np.stack([k.data for k in keys], axis=1))
    V = np.ascontiguousarray(np.stack([v.data for v in values], axis=1))
    q = np.ascontiguousarray(query.data)
    B, N = K.shape[0], K.shape[1]
    qb = np.arange(B, dtype=np.int64)
    qn = np.full(B, N, dtype=np.int64)
    out, sel, w, c, qnorm, knorm = kernels.dnd_read_fwd(q, K, V, qb, qn, top_k, kappa)

    def backward(g):
        gq, gk, gv = kernels.dnd_read_bwd(np.ascontiguousarray(g), q, K, V, qb, sel, w, c, qnorm, knorm, kappa)
        used = np.zeros(N, dtype=bool)
        used[sel[sel >= 0]] = True
        gks = [gk[:, j] if used[j] else None for j in range(N)]
        gvs = [gv[:, j] if used[j] else None for j in range(N)]
        return [gq] + gks + gvs

    return record(out, [query] + keys + values, backward)


def dnd_causal_read(queries, keys, values, top_k=TOP_K, kappa=KAPPA) -> Tensor:
    """Time-batched reads: query ``t`` sees the entries written at steps ``0..t``.

    All arguments are (T, B, D) tensors; equivalent to writing ``keys[t]`` /
    ``values[t]`` into a per-episode store and then reading ``queries[t]``.
    """
    queries, keys, values = as_tensor(queries), as_tensor(keys), as_tensor(values)
    T, B, Dk = queries.data.shape
    Dv = values.data.shape[2]
    q = np.ascontiguousarray(queries.data.reshape(T * B, Dk))
    K = np.ascontiguousarray(keys.data.transpose(1, 0, 2))
    V = np.ascontiguousarray(values.data.transpose(1, 0, 2))
    qb = np.tile(np.arange(B, dtype=np.int64), T)
    qn = np.repeat(np.arange(1, T + 1, dtype=np.int64), B)
    out, sel, w, c, qnorm, knorm = kernels.dnd_read_fwd(q, K, V, qb, qn, top_k, kappa)

    def backward(g):
        gq, gk, gv = kernels.dnd_read_bwd(np.ascontiguousarray(g.reshape(T * B, Dv)), q, K, V, qb,
                                          sel, w, c, qnorm, knorm, kappa)
        return gq.reshape(T, B, Dk), gk.transpose(1, 0, 2), gv.transpose(1, 0, 2)

    return record(out.reshape(T, B, Dv), (queries, keys, values), backward)


def read_weights(query, keys, top_k=TOP_K, kappa=KAPPA):
    """Selected indices and softmax weights for a single (Dk,) query (diagnostics)."""
    K = np.ascontiguousarray(np.asarray(keys, dtype=np.float64)[None])
    V = np.zeros((1, K.shape[1], 1))
    q = np.ascontiguousarray(np.asarray(query, dtype=np.float64)[None])
    _, sel, w, _, _, _ = kernels.dnd_read_fwd(q, K, V, np.zeros(1, np.int64),
                                              np.array([K.shape[1]], np.int64), top_k, kappa)
    keep = sel[0] >= 0
    return sel[0][keep], w[0][keep]


class DndStore:
    """Append-only key/value memory for one episode (or a batch of episodes).

    Keys and values are (B, D) tensors; row ``b`` of each belongs to episode ``b``,
    so a batched store behaves like ``B`` independent stores written in lockstep.
    """

    def __init__(self, key_dim=49, value_dim=128, top_k=TOP_K, kappa=KAPPA):
        self.key_dim = key_dim
        self.value_dim = value_dim
        self.top_k = top_k
        self.kappa = kappa
        self.keys: list[Tensor] = []
        self.values: list[Tensor] = []
        self.reads = 0

    def __len__(self):
        return len(self.keys)

    @property
    def size(self) -> int:
        return len(self.keys)

    def _batched(self, x, dim, what):
        x = as_tensor(x)
        if x.data.ndim == 1:
            x = reshape(x, (1, -1))
        if x.data.ndim != 2 or x.data.shape[1] != dim:
            raise ValueError(f"{what} has shape {x.data.shape}, store expects (B, {dim})")
        return x

    def write(self, key, value) -> "DndStore":
        key = self._batched(key, self.key_dim, "key")
        value = self._batched(value, self.value_dim, "value")
        if key.data.shape[0] != value.data.shape[0]:
            raise ValueError("key and value batch sizes differ")
        if self.keys and key.data.shape[0] != self.keys[0].data.shape[0]:
            raise ValueError("batch size differs from earlier writes")
        self.keys.append(key)
        self.values.append(value)
        return self

    def read(self, query) -> Tensor:
        """Read; a 1-D query returns a 1-D value."""
        if not self.keys:
            raise ValueError("cannot read from an empty DND store")
        query = as_tensor(query)
        vec = query.data.ndim == 1
        q = self._batched(query, self.key_dim, "query")
        if q.data.shape[0] != self.keys[0].data.shape[0]:
            raise ValueError("query batch size differs from stored entries")
        self.reads += 1
        out = dnd_read(q, self.keys, self.values, self.top_k, self.kappa)
        return reshape(out, (-1,)) if vec else out

    def reset(self) -> "DndStore":
        self.keys = []
        self.values = []
        self.reads = 0
        return self
