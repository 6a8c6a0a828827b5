"""Differentiable primitives used by the world models.

Every primitive takes and returns :class:`Tensor` objects and registers an exact
backward rule on the active tape. Inputs may be 1-D (single vector) or 2-D
(rows = batch). Grouped categorical ops treat each row as ``groups`` equal blocks.
"""

from __future__ import annotations

import numpy as np

from .. import kernels
from .tensor import Tensor, as_tensor, record

COS_EPS = 1e-12


def _rows(x):
    return x[None, :] if x.ndim == 1 else x


def _check_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise / structural ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_shape(a.data, b.data, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return record(a.data * c, (a,), lambda g: (g * c,))


def add_n(terms) -> Tensor:
    terms = [as_tensor(t) for t in terms]
    out = terms[0].data
    for t in terms[1:]:
        out = out + t.data
    return record(out, tuple(terms), lambda g: (g,) * len(terms))


def total(x) -> Tensor:
    x = as_tensor(x)
    shape = x.data.shape
    return record(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.data.shape, x.data.size
    return record(np.mean(x.data), (x,), lambda g: (np.full(shape, g / n),))


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(data, tuple(tensors), backward)


def take_rows(x, start, stop) -> Tensor:
    x = as_tensor(x)
    shape = x.data.shape

    def backward(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return record(x.data[start:stop], (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.data.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# -- layers ------------------------------------------------------------------

def linear(x, weight, bias) -> Tensor:
    """``weight @ x + bias`` for 1-D ``x``; row-wise for 2-D ``x``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    W, b = weight.data, bias.data
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.data.shape[-1] != W.shape[1]:
        raise ValueError(f"linear: shapes x{x.shape} W{W.shape} b{b.shape} do not agree")
    vec = x.data.ndim == 1
    xd = _rows(x.data)
    out = xd @ W.T + b

    def backward(g):
        g2 = _rows(g)
        gx = g2 @ W
        return (gx[0] if vec else gx, g2.T @ xd, g2.sum(axis=0))

    return record(out[0] if vec else out, (x, weight, bias), backward)


def swish(x) -> Tensor:
    x = as_tensor(x)
    xd = np.ascontiguousarray(_rows(x.data))
    y, sig = kernels.swish_fwd(xd)
    shape = x.data.shape
    return record(y.reshape(shape), (x,),
                  lambda g: (kernels.swish_bwd(np.ascontiguousarray(_rows(g)), xd, sig).reshape(shape),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 1.0 / (1.0 + np.exp(-x.data))
    return record(y, (x,), lambda g: (g * y * (1.0 - y),))


def gru_cell(x, h, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """One GRU step (reset, update and candidate gates, in that row order)."""
    x, h = as_tensor(x), as_tensor(h)
    w_ih, w_hh, b_ih, b_hh = map(as_tensor, (w_ih, w_hh, b_ih, b_hh))
    Hd = h.data.shape[-1]
    if w_hh.data.shape != (3 * Hd, Hd) or w_ih.data.shape[0] != 3 * Hd \
            or w_ih.data.shape[1] != x.data.shape[-1]:
        raise ValueError("gru_cell: weight shapes do not match input/hidden sizes")
    vec = h.data.ndim == 1
    xd, hd = _rows(x.data), np.ascontiguousarray(_rows(h.data))
    gi = np.ascontiguousarray(xd @ w_ih.data.T + b_ih.data)
    gh = np.ascontiguousarray(hd @ w_hh.data.T + b_hh.data)
    h_new, r, u, n = kernels.gru_fwd(gi, gh, hd)

    def backward(g):
        dgi, dgh, dh = kernels.gru_bwd(np.ascontiguousarray(_rows(g)), hd, gh, r, u, n)
        gx = dgi @ w_ih.data
        gh_prev = dh + dgh @ w_hh.data
        if vec:
            gx, gh_prev = gx[0], gh_prev[0]
        return gx, gh_prev, dgi.T @ xd, dgh.T @ hd, dgi.sum(0), dgh.sum(0)

    return record(h_new[0] if vec else h_new, (x, h, w_ih, w_hh, b_ih, b_hh), backward)


def gru_sequence(gi_seq, h0, w_hh, b_hh) -> Tensor:
    """Unrolled GRU over precomputed input projections.

    ``gi_seq`` is (T, B, 3H) = x_t @ W_ih.T + b_ih; returns the hidden states (T, B, H).
    Equivalent to chaining :func:`gru_cell` T times, as one tape node.
    """
    gi_seq, h0, w_hh, b_hh = map(as_tensor, (gi_seq, h0, w_hh, b_hh))
    T, B, H3 = gi_seq.data.shape
    H = H3 // 3
    W, bh = w_hh.data, b_hh.data
    hs = np.empty((T, B, H))
    saved = []
    h = np.ascontiguousarray(h0.data)
    for t in range(T):
        gh = np.ascontiguousarray(h @ W.T + bh)
        h_new, r, u, n = kernels.gru_fwd(np.ascontiguousarray(gi_seq.data[t]), gh, h)
        saved.append((h, gh, r, u, n))
        hs[t] = h_new
        h = h_new

    def backward(g):
        dgi_seq = np.empty_like(gi_seq.data)
        dW = np.zeros_like(W)
        db = np.zeros_like(bh)
        dh = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            h_prev, gh, r, u, n = saved[t]
            dgi, dgh, dh_direct = kernels.gru_bwd(np.ascontiguousarray(g[t] + dh), h_prev, gh, r, u, n)
            dgi_seq[t] = dgi
            dW += dgh.T @ h_prev
            db += dgh.sum(0)
            dh = dh_direct + dgh @ W
        return dgi_seq, dh, dW, db

    return record(hs, (gi_seq, h0, w_hh, b_hh), backward)


# -- categorical -------------------------------------------------------------

def _grouped(x, groups):
    n, d = x.shape
    if d % groups:
        raise ValueError(f"dimension {d} not divisible into {groups} groups")
    return x.reshape(n, groups, d // groups)


def log_softmax_np(logits, groups=1):
    x = _grouped(_rows(np.asarray(logits, dtype=np.float64)), groups)
    m = x.max(axis=2, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=2, keepdims=True))
    return x - lse


def softmax_np(logits, groups=1):
    x = np.asarray(logits, dtype=np.float64)
    y = kernels.softmax_groups(np.ascontiguousarray(_rows(x)), groups)
    return y[0] if x.ndim == 1 else y


def _softmax_of(z, inputs, groups, inv_t):
    vec = z.ndim == 1
    y = kernels.softmax_groups(np.ascontiguousarray(_rows(z)), groups)

    def backward(g):
        gx = kernels.softmax_groups_bwd(np.ascontiguousarray(_rows(g)), y, groups) * inv_t
        return (gx[0] if vec else gx,)

    return record(y[0] if vec else y, inputs, backward)


def softmax(logits, groups=1) -> Tensor:
    logits = as_tensor(logits)
    return _softmax_of(logits.data, (logits,), groups, 1.0)


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-300, 1.0 - 1e-16)))


def gumbel_softmax(logits, noise, temperature=1.0, groups=1) -> Tensor:
    """Soft gumbel-softmax sample with externally supplied gumbel noise."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = as_tensor(logits)
    z = (logits.data + noise) / temperature
    return _softmax_of(z, (logits,), groups, 1.0 / temperature)


def gumbel_softmax_sample(logits, temperature=1.0, seed=None, groups=1) -> Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    logits = as_tensor(logits)
    return gumbel_softmax(logits, gumbel_noise(rng, logits.data.shape), temperature, groups)


def categorical_kl(p_logits, q_logits, groups=1) -> Tensor:
    """KL(softmax(p) || softmax(q)), summed over groups; one value per row."""
    p_logits, q_logits = as_tensor(p_logits), as_tensor(q_logits)
    _check_shape(p_logits.data, q_logits.data, "categorical_kl")
    vec = p_logits.data.ndim == 1
    lp = log_softmax_np(p_logits.data, groups)
    lq = log_softmax_np(q_logits.data, groups)
    p, q = np.exp(lp), np.exp(lq)
    diff = lp - lq
    kl_g = (p * diff).sum(axis=2, keepdims=True)
    kl = kl_g.sum(axis=(1, 2))

    def backward(g):
        gg = np.reshape(g, (-1, 1, 1))
        gp = (gg * p * (diff - kl_g)).reshape(p.shape[0], -1)
        gq = (gg * (q - p)).reshape(p.shape[0], -1)
        if vec:
            gp, gq = gp[0], gq[0]
        return gp, gq

    return record(kl[0] if vec else kl, (p_logits, q_logits), backward)


def entropy(logits, groups=1) -> Tensor:
    """Entropy of softmax(logits), summed over groups; one value per row."""
    logits = as_tensor(logits)
    vec = logits.data.ndim == 1
    lp = log_softmax_np(logits.data, groups)
    p = np.exp(lp)
    h_g = -(p * lp).sum(axis=2, keepdims=True)
    h = h_g.sum(axis=(1, 2))

    def backward(g):
        gx = (-np.reshape(g, (-1, 1, 1)) * p * (lp + h_g)).reshape(p.shape[0], -1)
        return (gx[0] if vec else gx,)

    return record(h[0] if vec else h, (logits,), backward)


# -- losses / similarity -----------------------------------------------------

def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_shape(a.data, b.data, "mse")
    d = a.data - b.data
    n = d.size
    return record(np.mean(d * d), (a, b), lambda g: (2.0 * g * d / n, -2.0 * g * d / n))


def cosine_similarity(a, b) -> Tensor:
    """Row-wise cosine; 0 (with zero gradient) when either norm is below 1e-12."""
    a, b = as_tensor(a), as_tensor(b)
    _check_shape(a.data, b.data, "cosine_similarity")
    vec = a.data.ndim == 1
    ad, bd = _rows(a.data), _rows(b.data)
    na = np.sqrt((ad * ad).sum(1))
    nb = np.sqrt((bd * bd).sum(1))
    ok = (na >= COS_EPS) & (nb >= COS_EPS)
    dot = (ad * bd).sum(1)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(ok, dot / (na * nb), 0.0)
        inv = np.where(ok, 1.0 / (na * nb), 0.0)
        ca = np.where(ok, c / (na * na), 0.0)
        cb = np.where(ok, c / (nb * nb), 0.0)

    def backward(g):
        g = np.reshape(g, (-1, 1))
        ga = g * (bd * inv[:, None] - ad * ca[:, None])
        gb = g * (ad * inv[:, None] - bd * cb[:, None])
        return (ga[0], gb[0]) if vec else (ga, gb)

    return record(c[0] if vec else c, (a, b), backward)
