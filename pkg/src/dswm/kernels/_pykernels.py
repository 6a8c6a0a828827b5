"""Pure-numpy implementations of the hot kernels.

Mirrors ``_ckernels.pyx`` function for function. The DND read forward pass uses
strictly sequential reductions (``cumsum``) and libm ``exp`` so that its output is
bit-identical to the compiled kernel and to a naive loop.
"""

import math

import numpy as np

NAME = "python"
EPS = 1e-12


def swish_fwd(x):
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, sig


def swish_bwd(gy, x, sig):
    return gy * (sig + x * sig * (1.0 - sig))


def gru_fwd(gi, gh, h):
    H = h.shape[1]
    r = 1.0 / (1.0 + np.exp(-(gi[:, :H] + gh[:, :H])))
    u = 1.0 / (1.0 + np.exp(-(gi[:, H:2 * H] + gh[:, H:2 * H])))
    n = np.tanh(gi[:, 2 * H:] + r * gh[:, 2 * H:])
    h_new = (1.0 - u) * n + u * h
    return h_new, r, u, n


def gru_bwd(g, h, gh, r, u, n):
    H = h.shape[1]
    dn = g * (1.0 - u) * (1.0 - n * n)
    du = g * (h - n) * u * (1.0 - u)
    dr = dn * gh[:, 2 * H:] * r * (1.0 - r)
    dgi = np.concatenate([dr, du, dn], axis=1)
    dgh = np.concatenate([dr, du, dn * r], axis=1)
    return dgi, dgh, g * u


def softmax_groups(x, groups):
    N, D = x.shape
    xg = x.reshape(N, groups, D // groups)
    e = np.exp(xg - xg.max(axis=2, keepdims=True))
    return (e / e.sum(axis=2, keepdims=True)).reshape(N, D)


def softmax_groups_bwd(gy, y, groups):
    N, D = y.shape
    yg = y.reshape(N, groups, D // groups)
    gg = gy.reshape(N, groups, D // groups)
    return (yg * (gg - (yg * gg).sum(axis=2, keepdims=True))).reshape(N, D)


def _seqsum(a):
    return np.cumsum(a, axis=-1)[..., -1]


def dnd_read_fwd(queries, keys, values, qb, qn, k, kappa):
    """Top-k cosine / softmax read.

    queries (M, Dk); keys (B, N, Dk); values (B, N, Dv); query ``i`` sees the first
    ``qn[i]`` entries of memory ``qb[i]``. Returns (out, sel, w, c, qnorm, knorm);
    ``sel`` is -1 padded when fewer than ``k`` entries are visible.
    """
    M, _ = queries.shape
    B, N, _ = keys.shape
    Dv = values.shape[2]
    qnorm = np.sqrt(_seqsum(queries * queries))
    knorm = np.sqrt(_seqsum(keys * keys))
    kb = keys[qb]  # (M, N, Dk)
    dots = _seqsum(queries[:, None, :] * kb)
    kn = knorm[qb]
    valid_norm = (qnorm[:, None] >= EPS) & (kn >= EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(valid_norm, dots / (qnorm[:, None] * kn), 0.0)
    visible = np.arange(N)[None, :] < qn[:, None]
    order = np.argsort(np.where(visible, -cos, np.inf), axis=1, kind="stable")[:, :k]
    kk = order.shape[1]
    take = np.arange(kk)[None, :] < np.minimum(qn, k)[:, None]
    sel = np.where(take, order, -1)
    c = np.where(take, np.take_along_axis(cos, order, axis=1), 0.0)
    x = c / kappa
    xmax = x[:, :1]
    shifted = x - xmax
    e = np.zeros_like(c)
    for i, j in zip(*np.nonzero(take)):
        e[i, j] = math.exp(shifted[i, j])
    z = _seqsum(e)
    w = e / z[:, None]
    sel_vals = values[qb[:, None], np.where(take, order, 0)]  # (M, kk, Dv)
    out = np.zeros((M, Dv))
    for j in range(kk):
        out = out + w[:, j, None] * np.where(take[:, j, None], sel_vals[:, j], 0.0)
    if kk < k:
        pad = k - kk
        sel = np.concatenate([sel, -np.ones((M, pad), dtype=sel.dtype)], axis=1)
        w = np.concatenate([w, np.zeros((M, pad))], axis=1)
        c = np.concatenate([c, np.zeros((M, pad))], axis=1)
    return out, sel.astype(np.int64), w, c, qnorm, knorm


def dnd_read_bwd(gout, queries, keys, values, qb, sel, w, c, qnorm, knorm, kappa):
    M, Dk = queries.shape
    B, N, _ = keys.shape
    gq = np.zeros_like(queries)
    gk = np.zeros_like(keys)
    gv = np.zeros_like(values)
    take = sel >= 0
    idx = np.where(take, sel, 0)
    bcol = np.broadcast_to(qb[:, None], sel.shape)
    vsel = values[bcol, idx]  # (M, k, Dv)
    ksel = keys[bcol, idx]
    gw = np.einsum("md,mkd->mk", gout, vsel) * take
    s = (w * gw).sum(axis=1, keepdims=True)
    gc = w * (gw - s) / kappa
    np.add.at(gv, (bcol[take], idx[take]), (w[:, :, None] * gout[:, None, :])[take])
    kn = knorm[bcol, idx]
    qn = qnorm[:, None]
    ok = take & (qn >= EPS) & (kn >= EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(ok, gc / (qn * kn), 0.0)
        bq = np.where(ok, gc * c / (qn * qn), 0.0)
        bk = np.where(ok, gc * c / (kn * kn), 0.0)
    gq += np.einsum("mk,mkd->md", a, ksel) - bq.sum(axis=1, keepdims=True) * queries
    gks = a[:, :, None] * queries[:, None, :] - bk[:, :, None] * ksel
    np.add.at(gk, (bcol[ok], idx[ok]), gks[ok])
    return gq, gk, gv
