# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; same API as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, tanh, INFINITY

cnp.import_array()

NAME = "cython"
EPS = 1e-12
cdef double _EPS = 1e-12


def swish_fwd(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    y = np.empty((n, d))
    sig = np.empty((n, d))
    cdef double[:, ::1] yv = y, sv = sig
    cdef double s
    for i in range(n):
        for j in range(d):
            s = 1.0 / (1.0 + exp(-x[i, j]))
            sv[i, j] = s
            yv[i, j] = x[i, j] * s
    return y, sig


def swish_bwd(double[:, ::1] gy, double[:, ::1] x, double[:, ::1] sig):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    gx = np.empty((n, d))
    cdef double[:, ::1] gv = gx
    cdef double s
    for i in range(n):
        for j in range(d):
            s = sig[i, j]
            gv[i, j] = gy[i, j] * (s + x[i, j] * s * (1.0 - s))
    return gx


def gru_fwd(double[:, ::1] gi, double[:, ::1] gh, double[:, ::1] h):
    cdef Py_ssize_t B = h.shape[0], H = h.shape[1], b, j
    h_new = np.empty((B, H))
    r = np.empty((B, H))
    u = np.empty((B, H))
    n = np.empty((B, H))
    cdef double[:, ::1] hv = h_new, rv = r, uv = u, nv = n
    cdef double rr, uu, nn
    for b in range(B):
        for j in range(H):
            rr = 1.0 / (1.0 + exp(-(gi[b, j] + gh[b, j])))
            uu = 1.0 / (1.0 + exp(-(gi[b, H + j] + gh[b, H + j])))
            nn = tanh(gi[b, 2 * H + j] + rr * gh[b, 2 * H + j])
            rv[b, j] = rr
            uv[b, j] = uu
            nv[b, j] = nn
            hv[b, j] = (1.0 - uu) * nn + uu * h[b, j]
    return h_new, r, u, n


def gru_bwd(double[:, ::1] g, double[:, ::1] h, double[:, ::1] gh,
            double[:, ::1] r, double[:, ::1] u, double[:, ::1] n):
    cdef Py_ssize_t B = h.shape[0], H = h.shape[1], b, j
    dgi = np.empty((B, 3 * H))
    dgh = np.empty((B, 3 * H))
    dh = np.empty((B, H))
    cdef double[:, ::1] dgiv = dgi, dghv = dgh, dhv = dh
    cdef double dn, du, dr, rr, uu, nn
    for b in range(B):
        for j in range(H):
            rr = r[b, j]
            uu = u[b, j]
            nn = n[b, j]
            dn = g[b, j] * (1.0 - uu) * (1.0 - nn * nn)
            du = g[b, j] * (h[b, j] - nn) * uu * (1.0 - uu)
            dr = dn * gh[b, 2 * H + j] * rr * (1.0 - rr)
            dgiv[b, j] = dr
            dgiv[b, H + j] = du
            dgiv[b, 2 * H + j] = dn
            dghv[b, j] = dr
            dghv[b, H + j] = du
            dghv[b, 2 * H + j] = dn * rr
            dhv[b, j] = g[b, j] * uu
    return dgi, dgh, dh


def softmax_groups(double[:, ::1] x, Py_ssize_t groups):
    cdef Py_ssize_t N = x.shape[0], D = x.shape[1], K = D // groups, i, g, j, o
    y = np.empty((N, D))
    cdef double[:, ::1] yv = y
    cdef double m, z
    for i in range(N):
        for g in range(groups):
            o = g * K
            m = x[i, o]
            for j in range(1, K):
                if x[i, o + j] > m:
                    m = x[i, o + j]
            z = 0.0
            for j in range(K):
                yv[i, o + j] = exp(x[i, o + j] - m)
                z += yv[i, o + j]
            for j in range(K):
                yv[i, o + j] /= z
    return y


def softmax_groups_bwd(double[:, ::1] gy, double[:, ::1] y, Py_ssize_t groups):
    cdef Py_ssize_t N = y.shape[0], D = y.shape[1], K = D // groups, i, g, j, o
    gx = np.empty((N, D))
    cdef double[:, ::1] gv = gx
    cdef double s
    for i in range(N):
        for g in range(groups):
            o = g * K
            s = 0.0
            for j in range(K):
                s += y[i, o + j] * gy[i, o + j]
            for j in range(K):
                gv[i, o + j] = y[i, o + j] * (gy[i, o + j] - s)
    return gx


def dnd_read_fwd(double[:, ::1] queries, double[:, :, ::1] keys, double[:, :, ::1] values,
                 cnp.int64_t[::1] qb, cnp.int64_t[::1] qn, Py_ssize_t k, double kappa):
    cdef Py_ssize_t M = queries.shape[0], Dk = queries.shape[1]
    cdef Py_ssize_t B = keys.shape[0], N = keys.shape[1], Dv = values.shape[2]
    cdef Py_ssize_t i, j, d, b, n, kk, t, best_j
    out = np.zeros((M, Dv))
    sel = -np.ones((M, k), dtype=np.int64)
    w = np.zeros((M, k))
    c = np.zeros((M, k))
    qnorm = np.empty(M)
    knorm = np.empty((B, N))
    cos = np.empty(N)
    taken = np.empty(N, dtype=np.uint8)
    cdef double[:, ::1] outv = out, wv = w, cv = c, knv = knorm
    cdef cnp.int64_t[:, ::1] selv = sel
    cdef double[::1] qnv = qnorm, cosv = cos
    cdef unsigned char[::1] tk = taken
    cdef double acc, qq, best, m, z
    for b in range(B):
        for j in range(N):
            acc = 0.0
            for d in range(Dk):
                acc += keys[b, j, d] * keys[b, j, d]
            knv[b, j] = sqrt(acc)
    for i in range(M):
        b = qb[i]
        n = qn[i]
        acc = 0.0
        for d in range(Dk):
            acc += queries[i, d] * queries[i, d]
        qq = sqrt(acc)
        qnv[i] = qq
        for j in range(n):
            acc = 0.0
            for d in range(Dk):
                acc += queries[i, d] * keys[b, j, d]
            if qq >= _EPS and knv[b, j] >= _EPS:
                cosv[j] = acc / (qq * knv[b, j])
            else:
                cosv[j] = 0.0
            tk[j] = 0
        kk = k if n > k else n
        for t in range(kk):
            best = -INFINITY
            best_j = -1
            for j in range(n):
                if tk[j] == 0 and (best_j < 0 or cosv[j] > best):
                    best = cosv[j]
                    best_j = j
            tk[best_j] = 1
            selv[i, t] = best_j
            cv[i, t] = best
        m = cv[i, 0] / kappa
        z = 0.0
        for t in range(kk):
            wv[i, t] = exp(cv[i, t] / kappa - m)
        for t in range(kk):
            z += wv[i, t]
        for t in range(kk):
            wv[i, t] = wv[i, t] / z
        for d in range(Dv):
            acc = 0.0
            for t in range(kk):
                acc += wv[i, t] * values[b, selv[i, t], d]
            outv[i, d] = acc
    return out, sel, w, c, qnorm, knorm


def dnd_read_bwd(double[:, ::1] gout, double[:, ::1] queries, double[:, :, ::1] keys,
                 double[:, :, ::1] values, cnp.int64_t[::1] qb, cnp.int64_t[:, ::1] sel,
                 double[:, ::1] w, double[:, ::1] c, double[::1] qnorm, double[:, ::1] knorm,
                 double kappa):
    cdef Py_ssize_t M = queries.shape[0], Dk = queries.shape[1], K = sel.shape[1]
    cdef Py_ssize_t B = keys.shape[0], N = keys.shape[1], Dv = values.shape[2]
    cdef Py_ssize_t i, t, j, d, b
    gq = np.zeros((M, Dk))
    gk = np.zeros((B, N, Dk))
    gv = np.zeros((B, N, Dv))
    gw = np.zeros(K)
    cdef double[:, ::1] gqv = gq
    cdef double[:, :, ::1] gkv = gk, gvv = gv
    cdef double[::1] gwv = gw
    cdef double s, gc, qn, kn, a, acc
    for i in range(M):
        b = qb[i]
        qn = qnorm[i]
        s = 0.0
        for t in range(K):
            j = sel[i, t]
            if j < 0:
                break
            acc = 0.0
            for d in range(Dv):
                acc += gout[i, d] * values[b, j, d]
                gvv[b, j, d] += w[i, t] * gout[i, d]
            gwv[t] = acc
            s += w[i, t] * acc
        for t in range(K):
            j = sel[i, t]
            if j < 0:
                break
            gc = w[i, t] * (gwv[t] - s) / kappa
            kn = knorm[b, j]
            if qn < _EPS or kn < _EPS:
                continue
            a = gc / (qn * kn)
            for d in range(Dk):
                gqv[i, d] += a * keys[b, j, d] - gc * c[i, t] / (qn * qn) * queries[i, d]
                gkv[b, j, d] += a * queries[i, d] - gc * c[i, t] / (kn * kn) * keys[b, j, d]
    return gq, gk, gv
