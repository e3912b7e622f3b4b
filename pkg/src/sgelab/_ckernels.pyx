# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row-wise sampling kernels (twin of ``_kernels_py``)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def log_softmax_rows(logits, temps):
    cdef const double[:, ::1] z = np.ascontiguousarray(logits, dtype=np.float64)
    cdef const double[::1] t = np.ascontiguousarray(temps, dtype=np.float64)
    cdef Py_ssize_t n = z.shape[0], v = z.shape[1], i, j
    out = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double m, s, lse
    with nogil:
        for i in range(n):
            m = z[i, 0]
            for j in range(1, v):
                if z[i, j] > m:
                    m = z[i, j]
            s = 0.0
            for j in range(v):
                o[i, j] = (z[i, j] - m) / t[i]
                s += exp(o[i, j])
            lse = log(s)
            for j in range(v):
                o[i, j] -= lse
    return out


def sample_rows(logits, temps, uniforms):
    cdef const double[:, ::1] z = np.ascontiguousarray(logits, dtype=np.float64)
    cdef const double[::1] t = np.ascontiguousarray(temps, dtype=np.float64)
    cdef const double[::1] u = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef Py_ssize_t n = z.shape[0], v = z.shape[1], i, j, tok, last
    tokens = np.empty(n, dtype=np.int64)
    logprobs = np.empty(n, dtype=np.float64)
    cdef long long[::1] tk = tokens
    cdef double[::1] lp = logprobs
    cdef double[::1] e = np.empty(v, dtype=np.float64)
    cdef double m, s, acc, target
    with nogil:
        for i in range(n):
            m = z[i, 0]
            for j in range(1, v):
                if z[i, j] > m:
                    m = z[i, j]
            s = 0.0
            for j in range(v):
                e[j] = exp((z[i, j] - m) / t[i])
                s += e[j]
            target = u[i] * s
            acc = 0.0
            tok = v - 1
            last = 0
            for j in range(v):
                if e[j] > 0.0:
                    last = j
                acc += e[j]
                if acc > target and e[j] > 0.0:
                    tok = j
                    break
            else:
                tok = last
            tk[i] = tok
            lp[i] = (z[i, tok] - m) / t[i] - log(s)
    return tokens, logprobs


def entropy_rows(logits, temps):
    cdef const double[:, ::1] z = np.ascontiguousarray(logits, dtype=np.float64)
    cdef const double[::1] t = np.ascontiguousarray(temps, dtype=np.float64)
    cdef Py_ssize_t n = z.shape[0], v = z.shape[1], i, j
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] h = out
    cdef double m, s, w, zj, ej
    with nogil:
        for i in range(n):
            m = z[i, 0]
            for j in range(1, v):
                if z[i, j] > m:
                    m = z[i, j]
            s = 0.0
            w = 0.0
            for j in range(v):
                zj = (z[i, j] - m) / t[i]
                ej = exp(zj)
                s += ej
                w += ej * zj
            h[i] = log(s) - w / s
    return out


def clip_surrogate(ratios, advantages, double eps):
    cdef const double[::1] r = np.ascontiguousarray(ratios, dtype=np.float64)
    cdef const double[::1] a = np.ascontiguousarray(advantages, dtype=np.float64)
    cdef Py_ssize_t n = r.shape[0], i
    terms = np.empty(n, dtype=np.float64)
    coef = np.empty(n, dtype=np.float64)
    clipped = np.empty(n, dtype=np.bool_)
    cdef double[::1] tm = terms
    cdef double[::1] cf = coef
    cdef cnp.npy_bool[::1] cl = clipped
    cdef double rc, unc, clv
    with nogil:
        for i in range(n):
            rc = r[i]
            if rc < 1.0 - eps:
                rc = 1.0 - eps
            elif rc > 1.0 + eps:
                rc = 1.0 + eps
            unc = r[i] * a[i]
            clv = rc * a[i]
            if clv < unc:
                tm[i] = clv
                cf[i] = 0.0
                cl[i] = 1
            else:
                tm[i] = unc
                cf[i] = a[i]
                cl[i] = 0
    return terms, coef, clipped
