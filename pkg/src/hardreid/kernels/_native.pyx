# cython: boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled counterparts of hardreid.kernels.pyref.

Same contracts and the same lowest-index tie-breaking as the reference
module; the backend-equivalence tests keep the two in lockstep.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, sqrt

cnp.import_array()

BACKEND_NAME = "native"

MINING_BATCH_HARD = 0
MINING_BATCH_ALL = 1


def pairwise_distance(features, double eps):
    f = np.ascontiguousarray(features, dtype=np.float64)
    cdef double[:, ::1] fv = f
    cdef Py_ssize_t n = fv.shape[0]
    cdef Py_ssize_t dim = fv.shape[1]
    out = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, k
    cdef double s, diff, dij
    for i in range(n):
        for j in range(i + 1, n):
            s = 0.0
            for k in range(dim):
                diff = fv[i, k] - fv[j, k]
                s += diff * diff
            dij = sqrt(s + eps)
            ov[i, j] = dij
            ov[j, i] = dij
    return out


def pairwise_distance_backward(features, dist, grad_dist):
    f = np.ascontiguousarray(features, dtype=np.float64)
    d = np.ascontiguousarray(dist, dtype=np.float64)
    g = np.ascontiguousarray(grad_dist, dtype=np.float64)
    cdef double[:, ::1] fv = f
    cdef double[:, ::1] dv = d
    cdef double[:, ::1] gv = g
    cdef Py_ssize_t n = fv.shape[0]
    cdef Py_ssize_t dim = fv.shape[1]
    out = np.zeros((n, dim), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, k
    cdef double w
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if dv[i, j] > 0.0:
                w = (gv[i, j] + gv[j, i]) / dv[i, j]
                for k in range(dim):
                    ov[i, k] += w * (fv[i, k] - fv[j, k])
    return out


def triplet_forward_backward(dist, labels, double margin, int mining):
    d = np.ascontiguousarray(dist, dtype=np.float64)
    y = np.ascontiguousarray(labels, dtype=np.int64)
    cdef double[:, ::1] dv = d
    cdef cnp.int64_t[::1] yv = y
    cdef Py_ssize_t n = dv.shape[0]
    grad = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] gv = grad

    cdef Py_ssize_t a, j, p
    cdef double dp, dn, h, coeff, dap
    cdef double loss_sum = 0.0
    cdef long long n_valid = 0
    cdef long long n_active = 0
    cdef long long n_terms = 0
    cdef long long npos, nneg
    cdef cnp.intp_t[::1] p_star
    cdef cnp.intp_t[::1] n_star
    cdef double[::1] hinge
    cdef cnp.uint8_t[::1] valid

    if mining == MINING_BATCH_HARD:
        p_star = np.zeros(n, dtype=np.intp)
        n_star = np.zeros(n, dtype=np.intp)
        hinge = np.zeros(n, dtype=np.float64)
        valid = np.zeros(n, dtype=np.uint8)
        for a in range(n):
            dp = -INFINITY
            dn = INFINITY
            for j in range(n):
                if j == a:
                    continue
                if yv[j] == yv[a]:
                    if dv[a, j] > dp:
                        dp = dv[a, j]
                        p_star[a] = j
                else:
                    if dv[a, j] < dn:
                        dn = dv[a, j]
                        n_star[a] = j
            if dp > -INFINITY and dn < INFINITY:
                valid[a] = 1
                n_valid += 1
                h = dp - dn + margin
                if h > 0.0:
                    hinge[a] = h
                    loss_sum += h
        if n_valid == 0:
            return 0.0, grad, 0, 0
        coeff = 1.0 / n_valid
        for a in range(n):
            if valid[a] and hinge[a] > 0.0:
                n_active += 1
                gv[a, p_star[a]] += coeff
                gv[a, n_star[a]] -= coeff
        return loss_sum / n_valid, grad, int(n_active), int(n_valid)

    if mining == MINING_BATCH_ALL:
        for a in range(n):
            npos = 0
            nneg = 0
            for j in range(n):
                if j == a:
                    continue
                if yv[j] == yv[a]:
                    npos += 1
                else:
                    nneg += 1
            n_terms += npos * nneg
        if n_terms == 0:
            return 0.0, grad, 0, 0
        coeff = 1.0 / n_terms
        for a in range(n):
            for p in range(n):
                if p == a or yv[p] != yv[a]:
                    continue
                dap = dv[a, p]
                for j in range(n):
                    if yv[j] == yv[a]:
                        continue
                    h = dap - dv[a, j] + margin
                    if h > 0.0:
                        loss_sum += h
                        gv[a, p] += coeff
                        gv[a, j] -= coeff
                        n_active += 1
        return loss_sum / n_terms, grad, int(n_active), int(n_terms)

    raise ValueError(f"unknown mining code: {mining!r}")
