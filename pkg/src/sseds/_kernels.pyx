# cython: language_level=3
"""Compiled inner loops for embedding training.

Every routine mirrors a function of the same name in ``_kernels_py`` and
accumulates in a fixed sequential order so results are run-to-run stable.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport sqrt, sqrtf

cnp.import_array()


def scatter_add_rows(floating[:, ::1] out, const cnp.int64_t[::1] index,
                     const floating[:, ::1] vals):
    cdef Py_ssize_t r, j, k
    cdef Py_ssize_t n = vals.shape[0], d = vals.shape[1]
    with nogil:
        for r in range(n):
            k = index[r]
            for j in range(d):
                out[k, j] += vals[r, j]


def fm_forward(const floating[:, :, ::1] E):
    """Pairwise FM term via the square-of-sum identity; returns (fm, S)."""
    cdef Py_ssize_t n = E.shape[0], m = E.shape[1], d = E.shape[2]
    cdef Py_ssize_t r, i, j
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    S_arr = np.zeros((n, d), dtype=dtype)
    Q_arr = np.zeros((n, d), dtype=dtype)
    fm_arr = np.zeros(n, dtype=dtype)
    cdef floating[:, ::1] S = S_arr
    cdef floating[:, ::1] Q = Q_arr
    cdef floating[::1] fm = fm_arr
    cdef floating acc, e, half = 0.5
    with nogil:
        for r in range(n):
            for i in range(m):
                for j in range(d):
                    e = E[r, i, j]
                    S[r, j] += e
                    Q[r, j] += e * e
            acc = 0
            for j in range(d):
                acc += S[r, j] * S[r, j] - Q[r, j]
            fm[r] = half * acc
    return fm_arr, S_arr


def fm_backward(const floating[:, :, ::1] E, const floating[:, ::1] S,
                const floating[::1] dz):
    cdef Py_ssize_t n = E.shape[0], m = E.shape[1], d = E.shape[2]
    cdef Py_ssize_t r, i, j
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty((n, m, d), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef floating g
    with nogil:
        for r in range(n):
            g = dz[r]
            for i in range(m):
                for j in range(d):
                    out[r, i, j] = g * (S[r, j] - E[r, i, j])
    return out_arr


def sparse_adam(floating[:, ::1] param, const cnp.int64_t[::1] rows,
                const floating[:, ::1] grad, floating[:, ::1] m1,
                floating[:, ::1] m2, double lr, double beta1, double beta2,
                double eps, double bc1, double bc2):
    """Lazy Adam on the listed rows only; untouched rows keep their moments."""
    cdef Py_ssize_t k, j, row
    cdef Py_ssize_t n = rows.shape[0], d = grad.shape[1]
    cdef floating b1 = beta1, b2 = beta2, c1 = 1.0 - beta1, c2 = 1.0 - beta2
    cdef floating step = lr / bc1, inv_bc2 = 1.0 / bc2, ep = eps
    cdef floating g, a, b
    with nogil:
        for k in range(n):
            row = rows[k]
            for j in range(d):
                g = grad[k, j]
                a = b1 * m1[row, j] + c1 * g
                b = b2 * m2[row, j] + c2 * (g * g)
                m1[row, j] = a
                m2[row, j] = b
                if floating is float:
                    param[row, j] -= step * a / (sqrtf(b * inv_bc2) + ep)
                else:
                    param[row, j] -= step * a / (sqrt(b * inv_bc2) + ep)


def slot_grad_reduce(const floating[:, :, ::1] dE, const floating[:, :, ::1] E):
    """Sum over records of dE * E, giving one value per (field, dim)."""
    cdef Py_ssize_t n = E.shape[0], m = E.shape[1], d = E.shape[2]
    cdef Py_ssize_t r, i, j
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((m, d), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    with nogil:
        for r in range(n):
            for i in range(m):
                for j in range(d):
                    out[i, j] += dE[r, i, j] * E[r, i, j]
    return out_arr
