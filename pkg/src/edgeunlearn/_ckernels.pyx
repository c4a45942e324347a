# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Every routine here has a bit-identical twin in
:mod:`edgeunlearn._pykernels`; build with ``-ffp-contract=off`` so no FMA
contraction changes the rounding sequence.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def gemm_f32(const float[:, ::1] a, const float[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], kk = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, j, k
    cdef float aik
    out = np.zeros((m, n), dtype=np.float32)
    cdef float[:, ::1] c = out
    with nogil:
        for i in range(m):
            for k in range(kk):
                aik = a[i, k]
                for j in range(n):
                    c[i, j] = c[i, j] + aik * b[k, j]
    return out


def square_accumulate(double[::1] acc, const float[:, ::1] grads):
    cdef Py_ssize_t n_samples = grads.shape[0], p = grads.shape[1]
    cdef Py_ssize_t s, j
    cdef double g
    with nogil:
        for s in range(n_samples):
            for j in range(p):
                g = <double>grads[s, j]
                acc[j] = acc[j] + g * g


def dampen_f32(float[::1] theta, const float[::1] imp_f, const float[::1] imp_d,
               float alpha, float lam, float[::1] beta_out):
    """Returns a uint8 selection mask; ``beta_out`` receives beta where selected.

    Callers validate inputs first; this loop never raises.
    """
    cdef Py_ssize_t p = theta.shape[0], i
    cdef float thr, beta
    mask_arr = np.zeros(p, dtype=np.uint8)
    cdef unsigned char[::1] mask = mask_arr
    with nogil:
        for i in range(p):
            thr = alpha * imp_d[i]
            if imp_f[i] > thr:
                beta = (lam * imp_d[i]) / imp_f[i]
                if beta > 1.0:
                    beta = 1.0
                mask[i] = 1
                beta_out[i] = beta
                theta[i] = beta * theta[i]
    return mask_arr
