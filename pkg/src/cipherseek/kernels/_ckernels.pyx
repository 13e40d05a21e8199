# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled scoring kernels.

Ciphertext scoring is the hot loop of every query strategy: each candidate
costs two dense dot products against the trapdoor halves. These wrappers go
straight to BLAS and skip per-call numpy dispatch, which matters when the
tree searches score one leaf at a time.
"""

from scipy.linalg.cython_blas cimport ddot, dgemv


def paired_dot(const double[::1] c1, const double[::1] c2,
               const double[::1] t1, const double[::1] t2):
    """Return c1.t1 + c2.t2 for one ciphertext/trapdoor pair."""
    cdef int n = c1.shape[0]
    cdef int one = 1
    if n == 0:
        return 0.0
    return (ddot(&n, <double*>&c1[0], &one, <double*>&t1[0], &one)
            + ddot(&n, <double*>&c2[0], &one, <double*>&t2[0], &one))


def paired_gemv(const double[:, ::1] c1, const double[:, ::1] c2,
                const double[::1] t1, const double[::1] t2,
                double[::1] out):
    """out[i] = c1[i].t1 + c2[i].t2 for a (d, v) block of ciphertexts.

    A row-major (d, v) buffer is a column-major (v, d) matrix, so trans='T'
    yields the row-wise products.
    """
    cdef int d = c1.shape[0]
    cdef int v = c1.shape[1]
    cdef int one = 1
    cdef double alpha = 1.0, beta0 = 0.0, beta1 = 1.0
    if d == 0:
        return
    if v == 0:
        out[:] = 0.0
        return
    dgemv("T", &v, &d, &alpha, <double*>&c1[0, 0], &v, <double*>&t1[0], &one, &beta0, &out[0], &one)
    dgemv("T", &v, &d, &alpha, <double*>&c2[0, 0], &v, <double*>&t2[0], &one, &beta1, &out[0], &one)


def accumulate_pair_sums(const double[:, ::1] t1, const double[:, ::1] t2,
                         double[::1] s1, double[::1] s2):
    """Kahan-compensated column sums of a trapdoor batch, added into s1/s2.

    Keeps the training accumulation independent of batch boundaries to well
    below the 1e-9 reassociation tolerance.
    """
    cdef Py_ssize_t m = t1.shape[0]
    cdef Py_ssize_t v = t1.shape[1]
    cdef Py_ssize_t i, j
    cdef double y, t, c
    for j in range(v):
        c = 0.0
        for i in range(m):
            y = t1[i, j] - c
            t = s1[j] + y
            c = (t - s1[j]) - y
            s1[j] = t
    for j in range(v):
        c = 0.0
        for i in range(m):
            y = t2[i, j] - c
            t = s2[j] + y
            c = (t - s2[j]) - y
            s2[j] = t
