# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled dark-polarity FRST vote accumulation (one radius)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport round

cnp.import_array()


def accumulate_votes(double[:, :, ::1] gx, double[:, :, ::1] gy, double[:, :, ::1] gz,
                     double[:, :, ::1] mag, double threshold, int radius):
    cdef Py_ssize_t X = mag.shape[0], Y = mag.shape[1], Z = mag.shape[2]
    orient = np.zeros((X, Y, Z), dtype=np.float64)
    magnitude = np.zeros((X, Y, Z), dtype=np.float64)
    cdef double[:, :, ::1] O = orient
    cdef double[:, :, ::1] M = magnitude
    cdef Py_ssize_t i, j, k, qi, qj, qk
    cdef double m
    with nogil:
        for i in range(X):
            for j in range(Y):
                for k in range(Z):
                    m = mag[i, j, k]
                    if m <= threshold or m <= 0.0:
                        continue
                    qi = i - <Py_ssize_t>round(gx[i, j, k] / m * radius)
                    qj = j - <Py_ssize_t>round(gy[i, j, k] / m * radius)
                    qk = k - <Py_ssize_t>round(gz[i, j, k] / m * radius)
                    if qi < 0 or qi >= X or qj < 0 or qj >= Y or qk < 0 or qk >= Z:
                        continue
                    O[qi, qj, qk] += 1.0
                    M[qi, qj, qk] += m
    return orient, magnitude
