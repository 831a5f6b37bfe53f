# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the conv/filter/resampling kernels.

Signatures mirror ``_pykernels``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def im2col3d(double[:, :, :, :, ::1] x, int k):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t X = x.shape[2], Y = x.shape[3], Z = x.shape[4]
    cdef Py_ssize_t p = k // 2
    cdef Py_ssize_t ncol = B * X * Y * Z
    out = np.empty((C * k * k * k, ncol))
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t c, a, b, d, bi, i, j, l, row, base, si, sj, l0, l1, shift
    with nogil:
        for c in range(C):
            for a in range(k):
                for b in range(k):
                    for d in range(k):
                        row = ((c * k + a) * k + b) * k + d
                        # valid z range for this tap, hoisted out of the inner loop
                        l0 = p - d if p > d else 0
                        l1 = Z + p - d if d > p else Z
                        shift = d - p
                        for bi in range(B):
                            for i in range(X):
                                si = i + a - p
                                for j in range(Y):
                                    sj = j + b - p
                                    base = ((bi * X + i) * Y + j) * Z
                                    if si < 0 or si >= X or sj < 0 or sj >= Y:
                                        for l in range(Z):
                                            cols[row, base + l] = 0.0
                                        continue
                                    for l in range(l0):
                                        cols[row, base + l] = 0.0
                                    for l in range(l0, l1):
                                        cols[row, base + l] = x[bi, c, si, sj, l + shift]
                                    for l in range(l1, Z):
                                        cols[row, base + l] = 0.0
    return out


def col2im3d(double[:, ::1] cols, shape, int k):
    cdef Py_ssize_t B = shape[0], C = shape[1], X = shape[2], Y = shape[3], Z = shape[4]
    cdef Py_ssize_t p = k // 2
    out = np.zeros((B, C, X, Y, Z))
    cdef double[:, :, :, :, ::1] dx = out
    cdef Py_ssize_t c, a, b, d, bi, i, j, l, row, base, si, sj, l0, l1
    with nogil:
        for c in range(C):
            for a in range(k):
                for b in range(k):
                    for d in range(k):
                        row = ((c * k + a) * k + b) * k + d
                        l0 = p - d if p > d else 0
                        l1 = Z + p - d if d > p else Z
                        for bi in range(B):
                            for i in range(X):
                                si = i + a - p
                                if si < 0 or si >= X:
                                    continue
                                for j in range(Y):
                                    sj = j + b - p
                                    if sj < 0 or sj >= Y:
                                        continue
                                    base = ((bi * X + i) * Y + j) * Z
                                    for l in range(l0, l1):
                                        dx[bi, c, si, sj, l + d - p] += cols[row, base + l]
    return out


def box_mean3(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    nd = arr.ndim
    lead = arr.shape[:nd - 3]
    cdef Py_ssize_t X = arr.shape[nd - 3], Y = arr.shape[nd - 2], Z = arr.shape[nd - 1]
    cdef double[:, :, :, ::1] v = arr.reshape((-1, X, Y, Z))
    cdef Py_ssize_t M = v.shape[0]
    s1 = np.zeros((M, X, Y, Z))
    s2 = np.zeros((M, X, Y, Z))
    out = np.zeros((M, X, Y, Z))
    cdef double[:, :, :, ::1] a1 = s1
    cdef double[:, :, :, ::1] a2 = s2
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t m, i, j, l
    cdef double acc
    with nogil:
        for m in range(M):
            for i in range(X):
                for j in range(Y):
                    for l in range(Z):
                        acc = v[m, i, j, l]
                        if i > 0:
                            acc = acc + v[m, i - 1, j, l]
                        if i < X - 1:
                            acc = acc + v[m, i + 1, j, l]
                        a1[m, i, j, l] = acc
            for i in range(X):
                for j in range(Y):
                    for l in range(Z):
                        acc = a1[m, i, j, l]
                        if j > 0:
                            acc = acc + a1[m, i, j - 1, l]
                        if j < Y - 1:
                            acc = acc + a1[m, i, j + 1, l]
                        a2[m, i, j, l] = acc
            for i in range(X):
                for j in range(Y):
                    for l in range(Z):
                        acc = a2[m, i, j, l]
                        if l > 0:
                            acc = acc + a2[m, i, j, l - 1]
                        if l < Z - 1:
                            acc = acc + a2[m, i, j, l + 1]
                        o[m, i, j, l] = acc / 27.0
    return out.reshape(lead + (X, Y, Z))


def trilinear_sample(double[:, :, ::1] vol, double[:, ::1] coords):
    cdef Py_ssize_t X = vol.shape[0], Y = vol.shape[1], Z = vol.shape[2]
    cdef Py_ssize_t M = coords.shape[1]
    out = np.zeros(M)
    cdef double[::1] o = out
    cdef Py_ssize_t m, x0, y0, z0, ix, iy, iz, dx, dy, dz
    cdef double fx, fy, fz, wx, wy, wz, acc
    with nogil:
        for m in range(M):
            x0 = <Py_ssize_t>floor(coords[0, m])
            y0 = <Py_ssize_t>floor(coords[1, m])
            z0 = <Py_ssize_t>floor(coords[2, m])
            fx = coords[0, m] - x0
            fy = coords[1, m] - y0
            fz = coords[2, m] - z0
            acc = 0.0
            for dx in range(2):
                ix = x0 + dx
                wx = fx if dx else 1.0 - fx
                for dy in range(2):
                    iy = y0 + dy
                    wy = fy if dy else 1.0 - fy
                    for dz in range(2):
                        iz = z0 + dz
                        wz = fz if dz else 1.0 - fz
                        if ix >= 0 and ix < X and iy >= 0 and iy < Y and iz >= 0 and iz < Z:
                            acc = acc + wx * wy * wz * vol[ix, iy, iz]
            o[m] = acc
    return out


def nearest_sample(vol, double[:, ::1] coords):
    cdef cnp.int64_t[:, :, ::1] v = np.ascontiguousarray(vol, dtype=np.int64)
    cdef Py_ssize_t X = v.shape[0], Y = v.shape[1], Z = v.shape[2]
    cdef Py_ssize_t M = coords.shape[1]
    out = np.zeros(M, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    cdef Py_ssize_t m, ix, iy, iz
    with nogil:
        for m in range(M):
            ix = <Py_ssize_t>floor(coords[0, m] + 0.5)
            iy = <Py_ssize_t>floor(coords[1, m] + 0.5)
            iz = <Py_ssize_t>floor(coords[2, m] + 0.5)
            if ix >= 0 and ix < X and iy >= 0 and iy < Y and iz >= 0 and iz < Z:
                o[m] = v[ix, iy, iz]
    return out
