# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled implementations of the hot kernels (stride-1 conv2d, labeling)."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

NAME = "cython"


def conv2d_forward(cnp.ndarray x_in, cnp.ndarray w_in, cnp.ndarray b_in, int pad):
    cdef const double[:, :, :, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef const double[:, :, :, ::1] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef const double[::1] b = np.ascontiguousarray(b_in, dtype=np.float64)
    cdef int n = x.shape[0], c = x.shape[1], h = x.shape[2], ww = x.shape[3]
    cdef int f = w.shape[0], k = w.shape[2]
    cdef int ho = h + 2 * pad - k + 1, wo = ww + 2 * pad - k + 1
    out_arr = np.empty((n, f, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef int i, j, oy, ox, ci, ky, kx, iy, ix
    cdef double acc
    with nogil:
        for i in range(n):
            for j in range(f):
                for oy in range(ho):
                    for ox in range(wo):
                        acc = b[j]
                        for ci in range(c):
                            for ky in range(k):
                                iy = oy + ky - pad
                                if iy < 0 or iy >= h:
                                    continue
                                for kx in range(k):
                                    ix = ox + kx - pad
                                    if ix < 0 or ix >= ww:
                                        continue
                                    acc += w[j, ci, ky, kx] * x[i, ci, iy, ix]
                        out[i, j, oy, ox] = acc
    return out_arr


def conv2d_backward(cnp.ndarray x_in, cnp.ndarray w_in, cnp.ndarray dy_in, int pad):
    cdef const double[:, :, :, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef const double[:, :, :, ::1] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef const double[:, :, :, ::1] dy = np.ascontiguousarray(dy_in, dtype=np.float64)
    cdef int n = x.shape[0], c = x.shape[1], h = x.shape[2], ww = x.shape[3]
    cdef int f = w.shape[0], k = w.shape[2]
    cdef int ho = dy.shape[2], wo = dy.shape[3]
    dx_arr = np.zeros((n, c, h, ww), dtype=np.float64)
    dw_arr = np.zeros((f, c, k, k), dtype=np.float64)
    db_arr = np.zeros(f, dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef int i, j, oy, ox, ci, ky, kx, iy, ix
    cdef double g
    with nogil:
        for i in range(n):
            for j in range(f):
                for oy in range(ho):
                    for ox in range(wo):
                        g = dy[i, j, oy, ox]
                        db[j] += g
                        for ci in range(c):
                            for ky in range(k):
                                iy = oy + ky - pad
                                if iy < 0 or iy >= h:
                                    continue
                                for kx in range(k):
                                    ix = ox + kx - pad
                                    if ix < 0 or ix >= ww:
                                        continue
                                    dw[j, ci, ky, kx] += g * x[i, ci, iy, ix]
                                    dx[i, ci, iy, ix] += g * w[j, ci, ky, kx]
    return dx_arr, dw_arr, db_arr


def label_components(cnp.ndarray mask_in):
    """4-connected labeling; labels assigned in first-encounter row-major order."""
    cdef const cnp.uint8_t[:, ::1] mask = np.ascontiguousarray(mask_in, dtype=np.uint8)
    cdef int h = mask.shape[0], w = mask.shape[1]
    labels_arr = np.zeros((h, w), dtype=np.int32)
    cdef int[:, ::1] labels = labels_arr
    stack_arr = np.empty(h * w, dtype=np.int32)
    cdef int[::1] stack = stack_arr
    cdef int n = 0, top, r, cc, pos, y, x
    for r in range(h):
        for cc in range(w):
            if mask[r, cc] and labels[r, cc] == 0:
                n += 1
                top = 0
                stack[top] = r * w + cc
                top += 1
                labels[r, cc] = n
                while top > 0:
                    top -= 1
                    pos = stack[top]
                    y = pos // w
                    x = pos - y * w
                    if y > 0 and mask[y - 1, x] and labels[y - 1, x] == 0:
                        labels[y - 1, x] = n
                        stack[top] = pos - w
                        top += 1
                    if y + 1 < h and mask[y + 1, x] and labels[y + 1, x] == 0:
                        labels[y + 1, x] = n
                        stack[top] = pos + w
                        top += 1
                    if x > 0 and mask[y, x - 1] and labels[y, x - 1] == 0:
                        labels[y, x - 1] = n
                        stack[top] = pos - 1
                        top += 1
                    if x + 1 < w and mask[y, x + 1] and labels[y, x + 1] == 0:
                        labels[y, x + 1] = n
                        stack[top] = pos + 1
                        top += 1
    return labels_arr, n
