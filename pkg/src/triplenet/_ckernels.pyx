# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: patch extraction for convolution and greedy NMS."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fmax, fmin

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n_img = x.shape[0], chans = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    cols_arr = np.zeros((n_img * ho * wo, chans * kh * kw), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t n, oy, ox, c, ky, kx, iy, ix, row, col
    with nogil:
        for n in range(n_img):
            for oy in range(ho):
                for ox in range(wo):
                    row = (n * ho + oy) * wo + ox
                    col = 0
                    for c in range(chans):
                        for ky in range(kh):
                            iy = oy * stride - pad + ky
                            for kx in range(kw):
                                ix = ox * stride - pad + kx
                                if 0 <= iy < h and 0 <= ix < w:
                                    cols[row, col] = x[n, c, iy, ix]
                                col += 1
    return cols_arr


def col2im(const double[:, ::1] cols, int n_img, int chans, int h, int w,
           int kh, int kw, int stride, int pad):
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n_img, chans, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, oy, ox, c, ky, kx, iy, ix, row, col
    with nogil:
        for n in range(n_img):
            for oy in range(ho):
                for ox in range(wo):
                    row = (n * ho + oy) * wo + ox
                    col = 0
                    for c in range(chans):
                        for ky in range(kh):
                            iy = oy * stride - pad + ky
                            for kx in range(kw):
                                ix = ox * stride - pad + kx
                                if 0 <= iy < h and 0 <= ix < w:
                                    out[n, c, iy, ix] += cols[row, col]
                                col += 1
    return out_arr


def nms(const double[:, ::1] corners, const long[::1] order, double thresh):
    """Greedy suppression over boxes visited in ``order``; returns kept indices."""
    cdef Py_ssize_t m = order.shape[0]
    cdef Py_ssize_t a, b, i, j
    cdef double ix1, iy1, ix2, iy2, inter, area_i, area_j, union_
    suppressed_arr = np.zeros(m, dtype=np.uint8)
    cdef unsigned char[::1] suppressed = suppressed_arr
    keep = []
    for a in range(m):
        if suppressed[a]:
            continue
        i = order[a]
        keep.append(i)
        area_i = (corners[i, 2] - corners[i, 0]) * (corners[i, 3] - corners[i, 1])
        for b in range(a + 1, m):
            if suppressed[b]:
                continue
            j = order[b]
            ix1 = fmax(corners[i, 0], corners[j, 0])
            iy1 = fmax(corners[i, 1], corners[j, 1])
            ix2 = fmin(corners[i, 2], corners[j, 2])
            iy2 = fmin(corners[i, 3], corners[j, 3])
            if ix2 <= ix1 or iy2 <= iy1:
                continue
            inter = (ix2 - ix1) * (iy2 - iy1)
            area_j = (corners[j, 2] - corners[j, 0]) * (corners[j, 3] - corners[j, 1])
            union_ = area_i + area_j - inter
            if union_ > 0 and inter / union_ >= thresh:
                suppressed[b] = 1
    return keep
