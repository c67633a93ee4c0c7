# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled dilated 2-d convolution kernels.

Contract matches ``_conv_numpy``: same-padded cross-correlation, tap (a, b)
reads offset (dh*(a - kh//2), dw*(b - kw//2)), zero padding outside.  The
input is copied once into a zero-padded buffer so the tap loops are
branch-free, with the contiguous W axis innermost.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def _pad_amounts(Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t dh, Py_ssize_t dw):
    return dh * (kh // 2), dh * (kh - 1 - kh // 2), dw * (kw // 2), dw * (kw - 1 - kw // 2)


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] kernel, dilation):
    cdef Py_ssize_t B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = kernel.shape[0], kh = kernel.shape[2], kw = kernel.shape[3]
    cdef Py_ssize_t dh = dilation[0], dw = dilation[1]
    cdef Py_ssize_t top, bottom, left, right
    top, bottom, left, right = _pad_amounts(kh, kw, dh, dw)

    dtype = np.float32 if real is float else np.float64
    xp_arr = np.zeros((B, Cin, H + top + bottom, W + left + right), dtype=dtype)
    xp_arr[:, :, top:top + H, left:left + W] = np.asarray(x)
    out_arr = np.zeros((B, Cout, H, W), dtype=dtype)

    cdef real[:, :, :, ::1] xp = xp_arr
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, co, ci, a, bb, i, j, ioff, joff
    cdef real kv

    with nogil:
        for b in range(B):
            for co in range(Cout):
                for ci in range(Cin):
                    for a in range(kh):
                        for bb in range(kw):
                            kv = kernel[co, ci, a, bb]
                            ioff = a * dh
                            joff = bb * dw
                            for i in range(H):
                                for j in range(W):
                                    out[b, co, i, j] += kv * xp[b, ci, i + ioff, j + joff]
    return out_arr


def conv2d_backward_input(real[:, :, :, ::1] grad_out, real[:, :, :, ::1] kernel,
                          dilation, Py_ssize_t in_channels):
    cdef Py_ssize_t B = grad_out.shape[0], Cout = grad_out.shape[1]
    cdef Py_ssize_t H = grad_out.shape[2], W = grad_out.shape[3]
    cdef Py_ssize_t Cin = kernel.shape[1], kh = kernel.shape[2], kw = kernel.shape[3]
    cdef Py_ssize_t dh = dilation[0], dw = dilation[1]
    cdef Py_ssize_t top, bottom, left, right
    top, bottom, left, right = _pad_amounts(kh, kw, dh, dw)

    dtype = np.float32 if real is float else np.float64
    gxp_arr = np.zeros((B, Cin, H + top + bottom, W + left + right), dtype=dtype)

    cdef real[:, :, :, ::1] gxp = gxp_arr
    cdef Py_ssize_t b, co, ci, a, bb, i, j, ioff, joff
    cdef real kv

    with nogil:
        for b in range(B):
            for co in range(Cout):
                for ci in range(Cin):
                    for a in range(kh):
                        for bb in range(kw):
                            kv = kernel[co, ci, a, bb]
                            ioff = a * dh
                            joff = bb * dw
                            for i in range(H):
                                for j in range(W):
                                    gxp[b, ci, i + ioff, j + joff] += kv * grad_out[b, co, i, j]
    return np.ascontiguousarray(gxp_arr[:, :, top:top + H, left:left + W])


def conv2d_backward_kernel(real[:, :, :, ::1] x, real[:, :, :, ::1] grad_out,
                           kshape, dilation):
    cdef Py_ssize_t B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = kshape[0], kh = kshape[2], kw = kshape[3]
    cdef Py_ssize_t dh = dilation[0], dw = dilation[1]
    cdef Py_ssize_t top, bottom, left, right
    top, bottom, left, right = _pad_amounts(kh, kw, dh, dw)

    dtype = np.float32 if real is float else np.float64
    xp_arr = np.zeros((B, Cin, H + top + bottom, W + left + right), dtype=dtype)
    xp_arr[:, :, top:top + H, left:left + W] = np.asarray(x)
    gk_arr = np.zeros((Cout, Cin, kh, kw), dtype=dtype)

    cdef real[:, :, :, ::1] xp = xp_arr
    cdef real[:, :, :, ::1] gk = gk_arr
    cdef Py_ssize_t b, co, ci, a, bb, i, j, ioff, joff, w4
    # four partial sums break the accumulation dependency chain so the
    # reduction can pipeline/vectorize; summation order stays fixed
    cdef real a0, a1, a2, a3

    w4 = W - (W % 4)
    with nogil:
        for b in range(B):
            for co in range(Cout):
                for ci in range(Cin):
                    for a in range(kh):
                        for bb in range(kw):
                            ioff = a * dh
                            joff = bb * dw
                            a0 = 0
                            a1 = 0
                            a2 = 0
                            a3 = 0
                            for i in range(H):
                                j = 0
                                while j < w4:
                                    a0 += grad_out[b, co, i, j] * xp[b, ci, i + ioff, j + joff]
                                    a1 += grad_out[b, co, i, j + 1] * xp[b, ci, i + ioff, j + joff + 1]
                                    a2 += grad_out[b, co, i, j + 2] * xp[b, ci, i + ioff, j + joff + 2]
                                    a3 += grad_out[b, co, i, j + 3] * xp[b, ci, i + ioff, j + joff + 3]
                                    j += 4
                                while j < W:
                                    a0 += grad_out[b, co, i, j] * xp[b, ci, i + ioff, j + joff]
                                    j += 1
                            gk[co, ci, a, bb] += a0 + a1 + a2 + a3
    return gk_arr
