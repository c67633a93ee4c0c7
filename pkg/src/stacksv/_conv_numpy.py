"""Pure-NumPy dilated 2-d convolution kernels (fallback backend).

Same-padded cross-correlation: tap (a, b) of the kernel reads the input at
spatial offset (dh*(a - kh//2), dw*(b - kw//2)), zero outside bounds.  The
compiled backend in ``_convkern.pyx`` implements the identical contract;
``kernels.py`` picks one at import time.
"""

import numpy as np


def _pad_amounts(kh, kw, dh, dw):
    top = dh * (kh // 2)
    bottom = dh * (kh - 1 - kh // 2)
    left = dw * (kw // 2)
    right = dw * (kw - 1 - kw // 2)
    return top, bottom, left, right


def conv2d_forward(x, kernel, dilation):
    """x: (B, Cin, H, W), kernel: (Cout, Cin, kh, kw) -> (B, Cout, H, W)."""
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = kernel.shape
    dh, dw = dilation
    top, bottom, left, right = _pad_amounts(kh, kw, dh, dw)
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    out = np.zeros((B, Cout, H, W), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            window = xp[:, :, a * dh:a * dh + H, b * dw:b * dw + W]
            out += np.einsum("oc,bchw->bohw", kernel[:, :, a, b], window,
                             optimize=True)
    return out


def conv2d_backward_input(grad_out, kernel, dilation, in_channels):
    """grad_out: (B, Cout, H, W) -> grad w.r.t. input, (B, Cin, H, W)."""
    B, Cout, H, W = grad_out.shape
    _, Cin, kh, kw = kernel.shape
    dh, dw = dilation
    top, bottom, left, right = _pad_amounts(kh, kw, dh, dw)
    gxp = np.zeros((B, Cin, H + top + bottom, W + left + right),
                   dtype=grad_out.dtype)
    for a in range(kh):
        for b in range(kw):
            contrib = np.einsum("oc,bohw->bchw", kernel[:, :, a, b], grad_out,
                                optimize=True)
            gxp[:, :, a * dh:a * dh + H, b * dw:b * dw + W] += contrib
    return gxp[:, :, top:top + H, left:left + W]


def conv2d_backward_kernel(x, grad_out, kshape, dilation):
    """Gradient w.r.t. the kernel, shape (Cout, Cin, kh, kw)."""
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = kshape
    dh, dw = dilation
    top, bottom, left, right = _pad_amounts(kh, kw, dh, dw)
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    gk = np.zeros(kshape, dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            window = xp[:, :, a * dh:a * dh + H, b * dw:b * dw + W]
            gk[:, :, a, b] = np.einsum("bohw,bchw->oc", grad_out, window,
                                       optimize=True)
    return gk
