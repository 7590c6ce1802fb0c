"""Pure-numpy 3D convolution kernels (fallback backend).

Forward and weight-gradient use depth-chunked im2col + GEMM so the scratch
buffer stays bounded even on large volumes; the input gradient scatters one
kernel tap at a time.  All functions take/return contiguous arrays in
channels-first layout: inputs (C, D, H, W), kernels (O, C, kd, kh, kw).
"""

import numpy as np

NAME = "numpy"

# cap on the im2col scratch buffer, in elements
_CHUNK_ELEMS = 4_000_000


def _pad(x, padding):
    pd, ph, pw = padding
    if pd == 0 and ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))


def out_extent(extent, kernel, stride, pad):
    return (extent + 2 * pad - kernel) // stride + 1


def _windows(xp, kshape, stride):
    """Strided view of all kernel-sized windows: (C, Do, Ho, Wo, kd, kh, kw)."""
    sd, sh, sw = stride
    win = np.lib.stride_tricks.sliding_window_view(xp, kshape, axis=(1, 2, 3))
    return win[:, ::sd, ::sh, ::sw]


def _depth_chunks(n_out_depth, per_slice_elems):
    step = max(1, _CHUNK_ELEMS // max(1, per_slice_elems))
    for lo in range(0, n_out_depth, step):
        yield lo, min(lo + step, n_out_depth)


def conv3d_forward(x, w, stride, padding):
    c_in, kd, kh, kw = w.shape[1:]
    xp = _pad(x, padding)
    win = _windows(xp, (kd, kh, kw), stride)
    _, do, ho, wo = (w.shape[0],) + win.shape[1:4]
    out = np.empty((w.shape[0], do, ho, wo), dtype=x.dtype)
    wmat = w.reshape(w.shape[0], -1)
    for lo, hi in _depth_chunks(do, ho * wo * c_in * kd * kh * kw):
        # im2col copy of the chunk: (n_vox, C*kd*kh*kw)
        col = win[:, lo:hi].transpose(1, 2, 3, 0, 4, 5, 6).reshape((hi - lo) * ho * wo, -1)
        out[:, lo:hi] = (col @ wmat.T).T.reshape(w.shape[0], hi - lo, ho, wo)
    return out


def conv3d_grad_weight(x, grad_out, w_shape, stride, padding):
    o, c_in, kd, kh, kw = w_shape
    xp = _pad(x, padding)
    win = _windows(xp, (kd, kh, kw), stride)
    do, ho, wo = grad_out.shape[1:]
    gw = np.zeros((o, c_in * kd * kh * kw), dtype=x.dtype)
    for lo, hi in _depth_chunks(do, ho * wo * c_in * kd * kh * kw):
        col = win[:, lo:hi].transpose(1, 2, 3, 0, 4, 5, 6).reshape((hi - lo) * ho * wo, -1)
        g = grad_out[:, lo:hi].reshape(o, -1)
        gw += g @ col
    return gw.reshape(w_shape)


def conv3d_grad_input(w, grad_out, x_shape, stride, padding):
    o, c_in, kd, kh, kw = w.shape
    sd, sh, sw = stride
    pd, ph, pw = padding
    _, d, h, wid = (c_in,) + x_shape[1:]
    do, ho, wo = grad_out.shape[1:]
    gxp = np.zeros((c_in, d + 2 * pd, h + 2 * ph, wid + 2 * pw), dtype=grad_out.dtype)
    # one scatter per kernel tap; each is a full strided-slice FMA
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                contrib = np.tensordot(w[:, :, i, j, k], grad_out, axes=([0], [0]))
                gxp[:, i : i + sd * do : sd, j : j + sh * ho : sh, k : k + sw * wo : sw] += contrib
    if pd or ph or pw:
        gxp = gxp[:, pd : pd + d, ph : ph + h, pw : pw + wid]
    return np.ascontiguousarray(gxp)
