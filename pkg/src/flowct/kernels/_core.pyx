# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 3D convolution kernels (hot-loop backend).

Implicit-GEMM formulation: every pass runs a register-tiled micro-kernel
(6 positions x 16 channel lanes) that streams kernel taps straight out of
a channels-last copy of the input, so nothing materialises an im2col
matrix.  The Python wrappers do the layout shuffles once per call.
Single-threaded and deterministic: every output element accumulates in a
fixed order.  Same contract as numpy_backend: inputs (C, D, H, W),
kernels (O, C, kd, kh, kw), explicit stride/padding triples.
"""

import numpy as np

cimport cython

ctypedef fused floating:
    float
    double

NAME = "cython"


def _pad(x, padding):
    pd, ph, pw = padding
    if pd == 0 and ph == 0 and pw == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))


def out_extent(extent, kernel, stride, pad):
    return (extent + 2 * pad - kernel) // stride + 1


def _tap_offsets(xh, xw, kd, kh, kw, nc):
    """Flat offsets of every kernel tap inside the channels-last padded input."""
    i, j, k = np.meshgrid(np.arange(kd), np.arange(kh), np.arange(kw), indexing="ij")
    return (((i * xh + j) * xw + k) * nc).ravel().astype(np.intp)


def _pad_cols(mat, width):
    if mat.shape[1] == width:
        return np.ascontiguousarray(mat)
    out = np.zeros((mat.shape[0], width), dtype=mat.dtype)
    out[:, :mat.shape[1]] = mat
    return out


def conv3d_forward(x, w, stride, padding):
    xp = _pad(x, padding)
    nc, xd, xh, xw = xp.shape
    no = w.shape[0]
    do = out_extent(x.shape[1], w.shape[2], stride[0], padding[0])
    ho = out_extent(x.shape[2], w.shape[3], stride[1], padding[1])
    wo = out_extent(x.shape[3], w.shape[4], stride[2], padding[2])
    no_pad = ((no + 15) // 16) * 16
    xt = np.ascontiguousarray(np.moveaxis(xp, 0, -1))
    wt = _pad_cols(np.transpose(w, (2, 3, 4, 1, 0)).reshape(-1, no).astype(x.dtype, copy=False),
                   no_pad)
    out_t = np.empty((do * ho * wo, no), dtype=x.dtype)
    offs = _tap_offsets(xh, xw, w.shape[2], w.shape[3], w.shape[4], nc)
    args = (offs, nc, no, no_pad, do, ho, wo, xh, xw, stride[0], stride[1], stride[2])
    if x.dtype == np.float32:
        _forward_t[float](xt.reshape(-1), wt.reshape(-1), out_t.reshape(-1), *args)
    else:
        _forward_t[double](xt.reshape(-1), wt.reshape(-1), out_t.reshape(-1), *args)
    return np.ascontiguousarray(out_t.reshape(do, ho, wo, no).transpose(3, 0, 1, 2))


def conv3d_grad_weight(x, grad_out, w_shape, stride, padding):
    xp = _pad(x, padding)
    nc, xd, xh, xw = xp.shape
    no, _, kd, kh, kw = w_shape
    do, ho, wo = grad_out.shape[1:]
    no_pad = ((no + 15) // 16) * 16
    xt = np.ascontiguousarray(np.moveaxis(xp, 0, -1))
    gt = _pad_cols(np.moveaxis(grad_out, 0, -1).reshape(-1, no).astype(x.dtype, copy=False),
                   no_pad)
    gw_t = np.zeros((kd * kh * kw * nc, no_pad), dtype=x.dtype)
    offs = _tap_offsets(xh, xw, kd, kh, kw, nc)
    args = (offs, nc, no_pad, do, ho, wo, xh, xw, stride[0], stride[1], stride[2])
    if x.dtype == np.float32:
        _grad_weight_t[float](xt.reshape(-1), gt.reshape(-1), gw_t.reshape(-1), *args)
    else:
        _grad_weight_t[double](xt.reshape(-1), gt.reshape(-1), gw_t.reshape(-1), *args)
    gw = gw_t.reshape(kd, kh, kw, nc, no_pad)[..., :no]
    return np.ascontiguousarray(gw.transpose(4, 3, 0, 1, 2))


def conv3d_grad_input(w, grad_out, x_shape, stride, padding):
    pd, ph, pw = padding
    nc = x_shape[0]
    xd, xh, xw = x_shape[1] + 2 * pd, x_shape[2] + 2 * ph, x_shape[3] + 2 * pw
    no, _, kd, kh, kw = w.shape
    do, ho, wo = grad_out.shape[1:]
    gt = np.ascontiguousarray(np.moveaxis(grad_out, 0, -1))
    wt = np.ascontiguousarray(np.transpose(w, (0, 2, 3, 4, 1)), dtype=grad_out.dtype)
    gx_t = np.zeros((xd * xh * xw, nc), dtype=grad_out.dtype)
    offs = _tap_offsets(xh, xw, kd, kh, kw, nc)
    args = (offs, nc, no, do, ho, wo, xh, xw, stride[0], stride[1], stride[2])
    if grad_out.dtype == np.float32:
        _grad_input_t[float](wt.reshape(-1), gt.reshape(-1), gx_t.reshape(-1), *args)
    else:
        _grad_input_t[double](wt.reshape(-1), gt.reshape(-1), gx_t.reshape(-1), *args)
    gxp = np.ascontiguousarray(gx_t.reshape(xd, xh, xw, nc).transpose(3, 0, 1, 2))
    if pd or ph or pw:
        return np.ascontiguousarray(
            gxp[:, pd:pd + x_shape[1], ph:ph + x_shape[2], pw:pw + x_shape[3]])
    return gxp


# Position-block walker: fills xb[0..rr-1] with the flat channels-last
# offsets of up to six consecutive output positions, handling row wraps.
# State lives in the caller so the sweep can resume block after block.


@cython.boundscheck(False)
cdef void _forward_t(const floating[::1] xt, const floating[::1] wt, floating[::1] out_t,
                     const Py_ssize_t[::1] offs,
                     Py_ssize_t nc, Py_ssize_t no, Py_ssize_t no_pad,
                     Py_ssize_t do, Py_ssize_t ho, Py_ssize_t wo,
                     Py_ssize_t xh, Py_ssize_t xw,
                     Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw) noexcept nogil:
    cdef Py_ssize_t nk = offs.shape[0]
    cdef Py_ssize_t row_d = sd * xh * xw * nc, row_h = sh * xw * nc, step_w = sw * nc
    cdef Py_ssize_t npos = do * ho * wo
    cdef Py_ssize_t pos, r, rr, t, c, i, ob, cw, od, oh, ow, base
    cdef Py_ssize_t xb[6]
    cdef floating a0, a1, a2, a3, a4, a5
    cdef floating t0[16]
    cdef floating t1[16]
    cdef floating t2[16]
    cdef floating t3[16]
    cdef floating t4[16]
    cdef floating t5[16]
    cdef const floating *x0
    cdef const floating *x1
    cdef const floating *x2
    cdef const floating *x3
    cdef const floating *x4
    cdef const floating *x5
    cdef const floating *wrow
    cdef floating *orow
    for ob in range(0, no, 16):
        cw = no - ob
        if cw > 16:
            cw = 16
        od = 0
        oh = 0
        ow = 0
        base = 0
        pos = 0
        while pos < npos:
            rr = npos - pos
            if rr > 6:
                rr = 6
            for r in range(rr):
                xb[r] = base
                ow += 1
                base += step_w
                if ow == wo:
                    ow = 0
                    oh += 1
                    if oh == ho:
                        oh = 0
                        od += 1
                    base = od * row_d + oh * row_h
            for r in range(rr, 6):
                xb[r] = xb[0]
            for i in range(16):
                t0[i] = 0
                t1[i] = 0
                t2[i] = 0
                t3[i] = 0
                t4[i] = 0
                t5[i] = 0
            for t in range(nk):
                x0 = &xt[xb[0] + offs[t]]
                x1 = &xt[xb[1] + offs[t]]
                x2 = &xt[xb[2] + offs[t]]
                x3 = &xt[xb[3] + offs[t]]
                x4 = &xt[xb[4] + offs[t]]
                x5 = &xt[xb[5] + offs[t]]
                wrow = &wt[t * nc * no_pad + ob]
                for c in range(nc):
                    a0 = x0[c]
                    a1 = x1[c]
                    a2 = x2[c]
                    a3 = x3[c]
                    a4 = x4[c]
                    a5 = x5[c]
                    for i in range(16):
                        t0[i] = t0[i] + a0 * wrow[i]
                        t1[i] = t1[i] + a1 * wrow[i]
                        t2[i] = t2[i] + a2 * wrow[i]
                        t3[i] = t3[i] + a3 * wrow[i]
                        t4[i] = t4[i] + a4 * wrow[i]
                        t5[i] = t5[i] + a5 * wrow[i]
                    wrow += no_pad
            orow = &out_t[pos * no + ob]
            for i in range(cw):
                orow[i] = t0[i]
            if rr > 1:
                orow += no
                for i in range(cw):
                    orow[i] = t1[i]
            if rr > 2:
                orow += no
                for i in range(cw):
                    orow[i] = t2[i]
            if rr > 3:
                orow += no
                for i in range(cw):
                    orow[i] = t3[i]
            if rr > 4:
                orow += no
                for i in range(cw):
                    orow[i] = t4[i]
            if rr > 5:
                orow += no
                for i in range(cw):
                    orow[i] = t5[i]
            pos += rr


@cython.boundscheck(False)
cdef void _grad_weight_t(const floating[::1] xt, const floating[::1] gt, floating[::1] gw_t,
                         const Py_ssize_t[::1] offs,
                         Py_ssize_t nc, Py_ssize_t no_pad,
                         Py_ssize_t do, Py_ssize_t ho, Py_ssize_t wo,
                         Py_ssize_t xh, Py_ssize_t xw,
                         Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw) noexcept nogil:
    cdef Py_ssize_t nk = offs.shape[0]
    cdef Py_ssize_t row_d = sd * xh * xw * nc, row_h = sh * xw * nc, step_w = sw * nc
    cdef Py_ssize_t npos = do * ho * wo
    cdef Py_ssize_t kk = nk * nc
    cdef Py_ssize_t pos, t, c, i, r, kb, kr, ob, od, oh, ow, base
    cdef Py_ssize_t xoff[6]
    cdef floating a0, a1, a2, a3, a4, a5
    cdef floating t0[16]
    cdef floating t1[16]
    cdef floating t2[16]
    cdef floating t3[16]
    cdef floating t4[16]
    cdef floating t5[16]
    cdef const floating *grow
    cdef floating *wrow
    for ob in range(0, no_pad, 16):
        for kb in range(0, kk, 6):
            kr = kk - kb
            if kr > 6:
                kr = 6
            for r in range(kr):
                t = (kb + r) // nc
                c = (kb + r) % nc
                xoff[r] = offs[t] + c
            for r in range(kr, 6):
                xoff[r] = xoff[0]
            for i in range(16):
                t0[i] = 0
                t1[i] = 0
                t2[i] = 0
                t3[i] = 0
                t4[i] = 0
                t5[i] = 0
            od = 0
            oh = 0
            ow = 0
            base = 0
            for pos in range(npos):
                grow = &gt[pos * no_pad + ob]
                a0 = xt[base + xoff[0]]
                a1 = xt[base + xoff[1]]
                a2 = xt[base + xoff[2]]
                a3 = xt[base + xoff[3]]
                a4 = xt[base + xoff[4]]
                a5 = xt[base + xoff[5]]
                for i in range(16):
                    t0[i] = t0[i] + a0 * grow[i]
                    t1[i] = t1[i] + a1 * grow[i]
                    t2[i] = t2[i] + a2 * grow[i]
                    t3[i] = t3[i] + a3 * grow[i]
                    t4[i] = t4[i] + a4 * grow[i]
                    t5[i] = t5[i] + a5 * grow[i]
                ow += 1
                base += step_w
                if ow == wo:
                    ow = 0
                    oh += 1
                    if oh == ho:
                        oh = 0
                        od += 1
                    base = od * row_d + oh * row_h
            wrow = &gw_t[kb * no_pad + ob]
            for i in range(16):
                wrow[i] = t0[i]
            if kr > 1:
                wrow += no_pad
                for i in range(16):
                    wrow[i] = t1[i]
            if kr > 2:
                wrow += no_pad
                for i in range(16):
                    wrow[i] = t2[i]
            if kr > 3:
                wrow += no_pad
                for i in range(16):
                    wrow[i] = t3[i]
            if kr > 4:
                wrow += no_pad
                for i in range(16):
                    wrow[i] = t4[i]
            if kr > 5:
                wrow += no_pad
                for i in range(16):
                    wrow[i] = t5[i]


@cython.boundscheck(False)
cdef void _grad_input_t(const floating[::1] wt, const floating[::1] gt, floating[::1] gx_t,
                        const Py_ssize_t[::1] offs,
                        Py_ssize_t nc, Py_ssize_t no,
                        Py_ssize_t do, Py_ssize_t ho, Py_ssize_t wo,
                        Py_ssize_t xh, Py_ssize_t xw,
                        Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw) noexcept nogil:
    cdef Py_ssize_t nk = offs.shape[0]
    cdef Py_ssize_t row_d = sd * xh * xw * nc, row_h = sh * xw * nc, step_w = sw * nc
    cdef Py_ssize_t npos = do * ho * wo
    cdef Py_ssize_t pos, r, rr, t, c, o, cb, cl, od, oh, ow, base
    cdef Py_ssize_t xb[6]
    cdef floating g0, g1, g2, g3, g4, g5
    cdef floating t0[16]
    cdef floating t1[16]
    cdef floating t2[16]
    cdef floating t3[16]
    cdef floating t4[16]
    cdef floating t5[16]
    cdef const floating *grow
    cdef const floating *wrow
    cdef floating *xrow
    od = 0
    oh = 0
    ow = 0
    base = 0
    pos = 0
    while pos < npos:
        rr = npos - pos
        if rr > 6:
            rr = 6
        for r in range(rr):
            xb[r] = base
            ow += 1
            base += step_w
            if ow == wo:
                ow = 0
                oh += 1
                if oh == ho:
                    oh = 0
                    od += 1
                base = od * row_d + oh * row_h
        grow = &gt[pos * no]
        for t in range(nk):
            for cb in range(0, nc, 16):
                cl = nc - cb
                if cl > 16:
                    cl = 16
                for c in range(cl):
                    t0[c] = 0
                    t1[c] = 0
                    t2[c] = 0
                    t3[c] = 0
                    t4[c] = 0
                    t5[c] = 0
                wrow = &wt[t * nc + cb]
                for o in range(no):
                    g0 = grow[o]
                    g1 = grow[no + o] if rr > 1 else <floating>0
                    g2 = grow[2 * no + o] if rr > 2 else <floating>0
                    g3 = grow[3 * no + o] if rr > 3 else <floating>0
                    g4 = grow[4 * no + o] if rr > 4 else <floating>0
                    g5 = grow[5 * no + o] if rr > 5 else <floating>0
                    for c in range(cl):
                        t0[c] = t0[c] + g0 * wrow[c]
                        t1[c] = t1[c] + g1 * wrow[c]
                        t2[c] = t2[c] + g2 * wrow[c]
                        t3[c] = t3[c] + g3 * wrow[c]
                        t4[c] = t4[c] + g4 * wrow[c]
                        t5[c] = t5[c] + g5 * wrow[c]
                    wrow += nk * nc
                xrow = &gx_t[xb[0] + offs[t] + cb]
                for c in range(cl):
                    xrow[c] = xrow[c] + t0[c]
                if rr > 1:
                    xrow = &gx_t[xb[1] + offs[t] + cb]
                    for c in range(cl):
                        xrow[c] = xrow[c] + t1[c]
                if rr > 2:
                    xrow = &gx_t[xb[2] + offs[t] + cb]
                    for c in range(cl):
                        xrow[c] = xrow[c] + t2[c]
                if rr > 3:
                    xrow = &gx_t[xb[3] + offs[t] + cb]
                    for c in range(cl):
                        xrow[c] = xrow[c] + t3[c]
                if rr > 4:
                    xrow = &gx_t[xb[4] + offs[t] + cb]
                    for c in range(cl):
                        xrow[c] = xrow[c] + t4[c]
                if rr > 5:
                    xrow = &gx_t[xb[5] + offs[t] + cb]
                    for c in range(cl):
                        xrow[c] = xrow[c] + t5[c]
        pos += rr
