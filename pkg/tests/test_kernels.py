"""Convolution kernel backends against a direct 7-loop reference."""

import os
import subprocess
import sys

import numpy as np
import pytest

from flowct import kernels
from flowct.kernels import numpy_backend

BACKENDS = [numpy_backend]
try:
    from flowct.kernels import _core
    BACKENDS.append(_core)
except ImportError:
    _core = None


def _ids(mod):
    return mod.NAME


def conv3d_oracle(x, w, stride, padding):
    """Plain nested-loop convolution, float64 throughout."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    sd, sh, sw = stride
    pd, ph, pw = padding
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    no, nc, kd, kh, kw = w.shape
    do = (x.shape[1] + 2 * pd - kd) // sd + 1
    ho = (x.shape[2] + 2 * ph - kh) // sh + 1
    wo = (x.shape[3] + 2 * pw - kw) // sw + 1
    out = np.zeros((no, do, ho, wo))
    for o in range(no):
        for od in range(do):
            for oh in range(ho):
                for ow in range(wo):
                    acc = 0.0
                    for c in range(nc):
                        for i in range(kd):
                            for j in range(kh):
                                for k in range(kw):
                                    acc += w[o, c, i, j, k] * xp[c, od * sd + i, oh * sh + j, ow * sw + k]
                    out[o, od, oh, ow] = acc
    return out


def grad_weight_oracle(x, g, w_shape, stride, padding):
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    sd, sh, sw = stride
    pd, ph, pw = padding
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    no, nc, kd, kh, kw = w_shape
    gw = np.zeros(w_shape)
    for o in range(no):
        for od in range(g.shape[1]):
            for oh in range(g.shape[2]):
                for ow in range(g.shape[3]):
                    gv = g[o, od, oh, ow]
                    for c in range(nc):
                        for i in range(kd):
                            for j in range(kh):
                                for k in range(kw):
                                    gw[o, c, i, j, k] += gv * xp[c, od * sd + i, oh * sh + j, ow * sw + k]
    return gw


def grad_input_oracle(w, g, x_shape, stride, padding):
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    sd, sh, sw = stride
    pd, ph, pw = padding
    nc, d, h, wd = x_shape
    gxp = np.zeros((nc, d + 2 * pd, h + 2 * ph, wd + 2 * pw))
    no, _, kd, kh, kw = w.shape
    for o in range(no):
        for od in range(g.shape[1]):
            for oh in range(g.shape[2]):
                for ow in range(g.shape[3]):
                    gv = g[o, od, oh, ow]
                    for c in range(nc):
                        for i in range(kd):
                            for j in range(kh):
                                for k in range(kw):
                                    gxp[c, od * sd + i, oh * sh + j, ow * sw + k] += gv * w[o, c, i, j, k]
    return gxp[:, pd:pd + d, ph:ph + h, pw:pw + wd]


# (x shape, w shape, stride, padding); covers k=1, stride 2, zero padding,
# non-cubic extents, single output channel, and >16 input channels
CASES = [
    ((2, 4, 4, 4), (3, 2, 3, 3, 3), (1, 1, 1), (1, 1, 1)),
    ((3, 5, 4, 6), (2, 3, 3, 3, 3), (2, 2, 2), (1, 1, 1)),
    ((2, 4, 6, 4), (1, 2, 1, 1, 1), (1, 1, 1), (0, 0, 0)),
    ((1, 6, 5, 5), (4, 1, 3, 3, 3), (2, 1, 2), (1, 0, 1)),
    ((4, 3, 3, 3), (2, 4, 3, 3, 3), (1, 1, 1), (1, 1, 1)),
    ((18, 4, 4, 4), (2, 18, 3, 3, 3), (1, 1, 1), (1, 1, 1)),
    ((2, 5, 5, 5), (3, 2, 2, 2, 2), (1, 1, 1), (0, 0, 0)),
]


@pytest.mark.parametrize("backend", BACKENDS, ids=_ids)
@pytest.mark.parametrize("case", range(len(CASES)))
def test_forward_matches_oracle(backend, case):
    x_shape, w_shape, stride, padding = CASES[case]
    rng = np.random.default_rng(case)
    x = rng.standard_normal(x_shape)
    w = rng.standard_normal(w_shape)
    want = conv3d_oracle(x, w, stride, padding)
    got = backend.conv3d_forward(x, w, stride, padding)
    assert got.dtype == np.float64
    assert got.shape == want.shape
    assert np.max(np.abs(got - want)) <= 1e-12 * max(1.0, np.max(np.abs(want)))


@pytest.mark.parametrize("backend", BACKENDS, ids=_ids)
@pytest.mark.parametrize("case", range(len(CASES)))
def test_grad_weight_matches_oracle(backend, case):
    x_shape, w_shape, stride, padding = CASES[case]
    rng = np.random.default_rng(100 + case)
    x = rng.standard_normal(x_shape)
    out = conv3d_oracle(x, np.zeros(w_shape), stride, padding)
    g = rng.standard_normal(out.shape)
    want = grad_weight_oracle(x, g, w_shape, stride, padding)
    got = backend.conv3d_grad_weight(x, g, w_shape, stride, padding)
    assert got.shape == tuple(w_shape)
    assert np.max(np.abs(got - want)) <= 1e-12 * max(1.0, np.max(np.abs(want)))


@pytest.mark.parametrize("backend", BACKENDS, ids=_ids)
@pytest.mark.parametrize("case", range(len(CASES)))
def test_grad_input_matches_oracle(backend, case):
    x_shape, w_shape, stride, padding = CASES[case]
    rng = np.random.default_rng(200 + case)
    w = rng.standard_normal(w_shape)
    out = conv3d_oracle(np.zeros(x_shape), w, stride, padding)
    g = rng.standard_normal(out.shape)
    want = grad_input_oracle(w, g, x_shape, stride, padding)
    got = backend.conv3d_grad_input(w, g, x_shape, stride, padding)
    assert got.shape == tuple(x_shape)
    assert np.max(np.abs(got - want)) <= 1e-12 * max(1.0, np.max(np.abs(want)))


@pytest.mark.parametrize("backend", BACKENDS, ids=_ids)
def test_float32_stays_close_to_float64_oracle(backend):
    for seed in range(8):
        rng = np.random.default_rng(seed)
        x_shape, w_shape, stride, padding = CASES[seed % len(CASES)]
        x = rng.standard_normal(x_shape).astype(np.float32)
        w = rng.standard_normal(w_shape).astype(np.float32)
        want = conv3d_oracle(x, w, stride, padding)
        got = backend.conv3d_forward(x, w, stride, padding)
        assert got.dtype == np.float32
        scale = max(1.0, float(np.max(np.abs(want))))
        assert np.max(np.abs(got.astype(np.float64) - want)) <= 1e-5 * scale


@pytest.mark.parametrize("backend", BACKENDS, ids=_ids)
def test_random_shape_sweep(backend):
    """Forward and both gradients vs the oracle on randomized geometry."""
    rng = np.random.default_rng(7)
    for trial in range(20):
        nc = int(rng.integers(1, 6))
        no = int(rng.integers(1, 5))
        k = int(rng.choice([1, 2, 3]))
        stride = tuple(int(s) for s in rng.choice([1, 2], size=3))
        pad_max = 1 if k > 1 else 0
        padding = tuple(int(p) for p in rng.integers(0, pad_max + 1, size=3))
        ext = tuple(int(e) for e in rng.integers(k, k + 4, size=3))
        x = rng.standard_normal((nc,) + ext)
        w = rng.standard_normal((no, nc, k, k, k))
        want = conv3d_oracle(x, w, stride, padding)
        got = backend.conv3d_forward(x, w, stride, padding)
        assert np.max(np.abs(got - want)) <= 1e-12 * max(1.0, np.max(np.abs(want)))
        g = rng.standard_normal(want.shape)
        gw = backend.conv3d_grad_weight(x, g, w.shape, stride, padding)
        gw_want = grad_weight_oracle(x, g, w.shape, stride, padding)
        assert np.max(np.abs(gw - gw_want)) <= 1e-12 * max(1.0, np.max(np.abs(gw_want)))
        gx = backend.conv3d_grad_input(w, g, x.shape, stride, padding)
        gx_want = grad_input_oracle(w, g, x.shape, stride, padding)
        assert np.max(np.abs(gx - gx_want)) <= 1e-12 * max(1.0, np.max(np.abs(gx_want)))


@pytest.mark.parametrize("backend", BACKENDS, ids=_ids)
def test_results_are_bitwise_deterministic(backend):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 6, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3, 3)).astype(np.float32)
    stride, padding = (2, 2, 2), (1, 1, 1)
    a = backend.conv3d_forward(x, w, stride, padding)
    b = backend.conv3d_forward(x.copy(), w.copy(), stride, padding)
    assert np.array_equal(a, b)
    g = rng.standard_normal(a.shape).astype(np.float32)
    assert np.array_equal(backend.conv3d_grad_weight(x, g, w.shape, stride, padding),
                          backend.conv3d_grad_weight(x, g, w.shape, stride, padding))
    assert np.array_equal(backend.conv3d_grad_input(w, g, x.shape, stride, padding),
                          backend.conv3d_grad_input(w, g, x.shape, stride, padding))


def test_out_extent_counts_positions():
    for extent in range(1, 9):
        for kernel in range(1, 4):
            for stride in (1, 2, 3):
                for pad in (0, 1):
                    if extent + 2 * pad < kernel:
                        continue
                    # count valid window starts directly
                    count = len(range(0, extent + 2 * pad - kernel + 1, stride))
                    assert kernels.out_extent(extent, kernel, stride, pad) == count


def test_env_var_forces_backend():
    code = "from flowct import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, FLOWCT_KERNELS="numpy")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.returncode == 0
    assert out.stdout.strip() == "numpy"
    if _core is not None:
        env = dict(os.environ, FLOWCT_KERNELS="cython")
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
        assert out.returncode == 0
        assert out.stdout.strip() == "cython"


def test_active_backend_exports_match_selection():
    assert kernels.BACKEND in ("numpy", "cython")
    if os.environ.get("FLOWCT_KERNELS", "").strip().lower() == "numpy":
        assert kernels.conv3d_forward is numpy_backend.conv3d_forward
    elif _core is not None:
        assert kernels.conv3d_forward is _core.conv3d_forward
