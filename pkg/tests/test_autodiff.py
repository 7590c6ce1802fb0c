"""Reverse-mode engine: per-op gradient checks and tape semantics."""

import numpy as np
import pytest

from flowct import autodiff as ad
from flowct.autodiff import Tape, Tensor

N_SEEDS = 20
F64_TOL = 1e-6
F64_EPS = 1e-5


def _away_from_zero(rng, shape):
    # keep |x| >= 0.1 so abs/sign kinks stay far from the FD probe
    x = rng.uniform(0.5, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _op_cases(rng):
    x3 = rng.standard_normal((2, 3, 3, 3))
    x4 = rng.standard_normal((2, 4, 4, 4))
    w = rng.standard_normal((2, 2, 2, 2, 2))
    mat = rng.standard_normal((3, 4))
    vec = rng.standard_normal(4)
    mask = (rng.uniform(size=(2, 3, 3, 3)) > 0.4).astype(np.float64)
    up_mix = Tensor(rng.standard_normal((2, 6, 6, 6)))
    down_mix = Tensor(rng.standard_normal((2, 2, 2, 2)))
    flat_mix = Tensor(rng.standard_normal((4, 9)))
    return [
        ("add", lambda p: ad.mean(ad.add(p, Tensor(x3))), rng.standard_normal((2, 3, 3, 3))),
        ("mul", lambda p: ad.mean(ad.mul(p, Tensor(x3))), rng.standard_normal((2, 3, 3, 3))),
        ("matmul", lambda p: ad.mean(ad.matmul(p, Tensor(mat.T.copy()))), mat.copy()),
        ("matmul_vec", lambda p: ad.mean(ad.matmul(Tensor(mat), p)), vec.copy()),
        ("conv3d_x", lambda p: ad.mean(ad.conv3d(p, Tensor(w), stride=1, padding=1)), x4.copy()),
        ("conv3d_w", lambda p: ad.mean(ad.conv3d(Tensor(x4), p, stride=2, padding=1)), w.copy()),
        ("conv3d_b", lambda p: ad.mean(ad.conv3d(Tensor(x4), Tensor(w), bias=p, stride=1, padding=0)),
         rng.standard_normal(2)),
        ("silu", lambda p: ad.mean(ad.silu(p)), rng.standard_normal((3, 3))),
        ("mean", lambda p: ad.mean(p), rng.standard_normal((4, 4))),
        ("sum", lambda p: ad.tensor_sum(p), rng.standard_normal((3, 3))),
        ("abs", lambda p: ad.mean(ad.tensor_abs(p)), _away_from_zero(rng, (3, 3))),
        ("min_with_scalar", lambda p: ad.mean(ad.min_with_scalar(p, 0.0)), _away_from_zero(rng, (3, 3))),
        ("masked_mean_abs", lambda p: ad.masked_mean_abs(p, mask), _away_from_zero(rng, (2, 3, 3, 3))),
        ("concat", lambda p: ad.mean(ad.concat_channels([p, Tensor(x3)])), rng.standard_normal((2, 3, 3, 3))),
        ("upsample", lambda p: ad.mean(ad.mul(ad.upsample_nearest(p, 2), up_mix)),
         rng.standard_normal((2, 3, 3, 3))),
        ("downsample", lambda p: ad.mean(ad.mul(ad.downsample_avg(p, 2), down_mix)),
         x4.copy()),
        ("reshape", lambda p: ad.mean(ad.mul(ad.reshape(p, (4, 9)), flat_mix)),
         rng.standard_normal((2, 2, 3, 3))),
        ("composite", lambda p: ad.mean(ad.silu(ad.conv3d(p, Tensor(w), stride=1, padding=1))), x4.copy()),
    ]


def test_every_op_passes_gradient_check():
    worst = {}
    for seed in range(N_SEEDS):
        rng = np.random.default_rng(seed)
        for name, fn, point in _op_cases(rng):
            err = ad.grad_check(fn, Tensor(point.astype(np.float64)), F64_EPS)
            worst[name] = max(worst.get(name, 0.0), err)
    bad = {k: v for k, v in worst.items() if v > F64_TOL}
    assert not bad, f"ops over tolerance: {bad}"


def test_grad_check_flags_a_wrong_gradient():
    # the FD probe sees mean(p); the recorded graph computes 2*mean(p),
    # so the checker must report the exact 0.5 relative mismatch
    def sneaky(p):
        if p.requires_grad:
            return ad.mean(ad.mul(p, 2.0))
        return ad.mean(p)

    err = ad.grad_check(sneaky, Tensor(np.ones((3, 3))), 1e-6)
    assert abs(err - 0.5) < 1e-6


def test_gradients_of_linear_functions_are_exact():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((4, 4))
    p = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    with Tape() as tape:
        loss = ad.tensor_sum(ad.mul(p, Tensor(a)))
    g = ad.backward(loss, tape)[p].data
    assert np.max(np.abs(g - a)) == 0.0


def test_backward_accumulates_reused_tensors():
    p = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        out = ad.tensor_sum(ad.add(ad.mul(p, p), p))  # d/dp (p^2 + p) = 2p + 1
    g = ad.backward(out, tape)[p].data
    assert np.allclose(g, 2.0 * p.data + 1.0, atol=1e-12)


def test_backward_returns_zero_for_unreached_leaves():
    p = Tensor(np.ones(3), requires_grad=True)
    q = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        ad.mean(q)  # touches q so it registers as a leaf
        loss = ad.mean(p)
    grads = ad.backward(loss, tape)
    assert np.allclose(grads[p].data, 1.0 / 3.0)
    assert np.all(grads[q].data == 0.0)


def test_tape_is_single_use():
    p = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        loss = ad.mean(p)
    ad.backward(loss, tape)
    with pytest.raises(RuntimeError):
        ad.backward(loss, tape)


def test_backward_rejects_non_scalar_loss():
    p = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = ad.mul(p, 2.0)
    with pytest.raises(ValueError):
        ad.backward(out, tape)


def test_add_mul_broadcast_gradients_reduce_correctly():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((3, 4, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 1, 1)), requires_grad=True)
    with Tape() as tape:
        loss = ad.mean(ad.mul(ad.add(x, b), Tensor(rng.standard_normal((3, 4, 4)))))
    grads = ad.backward(loss, tape)
    assert grads[x].shape == (3, 4, 4)
    assert grads[b].shape == (3, 1, 1)
    err = ad.grad_check(lambda p: ad.mean(ad.mul(ad.add(Tensor(x.data), p), Tensor(np.ones((3, 4, 4))))),
                        Tensor(b.data), 1e-6)
    assert err <= F64_TOL


def test_division_by_tensor_is_rejected():
    p = Tensor(np.ones(3))
    with pytest.raises(TypeError):
        p / Tensor(np.ones(3))
    assert np.allclose((p / 2.0).data, 0.5)


def test_min_with_scalar_tie_takes_inside_branch():
    p = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.tensor_sum(ad.min_with_scalar(p, 2.0))
    g = ad.backward(loss, tape)[p].data
    assert np.array_equal(g, np.array([1.0, 1.0, 0.0]))


def test_masked_mean_abs_rejects_trainable_mask():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        ad.masked_mean_abs(x, Tensor(np.ones((2, 2)), requires_grad=True))


def test_masked_mean_abs_empty_mask_uses_unit_denominator():
    x = Tensor(np.full((2, 2), 7.0))
    out = ad.masked_mean_abs(x, np.zeros((2, 2)))
    assert out.item() == 0.0


def test_conv3d_shape_validation():
    x = Tensor(np.zeros((2, 4, 4, 4)))
    with pytest.raises(ValueError):
        ad.conv3d(x, Tensor(np.zeros((3, 5, 3, 3, 3))))  # channel mismatch
    with pytest.raises(ValueError):
        ad.conv3d(x, Tensor(np.zeros((3, 2, 3, 3, 3))), bias=Tensor(np.zeros(4)))
    with pytest.raises(ValueError):
        ad.conv3d(x, Tensor(np.zeros((3, 2, 7, 3, 3))), padding=1)  # kernel exceeds padded extent
    with pytest.raises(ValueError):
        ad.conv3d(x, Tensor(np.zeros((3, 2, 3, 3, 3))), stride=(1, 2))


def test_concat_channels_validation_and_grads():
    with pytest.raises(ValueError):
        ad.concat_channels([])
    with pytest.raises(ValueError):
        ad.concat_channels([Tensor(np.zeros((2, 3, 3, 3))), Tensor(np.zeros((2, 4, 3, 3)))])
    a = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    b = Tensor(np.ones((3, 2, 2, 2)), requires_grad=True)
    with Tape() as tape:
        out = ad.concat_channels([a, b])
        loss = ad.tensor_sum(ad.mul(out, Tensor(np.arange(32, dtype=np.float64).reshape(4, 2, 2, 2))))
    grads = ad.backward(loss, tape)
    assert grads[a].shape == (1, 2, 2, 2)
    assert grads[b].shape == (3, 2, 2, 2)
    assert np.array_equal(np.concatenate([grads[a].data, grads[b].data], axis=0),
                          np.arange(32, dtype=np.float64).reshape(4, 2, 2, 2))


def test_downsample_avg_requires_divisible_extents():
    with pytest.raises(ValueError):
        ad.downsample_avg(Tensor(np.zeros((1, 3, 4, 4))), 2)


def test_upsample_then_downsample_is_identity():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 3, 3))
    up = ad.upsample_nearest(Tensor(x), 2)
    down = ad.downsample_avg(up, 2)
    assert np.max(np.abs(down.data - x)) <= 1e-15


def test_forward_op_dispatch_matches_direct_calls():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 4, 4, 4)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)))
    got = ad.forward_op("conv3d", [x, w], {"stride": 2, "padding": 1})
    want = ad.conv3d(x, w, stride=2, padding=1)
    assert np.array_equal(got.data, want.data)
    got = ad.forward_op("concat_channels", [x, x])
    assert got.shape == (4, 4, 4, 4)
    got = ad.forward_op("min_with_scalar", [x], {"scalar": 0.25})
    assert np.array_equal(got.data, np.minimum(x.data, 0.25))
    with pytest.raises(ValueError):
        ad.forward_op("outer_product", [x, x])


def test_grad_check_rejects_bad_epsilon_and_nonscalar():
    p = Tensor(np.ones(2))
    with pytest.raises(ValueError):
        ad.grad_check(lambda t: ad.mean(t), p, 0.0)
    with pytest.raises(ValueError):
        ad.grad_check(lambda t: ad.mul(t, 2.0), p, 1e-5)


def test_debug_finite_check_raises_on_nan():
    ad.set_debug_check_finite(True)
    try:
        with pytest.raises(FloatingPointError):
            ad.add(Tensor(np.array([np.nan])), Tensor(np.array([1.0])))
    finally:
        ad.set_debug_check_finite(False)
    out = ad.add(Tensor(np.array([np.nan])), Tensor(np.array([1.0])))
    assert np.isnan(out.data[0])


def test_integer_input_is_promoted_to_default_float():
    t = Tensor(np.arange(4))
    assert t.dtype == np.float32
    t64 = Tensor(np.arange(4), dtype=np.float64)
    assert t64.dtype == np.float64
