"""Region contrastive loss: mask perturbation, ROI/background terms, schedule."""

import numpy as np
import pytest

from flowct.autodiff import Tensor
from flowct.contrastive import (
    ContrastConfig,
    ContrastiveError,
    LabelSubstitution,
    background_consistency_loss,
    build_perturbed_mask,
    lambda_contrast,
    region_contrastive_loss,
    roi_mask_to_latent,
    roi_sensitivity_loss,
)
from flowct.networks import Conditioning, ControlEncoder, VelocityNet, control_forward
from flowct.nifti import LabelMap


def test_label_substitution_rejects_identity():
    LabelSubstitution({5: 2})
    with pytest.raises(ContrastiveError):
        LabelSubstitution({5: 5})


def test_contrast_config_validation():
    cfg = ContrastConfig()
    assert (cfg.delta, cfg.dilation_radius, cfg.mode) == (2.0, 1, "full_output")
    with pytest.raises(ContrastiveError):
        ContrastConfig(delta=0.0)
    with pytest.raises(ContrastiveError):
        ContrastConfig(dilation_radius=-1)
    with pytest.raises(ContrastiveError):
        ContrastConfig(mode="features")


def test_lambda_schedule_switches_at_half():
    assert lambda_contrast(0, 60) == 0.01
    assert lambda_contrast(29, 60) == 0.01
    assert lambda_contrast(30, 60) == 0.001
    assert lambda_contrast(59, 60) == 0.001
    assert lambda_contrast(19, 40) == 0.01
    assert lambda_contrast(20, 40) == 0.001
    cfg = ContrastConfig(lambda_early=0.5, lambda_late=0.25)
    assert lambda_contrast(0, 2, cfg) == 0.5
    assert lambda_contrast(1, 2, cfg) == 0.25
    with pytest.raises(ContrastiveError):
        lambda_contrast(0, 0)


def test_build_perturbed_mask_replaces_and_counts():
    grid = np.full((8, 8, 8), 2, dtype=np.uint8)
    grid[:, :, :2] = 0
    lesion = [(3, 3, 3), (3, 3, 4), (3, 4, 3), (4, 3, 3), (4, 4, 4), (5, 5, 5), (2, 6, 6)]
    for ijk in lesion:
        grid[ijk] = 5
    lm = LabelMap(grid=grid, spacing=(1, 1, 1.5), vocabulary={"liver": 2, "lesion": 5})
    c_pert, m = build_perturbed_mask(lm, LabelSubstitution({5: 2}))
    assert int(m.grid.sum()) == len(lesion)
    assert m.grid.dtype == np.uint8
    assert all(m.grid[ijk] == 1 for ijk in lesion)
    assert not np.any(c_pert.grid == 5)
    # only the lesion voxels changed, and they became liver
    assert all(c_pert.grid[ijk] == 2 for ijk in lesion)
    assert np.array_equal(c_pert.grid[m.grid == 0], grid[m.grid == 0])
    assert c_pert.spacing == lm.spacing
    assert c_pert.vocabulary == lm.vocabulary


def test_build_perturbed_mask_warns_on_absent_label():
    grid = np.full((4, 4, 4), 2, dtype=np.uint8)
    lm = LabelMap(grid=grid, spacing=(1, 1, 1))
    with pytest.warns(UserWarning, match="absent"):
        c_pert, m = build_perturbed_mask(lm, LabelSubstitution({5: 2}))
    assert int(m.grid.sum()) == 0
    assert np.array_equal(c_pert.grid, grid)


def test_roi_mask_to_latent_any_pool():
    m = np.zeros((8, 8, 8), dtype=np.uint8)
    m[1, 2, 3] = 1  # one voxel marks its whole 4^3 cell
    m[5, 6, 7] = 1
    m[5, 7, 7] = 1  # same cell as the previous voxel
    low = roi_mask_to_latent(m, 4)
    assert low.shape == (2, 2, 2)
    assert low.dtype == np.float32
    assert low[0, 0, 0] == 1.0
    assert low[1, 1, 1] == 1.0
    assert low.sum() == 2.0
    assert np.array_equal(roi_mask_to_latent(m, 1), (m > 0).astype(np.float32))
    with pytest.raises(ContrastiveError):
        roi_mask_to_latent(np.zeros((6, 8, 8), dtype=np.uint8), 4)


def test_roi_sensitivity_hand_values():
    m = np.zeros((3, 3, 3), dtype=np.float32)
    m[1, 1, 1] = 1.0
    base = np.zeros((2, 3, 3, 3), dtype=np.float32)
    gap = base.copy()
    gap[:, 1, 1, 1] = 1.5
    # D_roi = 1.5 < delta, so the loss is -1.5 exactly
    loss = roi_sensitivity_loss(Tensor(base + gap), Tensor(base), m, delta=2.0)
    assert float(loss.data) == pytest.approx(-1.5, abs=1e-7)
    # a 5.0 gap saturates at -delta
    gap[:, 1, 1, 1] = 5.0
    loss = roi_sensitivity_loss(Tensor(base + gap), Tensor(base), m, delta=2.0)
    assert float(loss.data) == pytest.approx(-2.0, abs=1e-7)


def test_roi_sensitivity_empty_mask_is_zero():
    stats = {}
    out = Tensor(np.ones((2, 3, 3, 3), dtype=np.float32))
    loss = roi_sensitivity_loss(out, Tensor(out.data * 2.0), np.zeros((3, 3, 3)), 2.0, stats)
    assert float(loss.data) == 0.0
    assert stats["empty_roi"] == 1
    with pytest.raises(ContrastiveError):
        roi_sensitivity_loss(out, Tensor(np.ones((1, 3, 3, 3), dtype=np.float32)),
                             np.zeros((3, 3, 3)), 2.0)


def test_background_consistency_excludes_dilated_ring():
    m = np.zeros((3, 3, 3), dtype=np.float32)
    m[1, 1, 1] = 1.0
    diff = np.zeros((2, 3, 3, 3), dtype=np.float32)
    # make the pair differ wildly inside the 7-voxel dilated ROI: ignored
    diff[:, 1, 1, 1] = 100.0
    diff[0, 0, 1, 1] = 100.0
    loss = background_consistency_loss(Tensor(diff), Tensor(np.zeros_like(diff)), m, r=1)
    assert float(loss.data) == 0.0
    # one outside entry of 2.0 over (27 - 7) voxels * 2 channels
    diff2 = np.zeros_like(diff)
    diff2[0, 0, 0, 0] = 2.0
    loss = background_consistency_loss(Tensor(diff2), Tensor(np.zeros_like(diff2)), m, r=1)
    assert float(loss.data) == pytest.approx(2.0 / 40.0, abs=1e-9)


def test_background_consistency_empty_background():
    stats = {}
    m = np.ones((3, 3, 3), dtype=np.float32)
    out = Tensor(np.ones((1, 3, 3, 3), dtype=np.float32))
    loss = background_consistency_loss(out, Tensor(out.data * 3.0), m, r=1, stats=stats)
    assert float(loss.data) == 0.0
    assert stats["empty_background"] == 1


def _pair_setup(bump=0.0):
    base = VelocityNet(levels=2, base_channels=8, in_channels=4, seed=3)
    ctrl = ControlEncoder(base, vocab_size=6, seed=4)
    if bump:
        ctrl.params["fuse0_w"].data[:] = bump
        ctrl.params["fuse1_w"].data[:] = bump
    grid = np.full((16, 16, 16), 2, dtype=np.uint8)
    grid[4:8, 4:8, 4:8] = 5
    lm = LabelMap(grid=grid, spacing=(1, 1, 1))
    c_pert, m = build_perturbed_mask(lm, LabelSubstitution({5: 2}))
    from flowct.networks import labelmap_to_latent_onehot

    mo = labelmap_to_latent_onehot(lm, factor=4, vocab_size=6)
    mp = labelmap_to_latent_onehot(c_pert, factor=4, vocab_size=6)
    m_latent = roi_mask_to_latent(m.grid, 4)
    rng = np.random.default_rng(9)
    x_t = Tensor(rng.standard_normal((4, 4, 4, 4)).astype(np.float32))
    t = 0.4
    co = Conditioning(t=t, spacing=(1.0, 1.0, 1.0), mask=mo)
    cp = Conditioning(t=t, spacing=(1.0, 1.0, 1.0), mask=mp)
    return base, ctrl, x_t, t, co, cp, m_latent


def test_region_loss_zero_for_zero_init_control():
    base, ctrl, x_t, t, co, cp, m_latent = _pair_setup()
    l_roi, l_bg = region_contrastive_loss(base, ctrl, x_t, t, co, cp, m_latent, ContrastConfig())
    assert float(l_roi.data) == 0.0
    assert float(l_bg.data) == 0.0


def test_region_loss_signs_and_reuse():
    base, ctrl, x_t, t, co, cp, m_latent = _pair_setup(bump=0.05)
    cfg = ContrastConfig()
    l_roi, l_bg = region_contrastive_loss(base, ctrl, x_t, t, co, cp, m_latent, cfg)
    assert -cfg.delta <= float(l_roi.data) < 0.0
    assert float(l_bg.data) > 0.0
    # supplying the precomputed original pass must not change the values
    out_o = control_forward(base, ctrl, x_t, co)
    r2, b2 = region_contrastive_loss(base, ctrl, x_t, t, co, cp, m_latent, cfg, out_orig=out_o)
    assert float(r2.data) == float(l_roi.data)
    assert float(b2.data) == float(l_bg.data)


def test_region_loss_validates_pairing():
    base, ctrl, x_t, t, co, cp, m_latent = _pair_setup()
    cfg = ContrastConfig()
    off = Conditioning(t=0.9, spacing=co.spacing, mask=cp.mask)
    with pytest.raises(ContrastiveError):
        region_contrastive_loss(base, ctrl, x_t, t, co, off, m_latent, cfg)
    sp = Conditioning(t=t, spacing=(2.0, 1.0, 1.0), mask=cp.mask)
    with pytest.raises(ContrastiveError):
        region_contrastive_loss(base, ctrl, x_t, t, co, sp, m_latent, cfg)
    bare = Conditioning(t=t, spacing=co.spacing)
    with pytest.raises(ContrastiveError):
        region_contrastive_loss(base, ctrl, x_t, t, co, bare, m_latent, cfg)


def test_region_loss_auto_mode_switches_on_volume():
    base, ctrl, x_t, t, co, cp, m_latent = _pair_setup(bump=0.05)
    # 64 latent voxels: below the default threshold auto means full_output
    full = region_contrastive_loss(base, ctrl, x_t, t, co, cp, m_latent,
                                   ContrastConfig(mode="full_output"))
    auto = region_contrastive_loss(base, ctrl, x_t, t, co, cp, m_latent,
                                   ContrastConfig(mode="auto"))
    assert float(auto[0].data) == float(full[0].data)
    assert float(auto[1].data) == float(full[1].data)
    # shrink the threshold below 64 and auto must fall back to encoder features
    feats = region_contrastive_loss(base, ctrl, x_t, t, co, cp, m_latent,
                                    ContrastConfig(mode="encoder_features"))
    tight = region_contrastive_loss(base, ctrl, x_t, t, co, cp, m_latent,
                                    ContrastConfig(mode="auto", auto_voxel_threshold=63))
    assert float(tight[0].data) == float(feats[0].data)
    assert float(tight[1].data) == float(feats[1].data)
    assert float(feats[0].data) != float(full[0].data)
