"""Region-specific contrastive loss over paired condition forward passes.

A perturbed mask replaces ROI labels (e.g. a lesion) with their background
labels; the loss then pushes the model output apart inside the ROI (capped
at delta so the term stays bounded) while penalizing any change outside a
dilated ROI ring.  A memory-aware switch chooses between comparing full
model outputs and comparing control-encoder features only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nifti import LabelMap
from .networks import Conditioning, ControlEncoder, VelocityNet, control_forward
from .phantoms import dilate_mask


class ContrastiveError(Exception):
    pass


@dataclass
class LabelSubstitution:
    """roi label -> background label replacements (lesion -> host organ)."""

    mapping: dict

    def __post_init__(self):
        for roi, bg in self.mapping.items():
            if roi == bg:
                raise ContrastiveError(f"substitution maps label {roi} to itself")


@dataclass
class ContrastConfig:
    delta: float = 2.0
    dilation_radius: int = 1
    mode: str = "full_output"  # full_output | encoder_features | auto
    auto_voxel_threshold: int = 4096
    lambda_early: float = 0.01
    lambda_late: float = 0.001

    def __post_init__(self):
        if self.delta <= 0:
            raise ContrastiveError(f"delta must be positive, got {self.delta}")
        if self.dilation_radius < 0:
            raise ContrastiveError(f"dilation radius must be >= 0, got {self.dilation_radius}")
        if self.mode not in ("full_output", "encoder_features", "auto"):
            raise ContrastiveError(f"unknown feature-source mode {self.mode!r}")


def lambda_contrast(epoch: int, total_epochs: int, cfg: ContrastConfig | None = None) -> float:
    """Schedule: the early weight for the first half of epochs, then the late one."""
    cfg = cfg or ContrastConfig()
    if total_epochs <= 0:
        raise ContrastiveError(f"total_epochs must be positive, got {total_epochs}")
    return cfg.lambda_early if epoch < total_epochs // 2 else cfg.lambda_late


def build_perturbed_mask(c_orig: LabelMap, sub: LabelSubstitution):
    """Replace ROI labels with background labels; m marks every changed voxel."""
    grid = c_orig.grid
    vocab = set(np.unique(grid).tolist())
    perturbed = grid.copy()
    any_present = False
    for roi, bg in sub.mapping.items():
        if roi not in vocab:
            warnings.warn(f"substitution label {roi} absent from mask; empty ROI")
            continue
        any_present = True
        perturbed[grid == roi] = bg
    m = (grid != perturbed).astype(np.uint8)
    if any_present and m.sum() == 0:
        raise ContrastiveError("substitution changed no voxels despite labels present")
    c_perturb = LabelMap(grid=perturbed, spacing=c_orig.spacing, vocabulary=dict(c_orig.vocabulary))
    m_map = LabelMap(grid=m, spacing=c_orig.spacing)
    return c_perturb, m_map


def roi_mask_to_latent(m: np.ndarray, factor: int) -> np.ndarray:
    """Downsample a binary ROI mask: any covered voxel marks the latent voxel."""
    f = int(factor)
    if f == 1:
        return (np.asarray(m) > 0).astype(np.float32)
    d, h, w = m.shape
    if d % f or h % f or w % f:
        raise ContrastiveError(f"mask shape {m.shape} not divisible by factor {f}")
    blocks = (np.asarray(m) > 0).reshape(d // f, f, h // f, f, w // f, f)
    return blocks.any(axis=(1, 3, 5)).astype(np.float32)


def roi_sensitivity_loss(out_orig: Tensor, out_perturb: Tensor, m_latent: np.ndarray,
                         delta: float, stats: dict | None = None) -> Tensor:
    """-min(D_roi, delta) with D_roi the mask-normalized mean abs difference."""
    if out_orig.shape != out_perturb.shape:
        raise ContrastiveError(f"output shapes differ: {out_orig.shape} vs {out_perturb.shape}")
    m = np.asarray(m_latent, dtype=out_orig.data.dtype)
    if m.sum() == 0:
        if stats is not None:
            stats["empty_roi"] = stats.get("empty_roi", 0) + 1
        return Tensor(np.zeros((), dtype=out_orig.data.dtype))
    d_roi = ad.masked_mean_abs(out_orig - out_perturb, m)
    return ad.mul(ad.min_with_scalar(d_roi, delta), -1.0)


def background_consistency_loss(out_orig: Tensor, out_perturb: Tensor, m_latent: np.ndarray,
                                r: int, stats: dict | None = None) -> Tensor:
    """Mask-normalized mean abs difference outside the dilated ROI."""
    if out_orig.shape != out_perturb.shape:
        raise ContrastiveError(f"output shapes differ: {out_orig.shape} vs {out_perturb.shape}")
    m = np.asarray(m_latent) > 0
    m_minus = ~dilate_mask(m, r) if r > 0 else ~m
    if not m_minus.any():
        if stats is not None:
            stats["empty_background"] = stats.get("empty_background", 0) + 1
        return Tensor(np.zeros((), dtype=out_orig.data.dtype))
    return ad.masked_mean_abs(out_orig - out_perturb, m_minus.astype(out_orig.data.dtype))


def _maxpool_mask(m: np.ndarray, factor: int) -> np.ndarray:
    return roi_mask_to_latent(m, factor)


def region_contrastive_loss(base: VelocityNet, ctrl: ControlEncoder, x_t: Tensor, t: float,
                            cond_orig: Conditioning, cond_perturb: Conditioning,
                            m_latent: np.ndarray, cfg: ContrastConfig,
                            stats: dict | None = None,
                            out_orig: Tensor | None = None):
    """Paired-condition losses (L_roi, L_bg) sharing one (x0, t) draw.

    out_orig, when supplied, must be the full-output forward of cond_orig
    on this same x_t; it is reused instead of recomputed so training can
    share it with the flow loss.
    """
    if float(cond_orig.t) != float(t) or float(cond_perturb.t) != float(t):
        raise ContrastiveError(
            f"paired passes must share t: {cond_orig.t} / {cond_perturb.t} vs {t}")
    if tuple(cond_orig.spacing) != tuple(cond_perturb.spacing):
        raise ContrastiveError(
            f"paired passes must share spacing: {cond_orig.spacing} vs {cond_perturb.spacing}")
    if cond_orig.mask is None or cond_perturb.mask is None:
        raise ContrastiveError("both conditions need masks")

    mode = cfg.mode
    if mode == "auto":
        voxels = int(np.prod(x_t.shape[1:]))
        mode = "encoder_features" if voxels > cfg.auto_voxel_threshold else "full_output"

    m = np.asarray(m_latent)
    if mode == "full_output":
        a = out_orig if out_orig is not None else control_forward(base, ctrl, x_t, cond_orig)
        b = control_forward(base, ctrl, x_t, cond_perturb)
        l_roi = roi_sensitivity_loss(a, b, m, cfg.delta, stats)
        l_bg = background_consistency_loss(a, b, m, cfg.dilation_radius, stats)
        return l_roi, l_bg

    feats_o = ctrl.fusion_features(cond_orig)
    feats_p = ctrl.fusion_features(cond_perturb)
    l_roi_terms = []
    l_bg_terms = []
    for level, (fo, fp) in enumerate(zip(feats_o, feats_p)):
        m_level = _maxpool_mask(m, 2 ** level)
        l_roi_terms.append(roi_sensitivity_loss(fo, fp, m_level, cfg.delta, stats))
        l_bg_terms.append(background_consistency_loss(fo, fp, m_level, cfg.dilation_radius, stats))
    inv = 1.0 / len(l_roi_terms)
    l_roi = ad.mul(_sum_tensors(l_roi_terms), inv)
    l_bg = ad.mul(_sum_tensors(l_bg_terms), inv)
    return l_roi, l_bg


def _sum_tensors(terms):
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total
