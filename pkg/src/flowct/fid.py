"""Frechet distance between feature Gaussians over three orthogonal planes.

Slices come from the central fraction of each axis; features come from a
pluggable 2D extractor (fixed-seed random convolutions by default, or conv
weights loaded from a checkpoint).  The matrix square root runs on
symmetric PSD matrices only, via a hand-rolled Jacobi eigensolver, using
the symmetric-product form S1^1/2 S2 S1^1/2 inside the trace.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import normalize_hu

PLANES = ("xy", "yz", "xz")


class FidError(Exception):
    pass


@dataclass
class PlaneSelection:
    plane: str
    fraction: float = 0.5

    def __post_init__(self):
        if self.plane not in PLANES:
            raise FidError(f"unknown plane {self.plane!r}; expected one of {PLANES}")
        if not (0.0 < self.fraction <= 1.0):
            raise FidError(f"central fraction must be in (0, 1], got {self.fraction}")


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def central_indices(length: int, fraction: float):
    """Index range [floor(L(1-f)/2), floor(L(1-f)/2) + ceil(L f))."""
    start = int(np.floor(length * (1.0 - fraction) / 2.0))
    count = int(np.ceil(length * fraction))
    return range(start, start + count)


def extract_slices(volumes, selection: PlaneSelection):
    """Central-fraction 2D slices from every volume, as float arrays."""
    out = []
    axis = {"xy": 0, "yz": 2, "xz": 1}[selection.plane]
    for vol in volumes:
        grid = vol.grid
        length = grid.shape[axis]
        idx = central_indices(length, selection.fraction)
        if len(idx) == 0:
            raise FidError(f"no central slices for axis length {length}, fraction {selection.fraction}")
        for i in idx:
            if i >= length:
                raise FidError(f"slice index {i} out of bounds for axis length {length}")
            if axis == 0:
                out.append(np.asarray(grid[i], dtype=np.float32))
            elif axis == 1:
                out.append(np.asarray(grid[:, i, :], dtype=np.float32))
            else:
                out.append(np.asarray(grid[:, :, i], dtype=np.float32))
    if not out:
        raise FidError("extract_slices: empty volume set")
    return out


def _conv2d(x: np.ndarray, w: np.ndarray, stride: int = 2, pad: int = 1) -> np.ndarray:
    """Plain strided 2D convolution, channels-first; small inputs only."""
    cin, hh, ww = x.shape
    cout, cin2, kh, kw = w.shape
    if cin != cin2:
        raise FidError(f"conv2d channel mismatch: {cin} vs {cin2}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (hh + 2 * pad - kh) // stride + 1
    ow = (ww + 2 * pad - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :oh, :ow]
    col = windows.transpose(1, 2, 0, 3, 4).reshape(oh * ow, cin * kh * kw)
    out = col @ w.reshape(cout, -1).T
    return out.T.reshape(cout, oh, ow)


class FeatureExtractor:
    """2D conv feature stack; kind "random_conv" or "trained_probe"."""

    def __init__(self, kind: str, seed: int = 0, dim: int = 64, checkpoint=None):
        if kind not in ("random_conv", "trained_probe"):
            raise FidError(f"unknown extractor kind {kind!r}")
        self.kind = kind
        if kind == "random_conv":
            if dim < 2 or dim % 2:
                raise FidError(f"feature dimension must be even and >= 2, got {dim}")
            c2 = dim // 2
            c1 = max(c2 // 2, 1)
            rng = np.random.default_rng(seed)
            self.w1 = (rng.standard_normal((c1, 1, 3, 3)) / 3.0).astype(np.float32)
            self.w2 = (rng.standard_normal((c2, c1, 3, 3)) / np.sqrt(c1 * 9.0)).astype(np.float32)
        else:
            if checkpoint is None:
                raise FidError("trained_probe extractor needs a checkpoint path")
            arrays, meta = load_checkpoint(checkpoint)
            if meta.get("kind") != "feature_probe":
                raise FidError(f"checkpoint {checkpoint} is not a feature probe")
            self.w1 = arrays["w1"].astype(np.float32)
            self.w2 = arrays["w2"].astype(np.float32)
        self.dim = 2 * self.w2.shape[0]

    def save(self, path) -> None:
        save_checkpoint(path, {"w1": self.w1, "w2": self.w2}, {"kind": "feature_probe"})

    def __call__(self, slice2d: np.ndarray) -> np.ndarray:
        x = normalize_hu(slice2d)[None]
        h = np.maximum(_conv2d(x, self.w1), 0.0)
        h = np.maximum(_conv2d(h, self.w2), 0.0)
        flat = h.reshape(h.shape[0], -1)
        return np.concatenate([flat.mean(axis=1), flat.std(axis=1)]).astype(np.float64)


def compute_stats(slices, extractor) -> GaussianStats:
    """Sample mean and unbiased covariance of extracted features."""
    if len(slices) < 2:
        raise FidError(f"need >= 2 slices for covariance, got {len(slices)}")
    feats = np.stack([extractor(s) for s in slices])
    n, d = feats.shape
    if n < d + 1:
        import warnings
        warnings.warn(f"covariance from {n} samples in {d} dims is rank-deficient")
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = centered.T @ centered / (n - 1)
    return GaussianStats(mu=mu, sigma=sigma, n=n)


def _jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations."""
    a = a.astype(np.float64).copy()
    d = a.shape[0]
    v = np.eye(d)
    norm = np.linalg.norm(a)
    if norm == 0.0:
        return np.zeros(d), v
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a ** 2) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * norm:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e153:  # theta^2 would overflow; use the 1st-order root
                    t = 1.0 / (2.0 * theta)
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v


def matrix_sqrt_psd(a: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via Jacobi eigendecomposition."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise FidError(f"matrix_sqrt_psd: expected square matrix, got {a.shape}")
    asym = np.max(np.abs(a - a.T))
    scale = max(np.max(np.abs(a)), 1.0)
    if asym > 1e-8 * scale:
        raise FidError(f"matrix_sqrt_psd: asymmetry {asym:.3e} beyond tolerance")
    a = 0.5 * (a + a.T)
    eigvals, eigvecs = _jacobi_eigh(a)
    floor = -1e-8 * scale
    if np.any(eigvals < floor):
        raise FidError(f"matrix_sqrt_psd: eigenvalue {eigvals.min():.3e} below PSD tolerance")
    root = np.sqrt(np.clip(eigvals, 0.0, None))
    s = (eigvecs * root) @ eigvecs.T
    return 0.5 * (s + s.T)


def frechet_distance(s1: GaussianStats, s2: GaussianStats) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)."""
    if s1.mu.shape != s2.mu.shape:
        raise FidError(f"dimension mismatch: {s1.mu.shape} vs {s2.mu.shape}")
    diff = s1.mu - s2.mu
    root1 = matrix_sqrt_psd(s1.sigma)
    inner = root1 @ s2.sigma @ root1
    cross = matrix_sqrt_psd(0.5 * (inner + inner.T))
    val = float(diff @ diff + np.trace(s1.sigma) + np.trace(s2.sigma) - 2.0 * np.trace(cross))
    if val < -1e-6:
        raise FidError(f"frechet_distance: value {val:.3e} below numerical floor")
    return max(val, 0.0)


def fid_report(real_volumes, synth_volumes, extractor, fraction: float = 0.5) -> dict:
    """Per-plane Frechet distances plus their arithmetic mean."""
    if not real_volumes or not synth_volumes:
        raise FidError("fid_report: both volume sets must be nonempty")
    out = {}
    for plane in PLANES:
        sel = PlaneSelection(plane=plane, fraction=fraction)
        s_real = compute_stats(extract_slices(real_volumes, sel), extractor)
        s_synth = compute_stats(extract_slices(synth_volumes, sel), extractor)
        out[f"fid_{plane}"] = frechet_distance(s_real, s_synth)
    out["fid_avg"] = (out["fid_xy"] + out["fid_yz"] + out["fid_xz"]) / 3.0
    return out
