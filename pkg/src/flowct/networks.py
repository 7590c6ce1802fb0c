"""Velocity network (small 3D U-Net) and the control branch fused into it.

The velocity net predicts a latent-shaped velocity from (x_t, t, spacing).
The control encoder mirrors the U-Net encoder over a one-hot label mask
and injects its features through zero-initialized 1x1x1 projections, one
per encoder level, so an untrained control branch is an exact no-op.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, params_hash, save_checkpoint

OMEGA_MIN = 1.0
OMEGA_MAX = 100.0


class NetworkError(Exception):
    pass


@dataclass
class Conditioning:
    """Sampling/training condition: time t, voxel spacing, optional mask.

    The mask, when present, is a one-hot (V, d, h, w) array at latent
    resolution.
    """

    t: float
    spacing: tuple
    mask: np.ndarray | None = None


def sinusoid_frequencies(d_t: int) -> np.ndarray:
    if d_t < 2 or d_t % 2:
        raise NetworkError(f"time embedding dimension must be even and >= 2, got {d_t}")
    n = d_t // 2
    if n == 1:
        return np.array([OMEGA_MIN])
    return OMEGA_MIN * (OMEGA_MAX / OMEGA_MIN) ** (np.arange(n) / (n - 1))


def time_embedding(t: float, d_t: int, dtype=np.float32) -> np.ndarray:
    """Interleaved [sin(w_i t), cos(w_i t)] with geometric frequencies."""
    omega = sinusoid_frequencies(d_t)
    out = np.empty(d_t, dtype=dtype)
    out[0::2] = np.sin(omega * t)
    out[1::2] = np.cos(omega * t)
    return out


def time_embedding_lipschitz(d_t: int) -> float:
    """An upper bound C with |e(t) - e(t')| <= C |t - t'|."""
    omega = sinusoid_frequencies(d_t)
    return float(np.sqrt(np.sum(omega ** 2)))


def labelmap_to_latent_onehot(labelmap, factor: int, vocab_size: int, dtype=np.float32) -> np.ndarray:
    """One-hot channels at latent resolution via nearest-neighbor downsampling."""
    labels = labelmap.grid
    f = int(factor)
    if any(e % f for e in labels.shape):
        raise NetworkError(f"label grid {labels.shape} not divisible by factor {f}")
    low = labels[f // 2::f, f // 2::f, f // 2::f]
    if int(low.max(initial=0)) >= vocab_size:
        raise NetworkError(f"label id {int(low.max())} exceeds vocabulary size {vocab_size}")
    ids = np.arange(vocab_size).reshape(vocab_size, 1, 1, 1)
    return (low[None] == ids).astype(dtype)


def _block_param_names(prefix: str):
    return [f"{prefix}_conv1_w", f"{prefix}_conv1_b", f"{prefix}_emb_w", f"{prefix}_emb_b",
            f"{prefix}_conv2_w", f"{prefix}_conv2_b"]


class VelocityNet:
    """U-Net over latents; conditioning injected per block after conv1."""

    def __init__(self, levels: int = 2, base_channels: int = 16, in_channels: int = 4,
                 d_t: int = 8, d_s: int = 8, seed: int = 0, dtype=np.float32):
        if levels < 1:
            raise NetworkError(f"levels must be >= 1, got {levels}")
        self.levels = levels
        self.base_channels = base_channels
        self.in_channels = in_channels
        self.d_t = d_t
        self.d_s = d_s
        self.dtype = dtype
        self.frozen = False
        rng = np.random.default_rng(seed)
        self.params = {}
        self.level_channels = [base_channels * (2 ** l) for l in range(levels)]

        cin = in_channels
        for l, c in enumerate(self.level_channels):
            self._add_block(rng, f"enc{l}", cin, c)
            cin = c
        for l in range(levels - 2, -1, -1):
            self._add_block(rng, f"dec{l}", self.level_channels[l + 1] + self.level_channels[l],
                            self.level_channels[l])
        self._add_conv(rng, "out", self.level_channels[0], in_channels, k=3)
        d_e = d_t + d_s
        self.params["spacing_w"] = Tensor(
            (rng.standard_normal((d_s, 3)) * 0.1).astype(dtype), requires_grad=True)
        self.params["spacing_b"] = Tensor(np.zeros(d_s, dtype=dtype), requires_grad=True)
        self._d_e = d_e

    def _add_conv(self, rng, name: str, cin: int, cout: int, k: int = 3):
        fan_in = cin * k ** 3
        w = rng.standard_normal((cout, cin, k, k, k)) / np.sqrt(fan_in)
        self.params[f"{name}_w"] = Tensor(w.astype(self.dtype), requires_grad=True)
        self.params[f"{name}_b"] = Tensor(np.zeros(cout, dtype=self.dtype), requires_grad=True)

    def _add_block(self, rng, prefix: str, cin: int, cout: int):
        self._add_conv(rng, f"{prefix}_conv1", cin, cout)
        d_e = self.d_t + self.d_s
        w = rng.standard_normal((cout, d_e)) / np.sqrt(d_e)
        self.params[f"{prefix}_emb_w"] = Tensor(w.astype(self.dtype), requires_grad=True)
        self.params[f"{prefix}_emb_b"] = Tensor(np.zeros(cout, dtype=self.dtype), requires_grad=True)
        self._add_conv(rng, f"{prefix}_conv2", cout, cout)

    def _block(self, prefix: str, x: Tensor, emb: Tensor) -> Tensor:
        p = self.params
        h = ad.conv3d(x, p[f"{prefix}_conv1_w"], p[f"{prefix}_conv1_b"], stride=1, padding=1)
        proj = ad.matmul(p[f"{prefix}_emb_w"], emb) + p[f"{prefix}_emb_b"]
        h = h + ad.reshape(proj, (proj.shape[0], 1, 1, 1))
        h = ad.silu(h)
        h = ad.conv3d(h, p[f"{prefix}_conv2_w"], p[f"{prefix}_conv2_b"], stride=1, padding=1)
        return ad.silu(h)

    def embed(self, cond: Conditioning) -> Tensor:
        if any(s <= 0 for s in cond.spacing):
            raise NetworkError(f"non-positive voxel spacing {cond.spacing}")
        te = Tensor(time_embedding(float(cond.t), self.d_t, self.dtype))
        log_sp = Tensor(np.log(np.asarray(cond.spacing, dtype=self.dtype)))
        se = ad.matmul(self.params["spacing_w"], log_sp) + self.params["spacing_b"]
        return ad.concat_channels([te, se])

    def forward(self, x: Tensor, cond: Conditioning, extra=None) -> Tensor:
        t = float(cond.t)
        if not np.isfinite(t) or t < 0.0 or t > 1.0:
            raise NetworkError(f"conditioning time t={t} outside [0, 1]")
        if x.ndim != 4 or x.shape[0] != self.in_channels:
            raise NetworkError(f"latent shape {x.shape} incompatible with {self.in_channels} channels")
        div = 2 ** (self.levels - 1)
        if any(e % div for e in x.shape[1:]):
            raise NetworkError(f"latent spatial extents {x.shape[1:]} must be divisible by {div}")
        if extra is not None and len(extra) != self.levels:
            raise NetworkError(f"expected {self.levels} control features, got {len(extra)}")

        emb = self.embed(cond)
        skips = []
        h = x
        for l in range(self.levels):
            if l > 0:
                h = ad.downsample_avg(h, 2)
            h = self._block(f"enc{l}", h, emb)
            if extra is not None:
                h = h + extra[l]
            skips.append(h)
        h = skips[-1]
        for l in range(self.levels - 2, -1, -1):
            h = ad.upsample_nearest(h, 2)
            h = ad.concat_channels([skips[l], h])
            h = self._block(f"dec{l}", h, emb)
        return ad.conv3d(h, self.params["out_w"], self.params["out_b"], stride=1, padding=1)

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
        self.frozen = True

    def hash(self) -> str:
        return params_hash({name: t.data for name, t in self.params.items()})

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"kind": "velocity_net", "levels": self.levels, "base_channels": self.base_channels,
                "in_channels": self.in_channels, "d_t": self.d_t, "d_s": self.d_s,
                "frozen": self.frozen}
        meta.update(extra_meta or {})
        save_checkpoint(path, {name: t.data for name, t in self.params.items()}, meta)

    @classmethod
    def load(cls, path) -> "VelocityNet":
        arrays, meta = load_checkpoint(path)
        net = cls(levels=meta["levels"], base_channels=meta["base_channels"],
                  in_channels=meta["in_channels"], d_t=meta["d_t"], d_s=meta["d_s"])
        for name in net.params:
            net.params[name] = Tensor(arrays[name], requires_grad=True)
        if meta.get("frozen"):
            net.freeze()
        return net


class ControlEncoder:
    """Mask encoder mirroring the U-Net encoder, with zero-init fusion convs."""

    def __init__(self, base: VelocityNet, vocab_size: int = 6, seed: int = 0):
        self.vocab_size = vocab_size
        self.levels = base.levels
        self.d_t = base.d_t
        self.d_s = base.d_s
        self.dtype = base.dtype
        self.level_channels = list(base.level_channels)
        self.frozen = False
        rng = np.random.default_rng(seed)
        self.params = {}
        cin = vocab_size
        for l, c in enumerate(self.level_channels):
            self._add_block(rng, f"cenc{l}", cin, c)
            cin = c
            # fusion starts at exactly zero: the control branch is a no-op
            self.params[f"fuse{l}_w"] = Tensor(np.zeros((c, c, 1, 1, 1), dtype=self.dtype),
                                               requires_grad=True)
            self.params[f"fuse{l}_b"] = Tensor(np.zeros(c, dtype=self.dtype), requires_grad=True)
        self.params["spacing_w"] = Tensor(
            (rng.standard_normal((self.d_s, 3)) * 0.1).astype(self.dtype), requires_grad=True)
        self.params["spacing_b"] = Tensor(np.zeros(self.d_s, dtype=self.dtype), requires_grad=True)

    def _add_block(self, rng, prefix: str, cin: int, cout: int):
        for tag, ci in (("conv1", cin), ("conv2", cout)):
            w = rng.standard_normal((cout, ci, 3, 3, 3)) / np.sqrt(ci * 27)
            self.params[f"{prefix}_{tag}_w"] = Tensor(w.astype(self.dtype), requires_grad=True)
            self.params[f"{prefix}_{tag}_b"] = Tensor(np.zeros(cout, dtype=self.dtype), requires_grad=True)
        d_e = self.d_t + self.d_s
        w = rng.standard_normal((cout, d_e)) / np.sqrt(d_e)
        self.params[f"{prefix}_emb_w"] = Tensor(w.astype(self.dtype), requires_grad=True)
        self.params[f"{prefix}_emb_b"] = Tensor(np.zeros(cout, dtype=self.dtype), requires_grad=True)

    def _block(self, prefix: str, x: Tensor, emb: Tensor) -> Tensor:
        p = self.params
        h = ad.conv3d(x, p[f"{prefix}_conv1_w"], p[f"{prefix}_conv1_b"], stride=1, padding=1)
        proj = ad.matmul(p[f"{prefix}_emb_w"], emb) + p[f"{prefix}_emb_b"]
        h = h + ad.reshape(proj, (proj.shape[0], 1, 1, 1))
        h = ad.silu(h)
        h = ad.conv3d(h, p[f"{prefix}_conv2_w"], p[f"{prefix}_conv2_b"], stride=1, padding=1)
        return ad.silu(h)

    def embed(self, cond: Conditioning) -> Tensor:
        if any(s <= 0 for s in cond.spacing):
            raise NetworkError(f"non-positive voxel spacing {cond.spacing}")
        te = Tensor(time_embedding(float(cond.t), self.d_t, self.dtype))
        log_sp = Tensor(np.log(np.asarray(cond.spacing, dtype=self.dtype)))
        se = ad.matmul(self.params["spacing_w"], log_sp) + self.params["spacing_b"]
        return ad.concat_channels([te, se])

    def fusion_features(self, cond: Conditioning):
        """Zero-conv-projected encoder features, one Tensor per U-Net level."""
        if cond.mask is None:
            raise NetworkError("control branch requires a condition mask")
        mask = np.asarray(cond.mask, dtype=self.dtype)
        if mask.ndim != 4 or mask.shape[0] != self.vocab_size:
            raise NetworkError(f"mask shape {mask.shape} != ({self.vocab_size}, d, h, w)")
        emb = self.embed(cond)
        feats = []
        g = Tensor(mask)
        for l in range(self.levels):
            if l > 0:
                g = ad.downsample_avg(g, 2)
            g = self._block(f"cenc{l}", g, emb)
            feats.append(ad.conv3d(g, self.params[f"fuse{l}_w"], self.params[f"fuse{l}_b"],
                                   stride=1, padding=0))
        return feats

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
        self.frozen = True

    def hash(self) -> str:
        return params_hash({name: t.data for name, t in self.params.items()})

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"kind": "control_encoder", "vocab_size": self.vocab_size, "levels": self.levels,
                "d_t": self.d_t, "d_s": self.d_s, "level_channels": self.level_channels,
                "frozen": self.frozen}
        meta.update(extra_meta or {})
        save_checkpoint(path, {name: t.data for name, t in self.params.items()}, meta)

    @classmethod
    def load(cls, path, base: VelocityNet) -> "ControlEncoder":
        arrays, meta = load_checkpoint(path)
        ctrl = cls(base, vocab_size=meta["vocab_size"])
        for name in ctrl.params:
            ctrl.params[name] = Tensor(arrays[name], requires_grad=True)
        if meta.get("frozen"):
            ctrl.freeze()
        return ctrl


def velocity_forward(net: VelocityNet, x_t: Tensor, cond: Conditioning) -> Tensor:
    """Velocity prediction without any control branch."""
    return net.forward(x_t, cond, extra=None)


def control_forward(base: VelocityNet, ctrl: ControlEncoder, x_t: Tensor, cond: Conditioning) -> Tensor:
    """Velocity prediction with control features added at each encoder level."""
    if cond.mask is None:
        raise NetworkError("control_forward: conditioning mask missing")
    return base.forward(x_t, cond, extra=ctrl.fusion_features(cond))
