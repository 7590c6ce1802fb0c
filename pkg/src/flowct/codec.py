"""Convolutional autoencoder compressing volumes into low-res latents.

The codec is trained once with an L1 reconstruction loss, its latents are
rescaled to unit per-channel std on the training corpus, and it is then
frozen; everything downstream treats it as a fixed, pure transform.
Default geometry: spatial factor 4 with 4 latent channels, a 16x
compression of the scalar volume.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, params_hash, save_checkpoint
from .nifti import Volume
from .optim import AdamW

HU_CENTER = 1024.0
HU_HALF_RANGE = 2047.5


class CodecError(Exception):
    pass


@dataclass
class CodecConfig:
    spatial_factor: int = 4
    channels: int = 4
    hidden: tuple = (8, 16)
    epochs: int = 40
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        n_down = int(round(np.log2(self.spatial_factor)))
        if 2 ** n_down != self.spatial_factor:
            raise CodecError(f"spatial_factor must be a power of 2, got {self.spatial_factor}")
        if len(self.hidden) != n_down:
            raise CodecError(f"hidden widths {self.hidden} must have one entry per halving ({n_down})")

    @property
    def n_down(self) -> int:
        return int(round(np.log2(self.spatial_factor)))

    @property
    def compression_ratio(self) -> float:
        return self.spatial_factor ** 3 / self.channels


@dataclass
class Latent:
    """Multi-channel latent grid (c, D/f, H/f, W/f) with source spacing."""

    grid: np.ndarray
    spacing: tuple

    @property
    def shape(self):
        return self.grid.shape


def normalize_hu(grid: np.ndarray) -> np.ndarray:
    return ((np.asarray(grid, dtype=np.float32) + HU_CENTER) / HU_HALF_RANGE - 1.0).astype(np.float32)


def denormalize_hu(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float32) + 1.0) * HU_HALF_RANGE - HU_CENTER


class Codec:
    """Encoder/decoder parameter set; pure encode/decode once frozen."""

    def __init__(self, config: CodecConfig, dtype=np.float32):
        self.config = config
        self.frozen = False
        self.channel_scale = np.ones(config.channels, dtype=np.float32)
        self.final_recon_l1 = None
        rng = np.random.default_rng(config.seed)
        self.params = {}
        widths = list(config.hidden)
        # encoder: one stride-2 conv per halving, then a stride-1 head
        chain = [1] + widths
        for i in range(len(widths)):
            self._add_conv(rng, f"enc{i}", chain[i], chain[i + 1], dtype)
        self._add_conv(rng, f"enc{len(widths)}", chain[-1], config.channels, dtype)
        # decoder mirrors the encoder with nearest-neighbor upsampling
        rev = [config.channels] + widths[::-1]
        for i in range(len(widths)):
            self._add_conv(rng, f"dec{i}", rev[i], rev[i + 1], dtype)
        self._add_conv(rng, f"dec{len(widths)}", rev[-1], 1, dtype)

    def _add_conv(self, rng, name: str, cin: int, cout: int, dtype):
        fan_in = cin * 27
        w = rng.standard_normal((cout, cin, 3, 3, 3)) / np.sqrt(fan_in)
        self.params[f"{name}_w"] = Tensor(w.astype(dtype), requires_grad=True)
        self.params[f"{name}_b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def _enc_forward(self, x: Tensor) -> Tensor:
        n = self.config.n_down
        h = x
        for i in range(n):
            h = ad.conv3d(h, self.params[f"enc{i}_w"], self.params[f"enc{i}_b"], stride=2, padding=1)
            h = ad.silu(h)
        return ad.conv3d(h, self.params[f"enc{n}_w"], self.params[f"enc{n}_b"], stride=1, padding=1)

    def _dec_forward(self, z: Tensor) -> Tensor:
        n = self.config.n_down
        h = z
        for i in range(n):
            h = ad.conv3d(h, self.params[f"dec{i}_w"], self.params[f"dec{i}_b"], stride=1, padding=1)
            h = ad.silu(h)
            h = ad.upsample_nearest(h, 2)
        return ad.conv3d(h, self.params[f"dec{n}_w"], self.params[f"dec{n}_b"], stride=1, padding=1)

    def _check_divisible(self, shape):
        f = self.config.spatial_factor
        if any(e % f for e in shape):
            raise CodecError(
                f"volume shape {tuple(shape)} not divisible by spatial factor {f}; "
                f"resample to a snapped shape first (see snap_shape)"
            )

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
        self.frozen = True

    def hash(self) -> str:
        arrays = {name: t.data for name, t in self.params.items()}
        arrays["channel_scale"] = self.channel_scale
        return params_hash(arrays)

    def encode(self, volume: Volume) -> Latent:
        if not self.frozen:
            raise CodecError("encode: codec must be frozen before use as a fixed compressor")
        self._check_divisible(volume.shape)
        x = Tensor(normalize_hu(volume.grid)[None])
        z = self._enc_forward(x).data
        z = z * self.channel_scale[:, None, None, None]
        return Latent(grid=z, spacing=volume.spacing)

    def decode(self, latent: Latent) -> Volume:
        if not self.frozen:
            raise CodecError("decode: codec must be frozen before use as a fixed compressor")
        z = np.asarray(latent.grid, dtype=np.float32) / self.channel_scale[:, None, None, None]
        x = self._dec_forward(Tensor(z)).data[0]
        return Volume(grid=denormalize_hu(x), spacing=latent.spacing)

    def decode_sliding(self, latent: Latent, patch, overlap) -> Volume:
        """Decode window-by-window, blending overlaps by uniform averaging."""
        if not self.frozen:
            raise CodecError("decode_sliding: codec must be frozen")
        ext = latent.grid.shape[1:]
        patch = (patch,) * 3 if np.isscalar(patch) else tuple(int(p) for p in patch)
        overlap = (overlap,) * 3 if np.isscalar(overlap) else tuple(int(o) for o in overlap)
        for ax in range(3):
            if patch[ax] <= 0:
                raise CodecError(f"decode_sliding: zero-size patch on axis {ax}")
            if patch[ax] > ext[ax]:
                raise CodecError(f"decode_sliding: patch {patch} exceeds latent extent {ext}")
            if overlap[ax] < 0 or overlap[ax] >= patch[ax]:
                raise CodecError(f"decode_sliding: overlap {overlap} must be in [0, patch)")

        def positions(extent, p, ov):
            stride = p - ov
            pos = list(range(0, extent - p + 1, stride))
            if pos[-1] != extent - p:
                pos.append(extent - p)
            return pos

        f = self.config.spatial_factor
        z = np.asarray(latent.grid, dtype=np.float32) / self.channel_scale[:, None, None, None]
        out_shape = tuple(e * f for e in ext)
        acc = np.zeros(out_shape, dtype=np.float64)
        cnt = np.zeros(out_shape, dtype=np.float64)
        for pz in positions(ext[0], patch[0], overlap[0]):
            for py in positions(ext[1], patch[1], overlap[1]):
                for px in positions(ext[2], patch[2], overlap[2]):
                    sub = z[:, pz:pz + patch[0], py:py + patch[1], px:px + patch[2]]
                    block = self._dec_forward(Tensor(np.ascontiguousarray(sub))).data[0]
                    sl = (slice(pz * f, (pz + patch[0]) * f),
                          slice(py * f, (py + patch[1]) * f),
                          slice(px * f, (px + patch[2]) * f))
                    acc[sl] += block
                    cnt[sl] += 1.0
        blended = (acc / cnt).astype(np.float32)
        return Volume(grid=denormalize_hu(blended), spacing=latent.spacing)

    def save(self, path) -> None:
        arrays = {name: t.data for name, t in self.params.items()}
        arrays["channel_scale"] = self.channel_scale
        meta = {
            "kind": "codec",
            "spatial_factor": self.config.spatial_factor,
            "channels": self.config.channels,
            "hidden": list(self.config.hidden),
            "frozen": self.frozen,
            "final_recon_l1": self.final_recon_l1,
        }
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Codec":
        arrays, meta = load_checkpoint(path)
        cfg = CodecConfig(spatial_factor=meta["spatial_factor"], channels=meta["channels"],
                          hidden=tuple(meta["hidden"]))
        codec = cls(cfg)
        for name in codec.params:
            codec.params[name] = Tensor(arrays[name], requires_grad=False)
        codec.channel_scale = arrays["channel_scale"]
        codec.final_recon_l1 = meta.get("final_recon_l1")
        if meta.get("frozen"):
            codec.freeze()
        return codec


def recon_l1(codec: Codec, volumes) -> float:
    """Current mean L1 reconstruction error in normalized units."""
    total = 0.0
    for vol in volumes:
        codec._check_divisible(vol.shape)
        x = normalize_hu(vol.grid)[None]
        recon = codec._dec_forward(Tensor(codec._enc_forward(Tensor(x)).data)).data
        total += float(np.mean(np.abs(recon - x)))
    return total / len(volumes)


def train_codec(volumes, config: CodecConfig, log=None) -> Codec:
    """Train the autoencoder on HU-normalized volumes, then freeze it.

    Latents are rescaled afterwards so each channel has unit std on the
    training corpus, which keeps downstream caps in std units meaningful.
    """
    if not volumes:
        raise CodecError("train_codec: empty corpus")
    codec = Codec(config)
    for vol in volumes:
        codec._check_divisible(vol.shape)
    opt = AdamW(codec.params, lr=config.lr, weight_decay=0.0)
    norm_grids = [normalize_hu(v.grid)[None] for v in volumes]

    last_epoch_losses = []
    for epoch in range(config.epochs):
        last_epoch_losses = []
        for x_np in norm_grids:
            x = Tensor(x_np)
            with ad.Tape() as tape:
                z = codec._enc_forward(x)
                recon = codec._dec_forward(z)
                loss = ad.mean(ad.tensor_abs(recon - x))
            grads = ad.backward(loss, tape)
            named = {name: grads[t].data for name, t in codec.params.items() if t in grads}
            opt.step(named)
            last_epoch_losses.append(loss.item())
        if log is not None:
            log.append({"module": "codec", "epoch": epoch,
                        "recon_l1": float(np.mean(last_epoch_losses))})

    codec.final_recon_l1 = float(np.mean(last_epoch_losses))

    # unit per-channel latent std over the corpus
    feats = [codec._enc_forward(Tensor(x_np)).data for x_np in norm_grids]
    flat = np.concatenate([f.reshape(f.shape[0], -1) for f in feats], axis=1)
    std = flat.std(axis=1)
    codec.channel_scale = (1.0 / np.maximum(std, 1e-6)).astype(np.float32)
    codec.freeze()
    return codec
