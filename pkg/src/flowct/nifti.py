"""Minimal NIfTI-1 reader/writer plus volume resampling utilities.

Supports the uncompressed, little-endian subset this project emits:
348-byte header, magic "n+1\\0", vox_offset 352, datatypes int16 and
float32.  Volumes carry Hounsfield values on a (D, H, W) grid with
per-axis spacing (sx, sy, sz) in mm; x (W) varies fastest on disk.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352.0
MAGIC = b"n+1\x00"
DT_INT16 = 4
DT_FLOAT32 = 16
HU_MIN = -1024.0
HU_MAX = 3071.0

# full NIfTI-1 header layout, little-endian
_HDR_FMT = "<i10s18sihcc8h3f4h8f3fhcc4f2i80s24s2h3f3f4f4f4f16s4s"
assert struct.calcsize(_HDR_FMT) == HEADER_SIZE


class NiftiError(Exception):
    pass


class BadMagicError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedFileError(NiftiError):
    pass


@dataclass
class Volume:
    """Scalar HU grid of shape (D, H, W) with spacing (sx, sy, sz) mm."""

    grid: np.ndarray
    spacing: tuple

    def __post_init__(self):
        self.grid = np.asarray(self.grid)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.grid.ndim != 3:
            raise ValueError(f"Volume grid must be 3-d, got shape {self.grid.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"Volume spacing must be positive, got {self.spacing}")

    @property
    def shape(self):
        return self.grid.shape


@dataclass
class LabelMap:
    """Integer label grid aligned with a Volume; label 0 is background/air."""

    grid: np.ndarray
    spacing: tuple
    vocabulary: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.grid.ndim != 3:
            raise ValueError(f"LabelMap grid must be 3-d, got shape {self.grid.shape}")
        if not np.issubdtype(self.grid.dtype, np.integer):
            raise ValueError(f"LabelMap grid must be integer, got dtype {self.grid.dtype}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"LabelMap spacing must be positive, got {self.spacing}")

    @property
    def shape(self):
        return self.grid.shape


def _pack_header(shape, spacing, datatype: int, scl_slope: float, scl_inter: float) -> bytes:
    d, h, w = shape
    sx, sy, sz = spacing
    bitpix = 16 if datatype == DT_INT16 else 32
    return struct.pack(
        _HDR_FMT,
        HEADER_SIZE,          # sizeof_hdr
        b"", b"", 0, 0, b"r", b"\x00",
        3, w, h, d, 1, 1, 1, 1,          # dim (x fastest)
        0.0, 0.0, 0.0,                   # intent_p1..p3
        0,                               # intent_code
        datatype,
        bitpix,
        0,                               # slice_start
        1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0,  # pixdim
        VOX_OFFSET,
        scl_slope,
        scl_inter,
        0,                               # slice_end
        b"\x00", b"\x00",
        0.0, 0.0, 0.0, 0.0,              # cal_max, cal_min, slice_duration, toffset
        0, 0,
        b"", b"",
        0, 0,                            # qform_code, sform_code
        0.0, 0.0, 0.0,                   # quatern_b/c/d
        0.0, 0.0, 0.0,                   # qoffset
        sx, 0.0, 0.0, 0.0,
        0.0, sy, 0.0, 0.0,
        0.0, 0.0, sz, 0.0,
        b"",
        MAGIC,
    )


def write_nifti(obj, path, datatype: int | None = None) -> None:
    """Write a Volume or LabelMap; datatype defaults to f32 / int16."""
    is_labels = isinstance(obj, LabelMap)
    if datatype is None:
        datatype = DT_INT16 if is_labels else DT_FLOAT32
    if datatype not in (DT_INT16, DT_FLOAT32):
        raise UnsupportedDatatypeError(f"write_nifti: datatype code {datatype} not supported")
    grid = obj.grid
    if not is_labels:
        if not np.all(np.isfinite(grid)):
            raise ValueError(f"write_nifti: non-finite values in volume ({path})")
        grid = np.clip(grid, HU_MIN, HU_MAX)

    if is_labels:
        slope, inter = 1.0, 0.0
        payload = grid.astype("<i2" if datatype == DT_INT16 else "<f4")
    elif datatype == DT_INT16:
        # store raw = HU + 1024 in [0, 4095]
        slope, inter = 1.0, -1024.0
        payload = np.rint(grid - inter).astype("<i2")
    else:
        slope, inter = 1.0, 0.0
        payload = grid.astype("<f4")

    header = _pack_header(obj.shape, obj.spacing, datatype, slope, inter)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(b"\x00" * (int(VOX_OFFSET) - HEADER_SIZE))
            fh.write(np.ascontiguousarray(payload).tobytes())
    except OSError as exc:
        raise NiftiError(f"write_nifti: I/O failure for {path}: {exc}") from exc


def read_nifti(path, as_labels: bool = False):
    """Read a supported NIfTI-1 file into a Volume (or LabelMap)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise NiftiError(f"read_nifti: I/O failure for {path}: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise TruncatedFileError(f"read_nifti: {path}: {len(raw)} bytes, header needs {HEADER_SIZE}")
    fields = struct.unpack(_HDR_FMT, raw[:HEADER_SIZE])
    magic = fields[-1]
    if magic != MAGIC:
        raise BadMagicError(f"read_nifti: {path}: bad magic {magic!r}")
    sizeof_hdr = fields[0]
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiError(f"read_nifti: {path}: sizeof_hdr {sizeof_hdr} != {HEADER_SIZE}")
    dim = fields[7:15]
    datatype = fields[19]
    pixdim = fields[22:30]
    vox_offset = fields[30]
    scl_slope = fields[31]
    scl_inter = fields[32]
    if datatype not in (DT_INT16, DT_FLOAT32):
        raise UnsupportedDatatypeError(f"read_nifti: {path}: datatype code {datatype} not supported")
    if dim[0] != 3:
        raise NiftiError(f"read_nifti: {path}: expected 3-d data, dim[0]={dim[0]}")
    w, h, d = dim[1], dim[2], dim[3]
    spacing = (float(pixdim[1]), float(pixdim[2]), float(pixdim[3]))

    np_dtype = np.dtype("<i2") if datatype == DT_INT16 else np.dtype("<f4")
    count = d * h * w
    start = int(vox_offset)
    need = start + count * np_dtype.itemsize
    if len(raw) < need:
        raise TruncatedFileError(f"read_nifti: {path}: payload needs {need} bytes, file has {len(raw)}")
    flat = np.frombuffer(raw[start:need], dtype=np_dtype)
    grid = flat.reshape(d, h, w)

    slope = float(scl_slope) if scl_slope != 0.0 else 1.0
    inter = float(scl_inter)
    if as_labels:
        if slope != 1.0 or inter != 0.0:
            raise NiftiError(f"read_nifti: {path}: label map with nontrivial scaling ({slope}, {inter})")
        return LabelMap(grid=grid.astype(np.int16), spacing=spacing)
    values = grid.astype(np.float32) * np.float32(slope) + np.float32(inter)
    return Volume(grid=values, spacing=spacing)


def _axis_linear(arr: np.ndarray, axis: int, new_len: int) -> np.ndarray:
    """Linear interpolation along one axis with pixel-center alignment."""
    old_len = arr.shape[axis]
    if new_len == old_len:
        return arr
    scale = old_len / new_len
    src = (np.arange(new_len) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, old_len - 1.0)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, old_len - 1)
    frac = src - lo
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = new_len
    frac = frac.reshape(shape)
    return a * (1.0 - frac) + b * frac


def _axis_nearest(arr: np.ndarray, axis: int, new_len: int) -> np.ndarray:
    old_len = arr.shape[axis]
    if new_len == old_len:
        return arr
    scale = old_len / new_len
    src = (np.arange(new_len) + 0.5) * scale - 0.5
    idx = np.clip(np.rint(src).astype(np.intp), 0, old_len - 1)
    return np.take(arr, idx, axis=axis)


def resample(obj, target_shape, mode: str):
    """Resample a Volume or LabelMap to target_shape.

    mode "trilinear" (Volumes only) or "nearest".  Spacing is rescaled so
    the physical field of view is preserved per axis.
    """
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"resample: unknown mode {mode!r}")
    target_shape = tuple(int(t) for t in target_shape)
    if len(target_shape) != 3 or any(t <= 0 for t in target_shape):
        raise ValueError(f"resample: bad target shape {target_shape}")
    is_labels = isinstance(obj, LabelMap)
    if is_labels and mode == "trilinear":
        raise ValueError("resample: trilinear interpolation is not valid for label maps; use nearest")

    # spacing legend is (sx, sy, sz) while the grid is (D, H, W) = (z, y, x)
    old_shape = obj.shape
    sx, sy, sz = obj.spacing
    per_axis_spacing = [sz, sy, sx]
    new_spacing_axis = [per_axis_spacing[ax] * (old_shape[ax] / target_shape[ax]) for ax in range(3)]
    new_spacing = (new_spacing_axis[2], new_spacing_axis[1], new_spacing_axis[0])

    if mode == "trilinear":
        out = obj.grid.astype(np.float64)
        for ax in range(3):
            out = _axis_linear(out, ax, target_shape[ax])
        return Volume(grid=out.astype(obj.grid.dtype), spacing=new_spacing)
    out = obj.grid
    for ax in range(3):
        out = _axis_nearest(out, ax, target_shape[ax])
    if is_labels:
        return LabelMap(grid=out.copy(), spacing=new_spacing, vocabulary=dict(obj.vocabulary))
    return Volume(grid=out.copy(), spacing=new_spacing)


def snap_shape(shape, base: int):
    """Round each extent to the nearest multiple of base (ties up, min base)."""
    base = int(base)
    if base < 1:
        raise ValueError(f"snap_shape: base must be >= 1, got {base}")
    out = []
    for e in shape:
        q, r = divmod(int(e), base)
        m = q + 1 if 2 * r >= base else q
        out.append(max(m, 1) * base)
    return tuple(out)
