"""Procedural phantom volumes: ellipsoidal organs with optional lesions.

Each phantom is a paired (Volume, LabelMap).  Organs are painted in list
order (later organs overwrite earlier ones), lesions are painted last and
must stay inside their host organ.  HU values are organ mean plus Gaussian
noise truncated at 3 sigma so the write-time HU clamp cannot bias medians.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nifti import LabelMap, Volume

# repo default contrast levels (plausible, not clinical ground truth)
DEFAULT_ORGAN_HU = {
    "air": -1000.0,
    "lung": -700.0,
    "liver": 60.0,
    "spleen": 50.0,
    "bone": 400.0,
}
DEFAULT_LESION_DELTA = -35.0
DEFAULT_LABELS = {"air": 0, "lung": 1, "liver": 2, "spleen": 3, "bone": 4, "lesion": 5}


class PhantomError(Exception):
    pass


@dataclass
class OrganSpec:
    label: int
    name: str
    center: tuple  # voxel coords (z, y, x)
    radii: tuple   # voxels, per axis
    mean_hu: float
    sigma: float = 5.0


@dataclass
class LesionSpec:
    label: int
    host_label: int
    center_offset: tuple  # relative to host center, voxels
    radii: tuple
    hu_delta: float = DEFAULT_LESION_DELTA


@dataclass
class PhantomSpec:
    shape: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    background_hu: float = -1000.0
    background_sigma: float = 5.0
    organs: list = field(default_factory=list)
    lesions: list = field(default_factory=list)
    seed: int = 0


def _ellipsoid_mask(shape, center, radii) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    cz, cy, cx = center
    rz, ry, rx = radii
    return ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _truncated_normal(rng: np.random.Generator, sigma: float, size: int) -> np.ndarray:
    """Gaussian with |draw| <= 3 sigma, by rejection resampling."""
    if sigma == 0.0 or size == 0:
        return np.zeros(size)
    out = rng.standard_normal(size)
    bad = np.abs(out) > 3.0
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 3.0
    return out * sigma


def _validate(spec: PhantomSpec) -> None:
    shape = tuple(int(e) for e in spec.shape)
    seen = set()
    for organ in spec.organs:
        if organ.label in seen or organ.label == 0:
            raise PhantomError(f"organ {organ.name!r}: duplicate or reserved label {organ.label}")
        seen.add(organ.label)
        for ax in range(3):
            r = float(organ.radii[ax])
            c = float(organ.center[ax])
            if r <= 0:
                raise PhantomError(f"organ {organ.name!r}: non-positive radius on axis {ax}")
            if c - r < 0 or c + r > shape[ax] - 1:
                raise PhantomError(
                    f"organ {organ.name!r}: ellipsoid leaves the grid on axis {ax} "
                    f"(center {c}, radius {r}, extent {shape[ax]})"
                )
    hosts = {o.label: o for o in spec.organs}
    for les in spec.lesions:
        if les.host_label not in hosts:
            raise PhantomError(f"lesion {les.label}: host label {les.host_label} not among organs")
        if les.label in seen or les.label == 0:
            raise PhantomError(f"lesion {les.label}: duplicate or reserved label")
        host = hosts[les.host_label]
        # conservative containment bound for axis-aligned ellipsoids
        t = 0.0
        for ax in range(3):
            t += ((abs(float(les.center_offset[ax])) + float(les.radii[ax])) / float(host.radii[ax])) ** 2
        if t > 1.0:
            raise PhantomError(
                f"lesion {les.label}: not contained in host organ {host.name!r} (bound {t:.3f} > 1)"
            )


def generate_phantom(spec: PhantomSpec):
    """Render a PhantomSpec into a (Volume, LabelMap) pair."""
    _validate(spec)
    shape = tuple(int(e) for e in spec.shape)
    rng = np.random.default_rng(spec.seed)

    labels = np.zeros(shape, dtype=np.int16)
    vocab = {0: "air"}
    mean_of = {0: float(spec.background_hu)}
    sigma_of = {0: float(spec.background_sigma)}
    for organ in spec.organs:
        labels[_ellipsoid_mask(shape, organ.center, organ.radii)] = organ.label
        vocab[organ.label] = organ.name
        mean_of[organ.label] = float(organ.mean_hu)
        sigma_of[organ.label] = float(organ.sigma)
    hosts = {o.label: o for o in spec.organs}
    for les in spec.lesions:
        host = hosts[les.host_label]
        center = tuple(float(host.center[ax]) + float(les.center_offset[ax]) for ax in range(3))
        mask = _ellipsoid_mask(shape, center, les.radii)
        if not np.all(labels[mask] == les.host_label):
            raise PhantomError(f"lesion {les.label}: voxels extend outside host label {les.host_label}")
        labels[mask] = les.label
        vocab[les.label] = f"lesion_in_{host.name}"
        mean_of[les.label] = float(host.mean_hu) + float(les.hu_delta)
        sigma_of[les.label] = float(host.sigma)

    grid = np.empty(shape, dtype=np.float32)
    # one noise stream per label, in sorted label order for determinism
    for label in sorted(mean_of):
        where = labels == label
        n = int(where.sum())
        grid[where] = mean_of[label] + _truncated_normal(rng, sigma_of[label], n)
    volume = Volume(grid=grid, spacing=spec.spacing)
    labelmap = LabelMap(grid=labels, spacing=spec.spacing, vocabulary=vocab)
    return volume, labelmap


def _shift_bool(mask: np.ndarray, axis: int, step: int) -> np.ndarray:
    out = np.zeros_like(mask)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    if step > 0:
        dst[axis] = slice(step, None)
        src[axis] = slice(None, -step)
    else:
        dst[axis] = slice(None, step)
        src[axis] = slice(-step, None)
    out[tuple(dst)] = mask[tuple(src)]
    return out


def dilate_mask(mask: np.ndarray, r: int = 1) -> np.ndarray:
    """Binary dilation with a 6-connected structuring element, r times."""
    out = mask.astype(bool)
    for _ in range(int(r)):
        grown = out.copy()
        for axis in range(3):
            grown |= _shift_bool(out, axis, 1)
            grown |= _shift_bool(out, axis, -1)
        out = grown
    return out


def erode_mask(mask: np.ndarray, r: int = 1) -> np.ndarray:
    """Binary erosion, 6-connected, r times; the grid border counts as empty."""
    out = mask.astype(bool)
    for _ in range(int(r)):
        kept = out.copy()
        for axis in range(3):
            kept &= _shift_bool(out, axis, 1)
            kept &= _shift_bool(out, axis, -1)
        out = kept
    return out


def augment_lesion_mask(labelmap: LabelMap, ops, lesion_label: int, host_label: int) -> LabelMap:
    """Apply a sequence of ("erode", r) / ("dilate", r) / ("translate", (dz,dy,dx)) ops.

    Only lesion voxels change: vacated voxels revert to the host label and
    grown voxels must currently belong to the host, otherwise the lesion
    would leave its organ and an error is raised.
    """
    labels = labelmap.grid.copy()
    if not np.any(labels == lesion_label):
        raise PhantomError(f"augment_lesion_mask: lesion label {lesion_label} absent")
    for op in ops:
        kind, arg = op[0], op[1]
        lesion = labels == lesion_label
        if kind == "erode":
            new = erode_mask(lesion, arg)
        elif kind == "dilate":
            new = dilate_mask(lesion, arg)
        elif kind == "translate":
            new = lesion
            for axis in range(3):
                step = int(arg[axis])
                if step:
                    shifted = _shift_bool(new, axis, step)
                    if shifted.sum() != new.sum():
                        raise PhantomError(f"augment_lesion_mask: translate {tuple(arg)} pushes lesion off the grid")
                    new = shifted
        else:
            raise PhantomError(f"augment_lesion_mask: unknown op kind {kind!r}")
        grown = new & ~lesion
        if np.any(labels[grown] != host_label):
            raise PhantomError(
                f"augment_lesion_mask: op {kind!r} pushes lesion {lesion_label} outside host {host_label}"
            )
        labels[lesion & ~new] = host_label
        labels[grown] = lesion_label
    return LabelMap(grid=labels, spacing=labelmap.spacing, vocabulary=dict(labelmap.vocabulary))


def default_phantom_spec(shape=(32, 32, 32), spacing=(1.0, 1.0, 1.0), seed: int = 0,
                         with_lesion: bool = True) -> PhantomSpec:
    """A standard small phantom: lung, liver, spleen, bone, optional liver lesion.

    Organ geometry scales with the grid so any snap-legal shape works.
    """
    d, h, w = (int(e) for e in shape)

    def c(fz, fy, fx):
        return (fz * (d - 1), fy * (h - 1), fx * (w - 1))

    def r(fz, fy, fx):
        return (max(fz * d, 1.5), max(fy * h, 1.5), max(fx * w, 1.5))

    organs = [
        OrganSpec(DEFAULT_LABELS["lung"], "lung", c(0.30, 0.32, 0.30), r(0.16, 0.17, 0.16), DEFAULT_ORGAN_HU["lung"]),
        OrganSpec(DEFAULT_LABELS["liver"], "liver", c(0.62, 0.60, 0.62), r(0.20, 0.19, 0.20), DEFAULT_ORGAN_HU["liver"]),
        OrganSpec(DEFAULT_LABELS["spleen"], "spleen", c(0.70, 0.28, 0.25), r(0.10, 0.10, 0.10), DEFAULT_ORGAN_HU["spleen"]),
        OrganSpec(DEFAULT_LABELS["bone"], "bone", c(0.28, 0.72, 0.70), r(0.09, 0.10, 0.09), DEFAULT_ORGAN_HU["bone"]),
    ]
    lesions = []
    if with_lesion:
        lesions.append(LesionSpec(DEFAULT_LABELS["lesion"], DEFAULT_LABELS["liver"],
                                  (0.0, 0.0, 0.0), r(0.07, 0.07, 0.07)))
    return PhantomSpec(shape=(d, h, w), spacing=spacing, organs=organs, lesions=lesions, seed=seed)
