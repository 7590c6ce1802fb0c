"""HU quality gate: per-organ median statistics and calibrated bounds.

Thresholds come from the training corpus: per organ, lower = min(P5,
mu - 6 sigma) and upper = max(P95, mu + 6 sigma) over the per-volume
median HU samples, so every calibration volume passes by construction.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

THRESHOLDS_VERSION = 1
DEFAULT_MIN_VOXELS = 8


class QualityError(Exception):
    pass


@dataclass
class OrganStat:
    label: int
    medians: list
    mean: float
    std: float
    p5: float
    p95: float


@dataclass
class QualityThresholds:
    bounds: dict                      # label -> (lower, upper)
    stats: dict = field(default_factory=dict)  # label -> OrganStat
    min_voxels: int = DEFAULT_MIN_VOXELS

    def to_json(self) -> str:
        doc = {"version": THRESHOLDS_VERSION, "min_voxels": self.min_voxels,
               "bounds": {str(k): [float(v[0]), float(v[1])] for k, v in sorted(self.bounds.items())}}
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "QualityThresholds":
        doc = json.loads(text)
        if doc.get("version") != THRESHOLDS_VERSION:
            raise QualityError(f"thresholds document version {doc.get('version')} unsupported")
        bounds = {int(k): (float(v[0]), float(v[1])) for k, v in doc["bounds"].items()}
        return cls(bounds=bounds, min_voxels=int(doc.get("min_voxels", DEFAULT_MIN_VOXELS)))


def organ_median(volume, labelmap, label: int):
    """Median HU over the labeled voxels; None when the organ is absent."""
    if volume.shape != labelmap.shape:
        raise QualityError(f"volume shape {volume.shape} != labelmap shape {labelmap.shape}")
    values = volume.grid[labelmap.grid == label]
    if values.size == 0:
        return None
    return float(np.median(values))


def calibrate_thresholds(corpus, tracked_labels, min_voxels: int = DEFAULT_MIN_VOXELS) -> QualityThresholds:
    """Per-organ bounds from per-volume medians across the corpus.

    Organs with fewer than 2 usable samples are excluded with a warning;
    degenerate zero-spread organs get their bounds widened by 1 HU each way.
    """
    samples: dict = {label: [] for label in tracked_labels}
    for volume, labelmap in corpus:
        for label in tracked_labels:
            count = int((labelmap.grid == label).sum())
            if count >= min_voxels:
                samples[label].append(organ_median(volume, labelmap, label))
    bounds = {}
    stats = {}
    for label in tracked_labels:
        meds = samples[label]
        if len(meds) < 2:
            warnings.warn(f"organ label {label}: only {len(meds)} usable samples; excluded")
            continue
        arr = np.asarray(meds, dtype=np.float64)
        mu = float(arr.mean())
        sigma = float(arr.std(ddof=1))
        p5 = float(np.percentile(arr, 5.0))
        p95 = float(np.percentile(arr, 95.0))
        lower = min(p5, mu - 6.0 * sigma)
        upper = max(p95, mu + 6.0 * sigma)
        if lower == upper:
            lower -= 1.0
            upper += 1.0
        bounds[label] = (lower, upper)
        stats[label] = OrganStat(label=label, medians=list(meds), mean=mu, std=sigma, p5=p5, p95=p95)
    return QualityThresholds(bounds=bounds, stats=stats, min_voxels=min_voxels)


@dataclass
class QualityVerdict:
    passed: bool
    failures: list
    report: dict  # label -> {median, lower, upper, status}


def check(volume, labelmap, thresholds: QualityThresholds) -> QualityVerdict:
    """Pass iff every tracked organ present in the volume has an in-bound median.

    Absent organs are skipped; a volume with no tracked organs passes
    vacuously.
    """
    failures = []
    report = {}
    for label in sorted(thresholds.bounds):
        lower, upper = thresholds.bounds[label]
        med = organ_median(volume, labelmap, label)
        if med is None:
            report[label] = {"median": None, "lower": lower, "upper": upper, "status": "absent"}
            continue
        ok = lower <= med <= upper
        report[label] = {"median": med, "lower": lower, "upper": upper,
                         "status": "pass" if ok else "fail"}
        if not ok:
            failures.append(label)
    return QualityVerdict(passed=not failures, failures=failures, report=report)
