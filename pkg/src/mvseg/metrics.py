"""Volumetric segmentation metrics and per-region reports.

Distances are Euclidean in millimetres between centres of boundary voxels,
where a boundary voxel is a mask voxel with at least one face neighbour
outside the mask or outside the volume.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .data.volume import Volume3D
from .errors import FormatError, MetricUndefinedError, RegionError, ShapeError
from .stats import bootstrap

REGIONS = ("WG", "apex", "mid", "base")
CSV_COLUMNS = ("patient_id", "region", "dsc", "hd95_mm", "abd_mm", "rvd")
METRICS = ("dsc", "hd95_mm", "abd_mm", "rvd")
_FACES = ndimage.generate_binary_structure(3, 1)


def _pair(pred, ref, spacing=None):
    if isinstance(pred, Volume3D) or isinstance(ref, Volume3D):
        if not (isinstance(pred, Volume3D) and isinstance(ref, Volume3D)):
            raise ShapeError("pass both masks as Volume3D or both as arrays")
        if pred.spacing != ref.spacing:
            raise ShapeError(f"spacings differ: {pred.spacing} vs {ref.spacing}")
        spacing, pred, ref = pred.spacing, pred.data, ref.data
    a, b = np.asarray(pred).astype(bool), np.asarray(ref).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask extents differ: {a.shape} vs {b.shape}")
    sp = np.ones(a.ndim) if spacing is None else np.asarray(spacing, dtype=np.float64)
    return a, b, sp


def dsc(pred, ref, spacing=None) -> float:
    """Dice score in percent; 100 when both masks are empty."""
    a, b, _ = _pair(pred, ref, spacing)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    interior = ndimage.binary_erosion(mask, structure=_FACES, border_value=0)
    return mask & ~interior


def _min_distances(src: np.ndarray, dst: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = np.empty(len(src))
    for i in range(0, len(src), chunk):
        diff = src[i:i + chunk, None, :] - dst[None, :, :]
        out[i:i + chunk] = np.sqrt(np.min(np.einsum("ijk,ijk->ij", diff, diff), axis=1))
    return out


def surface_distances(pred, ref, spacing=None) -> tuple[np.ndarray, np.ndarray]:
    """Directed boundary distances ``(pred -> ref, ref -> pred)`` in mm."""
    a, b, sp = _pair(pred, ref, spacing)
    if not a.any() or not b.any():
        raise MetricUndefinedError("surface distance undefined for an empty mask")
    pa = np.argwhere(boundary(a)) * sp
    pb = np.argwhere(boundary(b)) * sp
    return _min_distances(pa, pb), _min_distances(pb, pa)


def hd95(pred, ref, spacing=None) -> float:
    """Max of the two directed 95th percentiles (linear interpolation)."""
    d_ab, d_ba = surface_distances(pred, ref, spacing)
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


def abd(pred, ref, spacing=None) -> float:
    """Mean of both directed distance sets pooled together."""
    d_ab, d_ba = surface_distances(pred, ref, spacing)
    return float(np.concatenate([d_ab, d_ba]).mean())


def rvd(pred, ref, spacing=None) -> float:
    """``100 |V_pred - V_ref| / V_ref`` (the voxel volume cancels on a shared grid)."""
    a, b, _ = _pair(pred, ref, spacing)
    vr = int(b.sum())
    if vr == 0:
        raise MetricUndefinedError("relative volume difference undefined for an empty reference")
    return 100.0 * abs(int(a.sum()) - vr) / vr


@dataclass(frozen=True)
class RegionSplit:
    apex: tuple[int, int]
    mid: tuple[int, int]
    base: tuple[int, int]

    def ranges(self) -> dict[str, tuple[int, int]]:
        return {"apex": self.apex, "mid": self.mid, "base": self.base}

    def sizes(self) -> tuple[int, int, int]:
        return tuple(hi - lo for lo, hi in (self.apex, self.mid, self.base))


def region_split(n_slices: int, offset: int = 0) -> RegionSplit:
    """Apex = first ``n // 3`` slices, base = last ``n // 3``, mid = the rest."""
    n = int(n_slices)
    if n < 3:
        raise RegionError(f"need at least 3 slices for a region split, got {n}")
    k = n // 3
    o = offset
    return RegionSplit((o, o + k), (o + k, o + n - k), (o + n - k, o + n))


def gland_region_split(ref: np.ndarray, axis: int) -> RegionSplit:
    """Region split over the slices (along ``axis``) where the reference is nonempty."""
    ref = np.asarray(ref).astype(bool)
    other = tuple(i for i in range(ref.ndim) if i != axis)
    occupied = np.flatnonzero(ref.any(axis=other))
    if occupied.size == 0:
        raise RegionError("reference mask is empty")
    lo, hi = int(occupied[0]), int(occupied[-1]) + 1
    return region_split(hi - lo, offset=lo)


def _take(arr: np.ndarray, axis: int, lo: int, hi: int) -> np.ndarray:
    idx = [slice(None)] * arr.ndim
    idx[axis] = slice(lo, hi)
    return arr[tuple(idx)]


def _safe(fn, a, b, sp, label):
    try:
        return fn(a, b, sp)
    except MetricUndefinedError as exc:
        warnings.warn(f"{label}: {exc}; recorded as missing", RuntimeWarning, stacklevel=3)
        return math.nan


def evaluate_patient(pred: Volume3D, ref: Volume3D, patient_id: str, axis: int | None = None) -> list[dict]:
    """Rows for the whole gland and its apex/mid/base thirds."""
    a, b, sp = _pair(pred, ref)
    axis = ref.thick_axis if axis is None else axis
    parts = {"WG": (a, b)}
    for name, (lo, hi) in gland_region_split(b, axis).ranges().items():
        parts[name] = (_take(a, axis, lo, hi), _take(b, axis, lo, hi))
    rows = []
    for region, (x, y) in parts.items():
        label = f"{patient_id}/{region}"
        rows.append({
            "patient_id": patient_id,
            "region": region,
            "dsc": dsc(x, y, sp),
            "hd95_mm": _safe(hd95, x, y, sp, label),
            "abd_mm": _safe(abd, x, y, sp, label),
            "rvd": _safe(rvd, x, y, sp, label),
        })
    return rows


def _sd(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(values.std(ddof=1)) if values.size > 1 else 0.0


class MetricReport:
    """Per-patient x region metric rows plus cohort summaries."""

    def __init__(self, rows: Iterable[dict] = ()):
        self.rows = [dict(r) for r in rows]

    def __len__(self) -> int:
        return len(self.rows)

    def extend(self, rows: Iterable[dict]) -> None:
        self.rows.extend(dict(r) for r in rows)

    def patients(self) -> list[str]:
        return list(dict.fromkeys(r["patient_id"] for r in self.rows))

    def values(self, metric: str, region: str = "WG") -> np.ndarray:
        if metric not in METRICS:
            raise KeyError(f"unknown metric {metric!r}")
        return np.array([r[metric] for r in self.rows if r["region"] == region], dtype=np.float64)

    def summary(self, replicates: int = 100, seed: int = 0) -> dict:
        """Mean and SD over patients and over bootstrap replicates, per region
        and metric; missing values are dropped and counted."""
        out = {}
        for region in REGIONS:
            per = {}
            for metric in METRICS:
                v = self.values(metric, region)
                ok = v[np.isfinite(v)]
                entry = {"n": int(ok.size), "missing": int(v.size - ok.size)}
                if ok.size:
                    bs = bootstrap(ok, replicates, seed)
                    entry.update(mean=float(ok.mean()), sd_patients=_sd(ok), bootstrap_mean=bs.mean, bootstrap_sd=bs.sd)
                per[metric] = entry
            out[region] = per
        return out

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([r["patient_id"], r["region"]] + [_fmt(r[m]) for m in METRICS])
        return path

    @classmethod
    def read_csv(cls, path) -> "MetricReport":
        path = Path(path)
        try:
            fh = path.open(newline="")
        except OSError as exc:
            raise FormatError(f"{path}: {exc}") from None
        with fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != CSV_COLUMNS:
                raise FormatError(f"{path.name}: header must be {','.join(CSV_COLUMNS)}, got {header}")
            rows = []
            for lineno, rec in enumerate(reader, start=2):
                if len(rec) != len(CSV_COLUMNS):
                    raise FormatError(f"{path.name}: row {lineno} has {len(rec)} fields, expected {len(CSV_COLUMNS)}")
                pid, region, *vals = rec
                if region not in REGIONS:
                    raise FormatError(f"{path.name}: row {lineno} has unknown region {region!r}")
                try:
                    nums = [float(x) for x in vals]
                except ValueError:
                    raise FormatError(f"{path.name}: row {lineno} has a non-numeric metric value: {rec}") from None
                rows.append(dict(zip(CSV_COLUMNS, [pid, region, *nums])))
        return cls(rows)

    def write_json(self, path, replicates: int = 100, seed: int = 0, extra: dict | None = None) -> Path:
        path = Path(path)
        doc = {"n_patients": len(self.patients()), "bootstrap_replicates": replicates, "bootstrap_seed": seed, "regions": self.summary(replicates, seed)}
        if extra:
            doc.update(extra)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else repr(float(x))


def evaluate_cohort(preds: Sequence[Volume3D], refs: Sequence[Volume3D], ids: Sequence[str]) -> MetricReport:
    report = MetricReport()
    for p, r, pid in zip(preds, refs, ids):
        report.extend(evaluate_patient(p, r, pid))
    return report
