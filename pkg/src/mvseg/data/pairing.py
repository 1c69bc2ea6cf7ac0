"""Slice-triplet pairing across views and patient-level splits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ConfigError, ShapeError
from .phantom import VIEWS, PatientViews


@dataclass
class SliceTriplet:
    axial: np.ndarray
    sagittal: np.ndarray | None
    coronal: np.ndarray | None
    mask: np.ndarray
    position: float
    patient_id: str

    def view(self, name: str) -> np.ndarray:
        return getattr(self, name)


def slice_index(position: float, n_slices: int) -> int:
    """round-half-up(position * (n_slices - 1))"""
    return int(math.floor(position * (n_slices - 1) + 0.5))


def make_triplets(p: PatientViews, positions: Sequence[float]) -> list[SliceTriplet]:
    """One triplet per fractional position, each view sliced along its own
    thick axis at the matching fraction of its slice count.  Views missing
    from ``p`` yield ``None`` slices."""
    present = [name for name in VIEWS if p.view(name) is not None]
    shapes = {name: tuple(p.view(name).extents[a] for a in p.view(name).in_plane_axes) for name in present}
    if len(set(shapes.values())) != 1:
        raise ShapeError(f"views of {p.patient_id} differ in in-plane extent: {shapes}")
    out = []
    for pos in positions:
        if not 0.0 <= pos <= 1.0:
            raise ConfigError(f"fractional position must lie in [0, 1], got {pos}")
        slices = dict.fromkeys(VIEWS)
        for name in present:
            v = p.view(name)
            slices[name] = np.ascontiguousarray(v.slice(slice_index(pos, p.n_slices(name))), dtype=np.float32)
        k = slice_index(pos, p.n_slices("axial"))
        mask = np.ascontiguousarray(p.axial_mask.slice(k, p.axial.thick_axis), dtype=np.float32)
        out.append(SliceTriplet(slices["axial"], slices["sagittal"], slices["coronal"], mask, float(pos), p.patient_id))
    return out


def split_patients(ids: Sequence[str], ratio: float = 0.8, seed: int = 0) -> tuple[list[str], list[str]]:
    """Disjoint (train, test) patient lists; ``round(ratio * n)`` go to train."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ConfigError("patient ids must be unique")
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(ratio * len(ids)))
    order = {pid: i for i, pid in enumerate(ids)}
    train = sorted((ids[i] for i in perm[:n_train]), key=order.get)
    test = sorted((ids[i] for i in perm[n_train:]), key=order.get)
    return train, test


def kfold(ids: Sequence[str], k: int = 5, seed: int = 0) -> list[list[str]]:
    """``k`` pairwise-disjoint folds covering ``ids``, sizes differing by at most one."""
    ids = list(ids)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if len(ids) < k:
        raise ConfigError(f"{len(ids)} patients cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(len(ids))
    order = {pid: i for i, pid in enumerate(ids)}
    return [sorted((ids[i] for i in part), key=order.get) for part in np.array_split(perm, k)]
