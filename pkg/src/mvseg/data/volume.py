"""Anisotropic voxel volumes and the resampling / normalization pipeline."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import ConfigError, ResampleError, ShapeError


@dataclass
class Volume3D:
    """Scalar field on a voxel grid.

    ``data`` has shape (nx, ny, nz) in C order; ``spacing`` is the voxel size
    in mm along each axis.  Voxel ``i`` along an axis has its center at
    ``(i + 0.5) * spacing`` so that the grid spans ``n * spacing`` mm.
    Masks are stored as ``uint8`` holding only 0/1.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeError(f"volume data must be 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or not all(s > 0 for s in self.spacing):
            raise ConfigError(f"spacing must be three positive values, got {self.spacing}")
        if self.is_mask and not np.all(self.data <= 1):
            raise ConfigError("mask volumes may only contain 0 and 1")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def is_mask(self) -> bool:
        return self.data.dtype in (np.uint8, np.bool_)

    @property
    def thick_axis(self) -> int:
        """Axis with the coarsest spacing (first one on ties)."""
        return int(np.argmax(self.spacing))

    @property
    def in_plane_axes(self) -> tuple[int, int]:
        t = self.thick_axis
        return tuple(a for a in range(3) if a != t)

    @property
    def field_of_view(self) -> tuple[float, float, float]:
        return tuple(n * s for n, s in zip(self.extents, self.spacing))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def slice(self, index: int, axis: int | None = None) -> np.ndarray:
        """2-D slice ``index`` along ``axis`` (default: the thick axis)."""
        axis = self.thick_axis if axis is None else axis
        return np.take(self.data, index, axis=axis)

    def copy(self) -> "Volume3D":
        return Volume3D(self.data.copy(), self.spacing)


def as_mask(data: np.ndarray, spacing) -> Volume3D:
    return Volume3D(np.asarray(data).astype(np.uint8), spacing)


def resample_linear(v: Volume3D, target_spacing, *, nearest: bool | None = None) -> Volume3D:
    """Resample onto a grid of ``target_spacing`` covering the same extent.

    Images use trilinear interpolation; masks (or ``nearest=True``) use
    nearest-neighbor so they stay binary.  Output extents are
    ``round(n * spacing / target)``; positions beyond the outermost source
    voxel centers clamp to the edge value.
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or not all(t > 0 for t in target):
        raise ConfigError(f"target spacing must be three positive values, got {target_spacing}")
    if any(n < 2 for n in v.extents):
        raise ResampleError(f"cannot resample a volume with a single-voxel axis (extents {v.extents})")
    shape = tuple(int(round(n * s / t)) for n, s, t in zip(v.extents, v.spacing, target))
    if any(n < 1 for n in shape):
        raise ResampleError(f"target spacing {target} leaves an empty axis (extents {shape})")
    if nearest is None:
        nearest = v.is_mask
    if shape == v.extents and target == v.spacing:
        return v.copy()

    scale = np.array(target) / np.array(v.spacing)
    offset = 0.5 * (scale - 1.0)
    src = v.data.astype(np.float32) if not nearest else v.data
    out = ndimage.affine_transform(
        src, np.diag(scale), offset=offset, output_shape=shape, order=0 if nearest else 1, mode="nearest"
    )
    if v.is_mask:
        out = out.astype(np.uint8)
    return Volume3D(out, target)


def minmax_normalize(v: Volume3D) -> Volume3D:
    """Affinely map intensities to [0, 1]; a constant volume becomes all zeros."""
    lo, hi = float(v.data.min()), float(v.data.max())
    if hi == lo:
        warnings.warn("constant volume: normalized to all zeros", RuntimeWarning, stacklevel=2)
        return Volume3D(np.zeros(v.extents, dtype=np.float32), v.spacing)
    data = ((v.data.astype(np.float64) - lo) / (hi - lo)).astype(np.float32)
    return Volume3D(data, v.spacing)


def center_crop(v: Volume3D, target_hw, axes: tuple[int, int] | None = None) -> Volume3D:
    """Keep the central ``target_hw`` voxels along the two ``axes``
    (default: the in-plane axes)."""
    axes = v.in_plane_axes if axes is None else tuple(axes)
    hw = (target_hw, target_hw) if np.isscalar(target_hw) else tuple(target_hw)
    index = [slice(None)] * 3
    for ax, t in zip(axes, hw):
        n = v.extents[ax]
        if t > n:
            raise ShapeError(f"crop extent {t} exceeds volume extent {n} along axis {ax}")
        start = (n - t) // 2
        index[ax] = slice(start, start + t)
    return Volume3D(np.ascontiguousarray(v.data[tuple(index)]), v.spacing)


def normalize_and_crop(v: Volume3D, target_hw, axes: tuple[int, int] | None = None) -> Volume3D:
    """Min-max normalize the whole volume, then center-crop in-plane."""
    return center_crop(minmax_normalize(v), target_hw, axes)
