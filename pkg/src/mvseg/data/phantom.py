"""Deterministic synthetic multi-view gland phantoms.

A patient is an analytic superellipsoid with a smooth sinusoidal radial
perturbation, rendered on a fine isotropic grid with textured interior,
a darker rim, two distractor organs and background texture, blurred, and
then resampled to three anisotropic acquisition grids (axial thick along z,
sagittal thick along x, coronal thick along y).  Each view gets its own
acquisition noise.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import ndimage

from ..errors import ConfigError
from .volume import Volume3D, center_crop, normalize_and_crop, resample_linear

VIEWS = ("axial", "sagittal", "coronal")


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    fov_mm: float = 72.0
    fine_spacing: float = 1.0
    # (low, high) per axis x, y, z in mm
    semi_axes_range: tuple = ((15.0, 22.0), (11.0, 17.0), (14.0, 20.0))
    exponent_range: tuple = (2.0, 2.6)
    center_jitter_mm: float = 3.0
    perturbation_amplitude: float = 2.0
    perturbation_frequency: int = 2
    rim_width_mm: float = 2.0
    gland_level: float = 0.7
    rim_level: float = 0.45
    background_level: float = 0.25
    distractors: bool = True
    texture_level: float = 0.06
    noise_level: float = 0.04
    blur_sigma_mm: float = 1.0
    axial_spacing: tuple = (2.0 * 0.5, 2.0 * 0.5, 2.0 * 3.0)
    sagittal_spacing: tuple = (2.0 * 3.0, 2.0 * 0.5, 2.0 * 0.5)
    coronal_spacing: tuple = (2.0 * 0.5, 2.0 * 3.0, 2.0 * 0.5)
    target_hw: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def fail(name, msg):
            raise ConfigError(f"phantom spec field {name!r}: {msg}")

        if self.fov_mm <= 0:
            fail("fov_mm", "must be positive")
        if self.fine_spacing <= 0:
            fail("fine_spacing", "must be positive")
        if len(self.semi_axes_range) != 3:
            fail("semi_axes_range", "needs one (low, high) pair per axis")
        for lo, hi in self.semi_axes_range:
            if not 0 < lo <= hi:
                fail("semi_axes_range", f"needs 0 < low <= high, got ({lo}, {hi})")
        lo_e, hi_e = self.exponent_range
        if not 1.0 <= lo_e <= hi_e:
            fail("exponent_range", f"needs 1 <= low <= high, got {self.exponent_range}")
        smallest = min(lo for lo, _ in self.semi_axes_range)
        if not 0 <= self.perturbation_amplitude < smallest:
            fail("perturbation_amplitude", f"must lie in [0, {smallest}) (smallest semi-axis)")
        if self.perturbation_frequency < 0 or int(self.perturbation_frequency) != self.perturbation_frequency:
            fail("perturbation_frequency", "must be a non-negative integer")
        for name in ("center_jitter_mm", "rim_width_mm", "texture_level", "noise_level", "blur_sigma_mm"):
            if getattr(self, name) < 0:
                fail(name, "must be non-negative")
        for name in ("axial_spacing", "sagittal_spacing", "coronal_spacing"):
            sp = getattr(self, name)
            if len(sp) != 3 or not all(s > 0 for s in sp):
                fail(name, f"must be three positive spacings, got {sp}")
            hw = [round(self.fov_mm / s) for s in sp]
            if sorted(hw)[1] < self.target_hw:
                fail("target_hw", f"{self.target_hw} exceeds in-plane extent {sorted(hw)[1:]} of {name}")
        if self.target_hw % 64:
            fail("target_hw", "must be divisible by 64")
        max_extent = max(hi for _, hi in self.semi_axes_range) + self.center_jitter_mm + self.perturbation_amplitude
        if max_extent >= self.fov_mm / 2:
            fail("fov_mm", f"gland may reach {max_extent} mm from the center, beyond half the field of view")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PhantomSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"phantom spec field {k!r}: unknown field")
        clean = {}
        for k, v in d.items():
            clean[k] = _tupleize(v) if isinstance(v, list) else v
        try:
            return cls(**clean)
        except TypeError as exc:
            raise ConfigError(f"phantom spec: {exc}") from None

    def view_spacing(self, view: str) -> tuple:
        return getattr(self, f"{view}_spacing")


def _tupleize(v):
    return tuple(_tupleize(x) if isinstance(x, list) else x for x in v)


@dataclass
class PatientViews:
    patient_id: str
    axial: Volume3D
    sagittal: Volume3D | None
    coronal: Volume3D | None
    axial_mask: Volume3D
    oracle_mask: Volume3D | None = None

    def view(self, name: str) -> Volume3D:
        return getattr(self, name)

    def n_slices(self, name: str) -> int:
        v = self.view(name)
        return v.extents[v.thick_axis]


@dataclass
class GlandShape:
    center: np.ndarray
    semi_axes: np.ndarray
    exponent: float
    amplitude: float
    frequency: int
    phases: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def level(self, x, y, z) -> np.ndarray:
        """Normalized radius: <= 1 inside the (perturbed) gland surface."""
        dx, dy, dz = x - self.center[0], y - self.center[1], z - self.center[2]
        a, b, c = self.semi_axes
        e = self.exponent
        q = (np.abs(dx / a) ** e + np.abs(dy / b) ** e + np.abs(dz / c) ** e) ** (1.0 / e)
        if self.amplitude == 0:
            return q
        r = np.sqrt(dx * dx + dy * dy + dz * dz)
        theta = np.arctan2(dy, dx)
        cos_phi = np.divide(dz, r, out=np.ones_like(r), where=r > 0)
        phi = np.arccos(np.clip(cos_phi, -1.0, 1.0))
        f = self.frequency
        h = 0.5 * (np.sin(phi) * np.sin(f * theta + self.phases[0]) + np.cos(f * phi + self.phases[1]))
        return q / (1.0 + (self.amplitude / self.semi_axes.min()) * h)


def _grid_centers(n: int, spacing: float) -> np.ndarray:
    return (np.arange(n) + 0.5) * spacing


def _mesh(extents, spacing):
    axes = [_grid_centers(n, s) for n, s in zip(extents, spacing)]
    return np.meshgrid(*axes, indexing="ij", sparse=True)


def _smooth_noise(rng, shape, sigma_vox) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma_vox, mode="wrap")
    sd = field_.std()
    return field_ / sd if sd > 0 else field_


def draw_shape(spec: PhantomSpec, rng: np.random.Generator) -> GlandShape:
    semi = np.array([rng.uniform(lo, hi) for lo, hi in spec.semi_axes_range])
    center = spec.fov_mm / 2 + rng.uniform(-spec.center_jitter_mm, spec.center_jitter_mm, size=3)
    exponent = rng.uniform(*spec.exponent_range)
    phases = rng.uniform(0, 2 * np.pi, size=2)
    return GlandShape(center, semi, exponent, spec.perturbation_amplitude, int(spec.perturbation_frequency), phases)


def render_fine(spec: PhantomSpec, patient_seed: int):
    """Clean fine-grid image, fine-grid oracle mask and the analytic shape."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, patient_seed]))
    shape = draw_shape(spec, rng)
    n = int(round(spec.fov_mm / spec.fine_spacing))
    ext = (n, n, n)
    fs = (spec.fine_spacing,) * 3
    x, y, z = _mesh(ext, fs)
    lev = shape.level(x, y, z)
    inside = lev <= 1.0

    sig = lambda mm: mm / spec.fine_spacing  # noqa: E731
    img = spec.background_level + spec.texture_level * _smooth_noise(rng, ext, sig(4.0))
    if spec.distractors:
        a, b, c = shape.semi_axes
        # bright "bladder" above the gland, dark "rectum" behind it
        bladder_c = shape.center + np.array([0.0, -0.3 * b, 0.9 * c + 8.0])
        bladder = ((x - bladder_c[0]) / (0.8 * a)) ** 2 + ((y - bladder_c[1]) / (0.8 * b)) ** 2 + ((z - bladder_c[2]) / 9.0) ** 2 <= 1
        img = np.where(bladder, 0.95, img)
        rectum_c = shape.center + np.array([0.0, b + 7.0, 0.0])
        rectum = ((x - rectum_c[0]) / 8.0) ** 2 + ((y - rectum_c[1]) / 5.0) ** 2 <= 1
        rectum = np.broadcast_to(rectum, ext)
        img = np.where(rectum, 0.08, img)
    gland = spec.gland_level + spec.texture_level * _smooth_noise(rng, ext, sig(2.0))
    rim_start = 1.0 - spec.rim_width_mm / float(np.mean(shape.semi_axes))
    img = np.where(inside, np.where(lev > rim_start, spec.rim_level, gland), img)
    if spec.blur_sigma_mm > 0:
        img = ndimage.gaussian_filter(img, sig(spec.blur_sigma_mm), mode="nearest")
    image = Volume3D(img.astype(np.float32), fs)
    oracle = Volume3D(inside.astype(np.uint8), fs)
    return image, oracle, shape, rng


def rasterize(shape: GlandShape, extents, spacing) -> Volume3D:
    """Point-sample the analytic gland at the voxel centers of a grid."""
    x, y, z = _mesh(extents, spacing)
    return Volume3D((shape.level(x, y, z) <= 1.0).astype(np.uint8), spacing)


def generate_phantom(spec: PhantomSpec, patient_seed: int, patient_id: str | None = None) -> PatientViews:
    """Raw (un-normalized, uncropped) multi-view acquisition of one patient."""
    spec.validate()
    image, oracle, shape, rng = render_fine(spec, patient_seed)
    views = {}
    for name in VIEWS:
        v = resample_linear(image, spec.view_spacing(name))
        noisy = v.data + spec.noise_level * rng.standard_normal(v.extents)
        views[name] = Volume3D(noisy.astype(np.float32), v.spacing)
    ax = views["axial"]
    mask = rasterize(shape, ax.extents, ax.spacing)
    pid = patient_id if patient_id is not None else f"P{patient_seed:03d}"
    return PatientViews(pid, views["axial"], views["sagittal"], views["coronal"], mask, oracle)


def preprocess(p: PatientViews, target_hw: int) -> PatientViews:
    """Normalize and center-crop every view in-plane; crop the mask alike."""
    out = {name: normalize_and_crop(p.view(name), target_hw) if p.view(name) is not None else None for name in VIEWS}
    mask = center_crop(p.axial_mask, target_hw, p.axial.in_plane_axes)
    return PatientViews(p.patient_id, out["axial"], out["sagittal"], out["coronal"], mask, p.oracle_mask)


def generate_cohort(spec: PhantomSpec, n_patients: int, *, keep_oracle: bool = True) -> list[PatientViews]:
    cohort = []
    for i in range(n_patients):
        p = preprocess(generate_phantom(spec, i), spec.target_hw)
        if not keep_oracle:
            p.oracle_mask = None
        cohort.append(p)
    return cohort
