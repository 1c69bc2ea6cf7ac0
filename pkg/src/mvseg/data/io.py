"""On-disk dataset format.

A dataset directory holds ``meta.json`` plus one sub-directory per patient
with ``axial.vol``, ``sagittal.vol``, ``coronal.vol``, ``axial_mask.vol`` and
optionally ``oracle_mask.vol``.

``.vol`` layout (little-endian): a 64-byte header ``b"MVV1"``, u32 dtype code
(0 = float32, 1 = uint8), three u32 extents, three f64 spacings, zero
padding; then the row-major payload; then the u32 CRC32 of the payload.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .phantom import PatientViews
from .volume import Volume3D

MAGIC = b"MVV1"
HEADER = struct.Struct("<4sI3I3d20x")
assert HEADER.size == 64
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
FORMAT_VERSION = 1
VOLUME_FILES = ("axial", "sagittal", "coronal", "axial_mask")


def vol_bytes(v: Volume3D) -> bytes:
    code = 1 if v.is_mask else 0
    payload = np.ascontiguousarray(v.data, dtype=DTYPES[code]).tobytes()
    header = HEADER.pack(MAGIC, code, *v.extents, *v.spacing)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def write_vol(path, v: Volume3D) -> None:
    Path(path).write_bytes(vol_bytes(v))


def read_vol(path) -> Volume3D:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER.size + 4:
        raise FormatError(f"{path.name}: file too short ({len(raw)} bytes)")
    magic, code, nx, ny, nz, sx, sy, sz = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path.name}: bad magic {magic!r}")
    if code not in DTYPES:
        raise FormatError(f"{path.name}: unknown dtype code {code}")
    dt = DTYPES[code]
    n = nx * ny * nz * dt.itemsize
    if len(raw) != HEADER.size + n + 4:
        raise FormatError(f"{path.name}: payload is {len(raw) - HEADER.size - 4} bytes, extents ({nx},{ny},{nz}) need {n}")
    payload = raw[HEADER.size:HEADER.size + n]
    (crc,) = struct.unpack_from("<I", raw, HEADER.size + n)
    if crc != zlib.crc32(payload):
        raise FormatError(f"{path.name}: checksum mismatch")
    data = np.frombuffer(payload, dtype=dt).reshape(nx, ny, nz).astype(dt.newbyteorder("="))
    try:
        return Volume3D(data, (sx, sy, sz))
    except ValueError as exc:
        raise FormatError(f"{path.name}: {exc}") from None


def save_dataset(path, patients: list[PatientViews], *, spec: dict | None = None, seed: int | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for p in patients:
        d = path / p.patient_id
        d.mkdir(exist_ok=True)
        for name in VOLUME_FILES:
            if getattr(p, name) is not None:
                write_vol(d / f"{name}.vol", getattr(p, name))
        if p.oracle_mask is not None:
            write_vol(d / "oracle_mask.vol", p.oracle_mask)
    meta = {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "spec": spec,
        "patients": [p.patient_id for p in patients],
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_meta(path) -> dict:
    path = Path(path)
    meta_file = path / "meta.json"
    if not meta_file.is_file():
        raise FormatError(f"{meta_file}: missing dataset metadata")
    try:
        meta = json.loads(meta_file.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_file.name}: {exc}") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{meta_file.name}: unsupported format version {meta.get('format_version')!r}")
    return meta


def load_patient(path, patient_id: str, *, with_oracle: bool = True, views=("axial", "sagittal", "coronal")) -> PatientViews:
    """Load one patient; sagittal/coronal files that are absent load as None."""
    d = Path(path) / patient_id
    vols = {}
    for name in VOLUME_FILES:
        f = d / f"{name}.vol"
        required = name in ("axial", "axial_mask")
        if required and not f.is_file():
            raise FormatError(f"{patient_id}/{f.name}: missing")
        vols[name] = read_vol(f) if (required or name in views) and f.is_file() else None
    oracle = None
    if with_oracle and (d / "oracle_mask.vol").is_file():
        oracle = read_vol(d / "oracle_mask.vol")
    return PatientViews(patient_id, vols["axial"], vols["sagittal"], vols["coronal"], vols["axial_mask"], oracle)


def load_dataset(path, *, with_oracle: bool = True) -> tuple[list[PatientViews], dict]:
    meta = load_meta(path)
    patients = [load_patient(path, pid, with_oracle=with_oracle) for pid in meta["patients"]]
    for p in patients:
        if p.axial_mask.extents != p.axial.extents:
            raise FormatError(f"{p.patient_id}/axial_mask.vol: extents {p.axial_mask.extents} differ from axial {p.axial.extents}")
    return patients, meta
