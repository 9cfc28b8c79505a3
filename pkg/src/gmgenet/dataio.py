"""File formats: GMGV volume container, patient manifest, PGM slice exports.

GMGV layout (all little-endian, 32-byte header)::

    offset  size  field
    0       4     magic b"GMGV"
    4       2     u16 format version (1)
    6       2     u16 dtype code (0 = float32)
    8       12    3 x u32 dims (W, H, D)
    20      12    3 x f32 spacing (sx, sy, sz) in mm
    32      ...   W*H*D scalars, x fastest, then y, then z
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ctprep import CTVolume

MAGIC = b"GMGV"
VERSION = 1
HEADER = struct.Struct("<4sHH3I3f")
DTYPES = {0: np.dtype("<f4")}

MANIFEST_FIELDS = ["patient_id", "volume_path", "label", "nose_slice", "acromion_slice", "mask_path"]


class VolumeFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagicError(VolumeFormatError):
    pass


class UnsupportedVersionError(VolumeFormatError):
    pass


class UnsupportedDtypeError(VolumeFormatError):
    pass


class TruncatedError(VolumeFormatError):
    def __init__(self, message: str, offset: int, expected: int, actual: int):
        super().__init__(f"{message}: expected {expected} bytes, got {actual}", offset)
        self.expected = expected
        self.actual = actual


class ManifestError(ValueError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(f"row {row}: {message}" if row is not None else message)
        self.row = row


# ---------------------------------------------------------------- volumes

def volume_to_bytes(volume: CTVolume) -> bytes:
    d, h, w = volume.voxels.shape
    header = HEADER.pack(MAGIC, VERSION, 0, w, h, d, *volume.spacing)
    return header + np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes()


def volume_from_bytes(data: bytes) -> CTVolume:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(data[:4])!r}, expected {MAGIC!r}", 0)
    if len(data) < HEADER.size:
        raise TruncatedError("truncated header", len(data), HEADER.size, len(data))
    _, version, dtype_code, w, h, d, sx, sy, sz = HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}", 4)
    if dtype_code not in DTYPES:
        raise UnsupportedDtypeError(f"unsupported dtype code {dtype_code}", 6)
    dt = DTYPES[dtype_code]
    expected = w * h * d * dt.itemsize
    actual = len(data) - HEADER.size
    if actual < expected:
        raise TruncatedError("truncated payload", len(data), expected, actual)
    if actual > expected:
        raise VolumeFormatError(f"{actual - expected} trailing bytes after payload", HEADER.size + expected)
    vox = np.frombuffer(data, dtype=dt, count=w * h * d, offset=HEADER.size).reshape(d, h, w)
    return CTVolume(vox.astype(np.float32), (sx, sy, sz))


def write_volume(volume: CTVolume, path) -> None:
    Path(path).write_bytes(volume_to_bytes(volume))


def read_volume(path) -> CTVolume:
    return volume_from_bytes(Path(path).read_bytes())


def write_array(arr: np.ndarray, path, spacing=(1.0, 1.0, 1.0)) -> None:
    write_volume(CTVolume(np.asarray(arr, dtype=np.float32), spacing), path)


# ---------------------------------------------------------------- manifest

@dataclass
class Sample:
    patient_id: str
    volume_path: Path
    label: int
    nose_slice: int | None = None
    acromion_slice: int | None = None
    mask_path: Path | None = None


def _opt_int(value: str | None, field: str, row: int) -> int | None:
    if value is None or value.strip() == "":
        return None
    try:
        return int(value)
    except ValueError:
        raise ManifestError(f"{field} must be an integer, got {value!r}", row) from None


def load_manifest(path, check_files: bool = True) -> list[Sample]:
    """Parse a comma-separated manifest; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    samples: list[Sample] = []
    seen: dict[str, int] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"patient_id", "volume_path", "label"} - set(reader.fieldnames or [])
        if missing:
            raise ManifestError(f"manifest header lacks {sorted(missing)}", 1)
        for row_no, row in enumerate(reader, start=2):
            pid = (row.get("patient_id") or "").strip()
            if not pid:
                raise ManifestError("empty patient_id", row_no)
            if pid in seen:
                raise ManifestError(f"duplicate patient_id {pid!r} (first seen on row {seen[pid]})", row_no)
            seen[pid] = row_no
            label_raw = (row.get("label") or "").strip()
            if label_raw not in ("0", "1"):
                raise ManifestError(f"label must be 0 or 1, got {label_raw!r}", row_no)
            vol = base / row["volume_path"].strip()
            mask_raw = (row.get("mask_path") or "").strip()
            mask = base / mask_raw if mask_raw else None
            if check_files:
                for p in (vol, mask):
                    if p is not None and not p.is_file():
                        raise ManifestError(f"missing file {p}", row_no)
            samples.append(
                Sample(
                    pid,
                    vol,
                    int(label_raw),
                    _opt_int(row.get("nose_slice"), "nose_slice", row_no),
                    _opt_int(row.get("acromion_slice"), "acromion_slice", row_no),
                    mask,
                )
            )
    return samples


def write_manifest(samples: list[Sample], path) -> None:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: Path | None) -> str:
        if p is None:
            return ""
        p = Path(p).resolve()
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return str(p)

    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for s in samples:
            writer.writerow([
                s.patient_id,
                rel(s.volume_path),
                s.label,
                "" if s.nose_slice is None else s.nose_slice,
                "" if s.acromion_slice is None else s.acromion_slice,
                rel(s.mask_path),
            ])


def load_sample_volume(sample: Sample) -> CTVolume:
    vol = read_volume(sample.volume_path)
    vol.nose_slice, vol.acromion_slice = sample.nose_slice, sample.acromion_slice
    vol.__post_init__()
    return vol


# ---------------------------------------------------------------- PGM slices

def to_u8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(img: np.ndarray, path) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def overlay_u8(raw: np.ndarray, heat: np.ndarray) -> np.ndarray:
    """Brighten the raw slice toward white in proportion to heat; zero heat leaves it untouched."""
    r = raw.astype(np.float64)
    out = r + np.clip(heat, 0.0, 1.0) * (255.0 - r)
    return np.round(out).astype(np.uint8)


def export_heatmap_slices(heatmap, volume, out_dir, stride: int = 10) -> list[Path]:
    """Write raw / heat / overlay PGM triplets for every ``stride``-th axial slice."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    heat = heatmap.values if hasattr(heatmap, "values") else np.asarray(heatmap)
    vox = volume.voxels if hasattr(volume, "voxels") else np.asarray(volume)
    if heat.shape != vox.shape:
        raise ValueError(f"heatmap {heat.shape} and volume {vox.shape} are not aligned")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for z in range(0, vox.shape[0], stride):
        raw = to_u8(vox[z])
        hm = to_u8(heat[z])
        for kind, img in (("raw", raw), ("heat", hm), ("overlay", overlay_u8(raw, heat[z]))):
            p = out / f"{kind}_z{z:03d}.pgm"
            write_pgm(img, p)
            written.append(p)
    return written
