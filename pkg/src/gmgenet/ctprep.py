"""CT preprocessing: HU window, isotropic resampling, landmark slab, fixed-grid resize.

The chain always runs in this order::

    clip_and_normalize -> resample_isotropic -> slab_select -> resize_to
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .interp import interp_axis, resize_trilinear

HU_WINDOW = (-400.0, 400.0)
TARGET_SPACING = 1.0
SLAB_MARGIN_MM = 30.0
DEFAULT_GRID = (150, 150, 90)  # (W, H, D)


class ResampleError(ValueError):
    pass


class LandmarkError(ValueError):
    pass


@dataclass
class CTVolume:
    """Axial stack in (z, y, x) order with spacing given as (sx, sy, sz) mm.

    z grows from head to feet, so ``nose_slice < acromion_slice``.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    nose_slice: int | None = None
    acromion_slice: int | None = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"CT volume must be 3-D, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if min(self.spacing) <= 0:
            raise ValueError(f"voxel spacing must be positive, got {self.spacing}")
        depth = self.voxels.shape[0]
        for name in ("nose_slice", "acromion_slice"):
            v = getattr(self, name)
            if v is not None and not 0 <= v < depth:
                raise LandmarkError(f"{name}={v} outside z extent {depth}")
        if self.has_landmarks and self.nose_slice > self.acromion_slice:
            raise LandmarkError(f"nose slice {self.nose_slice} lies below acromion slice {self.acromion_slice}")

    @property
    def has_landmarks(self) -> bool:
        return self.nose_slice is not None and self.acromion_slice is not None

    @property
    def extent_whd(self) -> tuple[int, int, int]:
        d, h, w = self.voxels.shape
        return (w, h, d)


def clip_and_normalize(volume: CTVolume, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> CTVolume:
    if not lo < hi:
        raise ValueError(f"HU window needs lo < hi, got ({lo}, {hi})")
    v = (np.clip(volume.voxels, lo, hi) - np.float32(lo)) / np.float32(hi - lo)
    return replace(volume, voxels=v.astype(np.float32))


def _scale_landmark(idx: int | None, factor: float, depth: int) -> int | None:
    if idx is None:
        return None
    return int(min(max(round(idx * factor), 0), depth - 1))


def resample_isotropic(volume: CTVolume, target_spacing: float = TARGET_SPACING) -> CTVolume:
    """Trilinear resampling so every voxel spans ``target_spacing`` mm.

    Sample j along an axis sits at j * target mm from the first voxel centre;
    the new extent is round(extent * spacing / target).
    """
    if target_spacing <= 0:
        raise ResampleError(f"target spacing must be positive, got {target_spacing}")
    vox = volume.voxels
    if min(vox.shape) < 2:
        raise ResampleError(f"cannot resample a volume with a single-voxel axis {vox.shape}")
    sx, sy, sz = volume.spacing
    out = vox
    for axis, sp in zip((0, 1, 2), (sz, sy, sx)):
        n = vox.shape[axis]
        m = max(1, int(round(n * sp / target_spacing)))
        if m == n and sp == target_spacing:
            continue
        out = interp_axis(out, axis, np.arange(m) * (target_spacing / sp))
    factor = sz / target_spacing
    return CTVolume(
        out.astype(np.float32),
        (target_spacing,) * 3,
        _scale_landmark(volume.nose_slice, factor, out.shape[0]),
        _scale_landmark(volume.acromion_slice, factor, out.shape[0]),
    )


def slab_range(volume: CTVolume, margin_mm: float = SLAB_MARGIN_MM) -> tuple[int, int]:
    """Inclusive z range from ``margin`` above the nose to ``margin`` below the acromion."""
    if not volume.has_landmarks:
        raise LandmarkError("slab selection needs nose and acromion slices (supply them in the manifest)")
    if margin_mm < 0:
        raise ValueError(f"margin must be non-negative, got {margin_mm}")
    m = int(round(margin_mm / volume.spacing[2]))
    depth = volume.voxels.shape[0]
    return max(0, volume.nose_slice - m), min(depth - 1, volume.acromion_slice + m)


def slab_select(volume: CTVolume, margin_mm: float = SLAB_MARGIN_MM) -> CTVolume:
    z0, z1 = slab_range(volume, margin_mm)
    return CTVolume(
        volume.voxels[z0 : z1 + 1].copy(),
        volume.spacing,
        volume.nose_slice - z0,
        volume.acromion_slice - z0,
    )


def resize_to(volume: CTVolume, target_whd=DEFAULT_GRID) -> CTVolume:
    """Corner-aligned trilinear resize to exactly ``target_whd``; aspect is not kept."""
    w, h, d = (int(t) for t in target_whd)
    if min(w, h, d) < 1:
        raise ValueError(f"target extents must be positive, got {target_whd}")
    src = volume.voxels
    out = resize_trilinear(src, (d, h, w)).astype(np.float32)
    scale = [(o - 1) / (i - 1) if i > 1 and o > 1 else 1.0 for o, i in zip((d, h, w), src.shape)]
    spacing = tuple(
        sp * (i - 1) / (o - 1) if i > 1 and o > 1 else sp
        for sp, i, o in zip(volume.spacing, src.shape[::-1], (w, h, d))
    )
    return CTVolume(
        out,
        spacing,
        _scale_landmark(volume.nose_slice, scale[0], d),
        _scale_landmark(volume.acromion_slice, scale[0], d),
    )


@dataclass(frozen=True)
class PrepConfig:
    hu_lo: float = HU_WINDOW[0]
    hu_hi: float = HU_WINDOW[1]
    spacing: float = TARGET_SPACING
    margin_mm: float = SLAB_MARGIN_MM
    grid: tuple[int, int, int] = DEFAULT_GRID  # (W, H, D)


def preprocess(volume: CTVolume, cfg: PrepConfig = PrepConfig()) -> CTVolume:
    v = clip_and_normalize(volume, cfg.hu_lo, cfg.hu_hi)
    v = resample_isotropic(v, cfg.spacing)
    v = slab_select(v, cfg.margin_mm)
    return resize_to(v, cfg.grid)


def transform_mask(mask: np.ndarray, reference: CTVolume, cfg: PrepConfig = PrepConfig()) -> np.ndarray:
    """Carry a binary mask through the geometric part of the chain (linear, then >= 0.5)."""
    m = CTVolume(mask.astype(np.float32), reference.spacing, reference.nose_slice, reference.acromion_slice)
    m = resample_isotropic(m, cfg.spacing)
    m = slab_select(m, cfg.margin_mm)
    m = resize_to(m, cfg.grid)
    return m.voxels >= 0.5
