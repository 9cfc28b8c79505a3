"""3-D Grad-CAM heatmaps and heat-guided volume-of-interest extraction.

Arrays use (D, H, W) = (z, y, x) axis order; extents given as (W, H, D)
follow the image convention and are flipped internally.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .interp import resize_trilinear
from .nn.tensor import DimensionError, Tape, Tensor, backward

CAM_THRESHOLD = 0.6
SIGNAL_FLOOR = 0.05
INTENSITY_FLOOR = 0.05


class NoSignalError(RuntimeError):
    """Heatmap carries no usable signal; the sample must be flagged, not center-cropped."""


class NoBodyError(RuntimeError):
    pass


@dataclass
class Heatmap:
    values: np.ndarray  # (D, H, W) in [0, 1]
    source_shape: tuple[int, int, int]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def peak(self) -> tuple[int, int, int]:
        return tuple(int(i) for i in np.unravel_index(np.argmax(self.values), self.values.shape))


@dataclass(frozen=True)
class VOIBox:
    """Half-open voxel bounds ``[z0, z1) x [y0, y1) x [x0, x1)``."""

    z0: int
    z1: int
    y0: int
    y1: int
    x0: int
    x1: int
    target_extent: tuple[int, int, int]  # (W, H, D)

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return slice(self.z0, self.z1), slice(self.y0, self.y1), slice(self.x0, self.x1)

    @property
    def extent(self) -> tuple[int, int, int]:
        """(W, H, D) of the box."""
        return (self.x1 - self.x0, self.y1 - self.y0, self.z1 - self.z0)

    @property
    def volume(self) -> int:
        w, h, d = self.extent
        return w * h * d

    def as_tuple(self) -> tuple[int, ...]:
        return (self.z0, self.z1, self.y0, self.y1, self.x0, self.x1)

    def iou(self, other: "VOIBox") -> float:
        inter = 1
        for a0, a1, b0, b1 in zip(self.as_tuple()[::2], self.as_tuple()[1::2], other.as_tuple()[::2], other.as_tuple()[1::2]):
            inter *= max(0, min(a1, b1) - max(a0, b0))
        union = self.volume + other.volume - inter
        return inter / union if union else 0.0


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def channel_weights(activations, score_grad) -> np.ndarray:
    """Importance weight per channel: the spatial mean of d(score)/d(activation)."""
    a, g = _arr(activations), _arr(score_grad)
    if a.shape != g.shape:
        raise DimensionError(f"activation shape {a.shape} != gradient shape {g.shape}")
    if g.ndim != 5 or g.shape[0] != 1:
        raise DimensionError(f"expected (1, K, d, h, w), got {g.shape}")
    return g[0].reshape(g.shape[1], -1).mean(axis=1)


def compute_cam(activations, weights) -> np.ndarray:
    """ReLU of the weighted channel sum; no normalization."""
    a = _arr(activations)
    w = np.asarray(weights)
    if a.ndim != 5 or a.shape[0] != 1 or a.shape[1] != w.shape[0]:
        raise DimensionError(f"activations {a.shape} do not match {w.shape[0]} weights")
    cam = np.tensordot(w, a[0], axes=([0], [0]))
    return np.maximum(cam, 0)


def upsample_to_input(raw_cam: np.ndarray, input_extent) -> Heatmap:
    """Trilinear, corner-aligned resize to ``input_extent`` (D, H, W), then max-normalize."""
    raw = np.asarray(raw_cam, dtype=np.float64)
    values = resize_trilinear(raw, tuple(int(n) for n in input_extent))
    peak = values.max()
    if peak > 0:
        values = values / peak
    return Heatmap(values=values, source_shape=tuple(raw.shape))


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 6-connected component of a boolean mask."""
    labels, count = ndimage.label(mask)
    if count == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def body_mask(intensity: np.ndarray, intensity_floor: float = INTENSITY_FLOOR) -> np.ndarray:
    fg = np.asarray(intensity) >= intensity_floor
    if not fg.any():
        raise NoBodyError(f"no voxel reaches the intensity floor {intensity_floor}")
    return largest_component(fg)


def refine_mask(heatmap: Heatmap, body, intensity_floor: float = INTENSITY_FLOOR) -> Heatmap:
    """Zero heat outside the body: below the intensity floor or off the largest component."""
    intensity = body.voxels if hasattr(body, "voxels") else np.asarray(body)
    if intensity.shape != heatmap.shape:
        raise DimensionError(f"heatmap {heatmap.shape} and volume {intensity.shape} are not aligned")
    keep = body_mask(intensity, intensity_floor)
    return Heatmap(values=np.where(keep, heatmap.values, 0.0), source_shape=heatmap.source_shape)


def heat_centroid(values: np.ndarray, cam_threshold: float = CAM_THRESHOLD) -> np.ndarray:
    """Heat-weighted centroid (z, y, x) of voxels at or above ``cam_threshold * max``."""
    sel = values >= cam_threshold * values.max()
    idx = np.nonzero(sel)
    w = values[idx]
    return np.array([np.sum(i * w) / np.sum(w) for i in idx])


def place_box(center, extent_whd, shape_dhw) -> VOIBox:
    """Fixed-size box around ``center`` (z, y, x), shifted (never shrunk) to fit."""
    ext = tuple(int(e) for e in extent_whd)
    ext_dhw = ext[::-1]
    starts = []
    for c, e, n in zip(center, ext_dhw, shape_dhw):
        if e > n:
            raise DimensionError(f"VOI extent {ext} exceeds volume {tuple(shape_dhw)[::-1]}")
        start = int(np.floor(c + 0.5)) - e // 2
        starts.append(min(max(start, 0), n - e))
    (z0, y0, x0), (d, h, w) = starts, ext_dhw
    return VOIBox(z0, z0 + d, y0, y0 + h, x0, x0 + w, ext)


def extract_voi(
    heatmap: Heatmap,
    volume,
    target_extent,
    cam_threshold: float = CAM_THRESHOLD,
    signal_floor: float = SIGNAL_FLOOR,
) -> tuple[VOIBox, np.ndarray]:
    """Crop a ``target_extent`` (W, H, D) box centred on the hot region."""
    vox = volume.voxels if hasattr(volume, "voxels") else np.asarray(volume)
    if vox.shape != heatmap.shape:
        raise DimensionError(f"heatmap {heatmap.shape} and volume {vox.shape} are not aligned")
    peak = float(heatmap.values.max())
    if peak <= signal_floor:
        raise NoSignalError(f"heatmap maximum {peak:.4g} <= signal floor {signal_floor}")
    box = place_box(heat_centroid(heatmap.values, cam_threshold), target_extent, vox.shape)
    return box, np.ascontiguousarray(vox[box.slices])


@dataclass
class GradCAMResult:
    heatmap: Heatmap
    raw_cam: np.ndarray
    weights: np.ndarray
    probability: float


def gradcam(model, volume: np.ndarray) -> GradCAMResult:
    """Grad-CAM of the positive-class logit for one (D, H, W) or (C, D, H, W) volume.

    The model is evaluated with running batch-norm statistics; parameter
    gradients produced along the way are discarded.
    """
    vol = np.asarray(volume, dtype=np.float32)
    if vol.ndim == 3:
        vol = vol[None]
    was_training = model.training
    model.eval()
    try:
        with Tape() as tape:
            logits, act = model.forward_logits(Tensor._wrap(vol[None]))
            score = logits.sum()
        act.grad = None
        backward(score, tape)
        grad = act.grad if act.grad is not None else np.zeros_like(act.data)
    finally:
        model.zero_grad()
        if was_training:
            model.train()
    weights = channel_weights(act, grad)
    raw = compute_cam(act, weights)
    prob = float(1.0 / (1.0 + np.exp(-float(logits.data.reshape(-1)[0]))))
    return GradCAMResult(upsample_to_input(raw, vol.shape[1:]), raw, weights, prob)
