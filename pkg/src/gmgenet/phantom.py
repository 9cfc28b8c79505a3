"""Synthetic CT-like neck phantoms with planted lymph-node blobs.

Every volume holds an elliptic soft-tissue cylinder in air and a few smooth
bright nodes. In a positive case one node additionally carries a spiculated
halo: bright rays leaving the node surface, a stand-in for tumour breaking
through the nodal capsule. The halo is small and local, so global intensity
statistics barely move between classes. The truth mask of a positive covers
that node together with its halo shell.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ctprep import CTVolume
from .dataio import Sample, write_array, write_manifest, write_volume


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    extent: tuple[int, int, int] = (44, 44, 32)  # (W, H, D) voxels
    spacing: tuple[float, float, float] = (1.0, 1.0, 2.0)  # (sx, sy, sz) mm
    body_radii_mm: tuple[float, float] = (19.0, 16.0)  # (x, y) semi-axes
    body_jitter: float = 0.04
    body_hu: float = 40.0
    body_hu_jitter: float = 30.0  # per-case soft-tissue level offset, uniform in +-jitter
    air_hu: float = -1000.0
    noise_hu: float = 20.0
    node_count: tuple[int, int] = (2, 2)
    node_radius_mm: tuple[float, float] = (3.0, 4.0)
    node_hu: float = 200.0
    halo_thickness_mm: float = 4.5
    halo_hu: float = 380.0
    halo_rays: int = 14
    ray_halfwidth_deg: float = 20.0
    nose_slices: tuple[int, int] = (2, 4)  # raw z-index range for the nose landmark
    acromion_margin: tuple[int, int] = (3, 5)  # acromion sits this many raw slices above the last one
    seed: int = 0

    def __post_init__(self):
        if min(self.extent) < 2 or min(self.spacing) <= 0:
            raise PhantomSpecError(f"invalid extent {self.extent} or spacing {self.spacing}")
        if self.node_count[0] < 1 or self.node_count[0] > self.node_count[1]:
            raise PhantomSpecError(f"invalid node count range {self.node_count}")
        if not 0 < self.node_radius_mm[0] <= self.node_radius_mm[1]:
            raise PhantomSpecError(f"invalid node radius range {self.node_radius_mm}")


@dataclass
class PhantomCase:
    patient_id: str
    label: int
    volume: CTVolume
    mask: np.ndarray | None  # bool (z, y, x); positives only
    nodes: list[tuple[np.ndarray, float]]  # (centre mm (x, y, z), radius mm)


def _grid_mm(spec: PhantomSpec):
    w, h, d = spec.extent
    sx, sy, sz = spec.spacing
    z, y, x = np.meshgrid(np.arange(d) * sz, np.arange(h) * sy, np.arange(w) * sx, indexing="ij")
    return x, y, z


def _fibonacci_dirs(n: int, rng: np.random.Generator) -> np.ndarray:
    """Roughly uniform unit vectors with a random rotation."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i + rng.uniform(0, 2 * np.pi)
    v = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return v @ q.T


def generate_case(spec: PhantomSpec, index: int, label: int) -> PhantomCase:
    """One phantom; the stream is seeded by (spec.seed, index) so cases are independent."""
    rng = np.random.default_rng([spec.seed, index])
    w, h, d = spec.extent
    sx, sy, sz = spec.spacing
    x, y, z = _grid_mm(spec)
    cx, cy = (w - 1) * sx / 2, (h - 1) * sy / 2
    ax, ay = (r * (1 + rng.uniform(-spec.body_jitter, spec.body_jitter)) for r in spec.body_radii_mm)
    body = ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 <= 1.0

    body_hu = spec.body_hu + rng.uniform(-spec.body_hu_jitter, spec.body_hu_jitter)
    vol = np.where(body, body_hu, spec.air_hu).astype(np.float64)
    vol += rng.normal(0.0, spec.noise_hu, size=vol.shape) * np.where(body, 1.0, 0.25)

    nose = int(rng.integers(spec.nose_slices[0], spec.nose_slices[1] + 1))
    acromion = d - 1 - int(rng.integers(spec.acromion_margin[0], spec.acromion_margin[1] + 1))
    if acromion <= nose:
        raise PhantomSpecError("landmark ranges leave no room between nose and acromion")

    n_nodes = int(rng.integers(spec.node_count[0], spec.node_count[1] + 1))
    reach = spec.halo_thickness_mm
    nodes: list[tuple[np.ndarray, float]] = []
    for _ in range(n_nodes):
        r = float(rng.uniform(*spec.node_radius_mm))
        for _attempt in range(1000):
            c = np.array([
                cx + rng.uniform(-ax, ax),
                cy + rng.uniform(-ay, ay),
                rng.uniform((nose + 1) * sz, (acromion - 1) * sz),
            ])
            R = r + reach
            # whole node + halo inside the body cylinder and the landmark slab
            if ((abs(c[0] - cx) + R) / ax) ** 2 + ((abs(c[1] - cy) + R) / ay) ** 2 > 1:
                continue
            if c[2] - R < nose * sz or c[2] + R > acromion * sz:
                continue
            if any(np.linalg.norm(c - oc) < R + orr + 1.0 for oc, orr in nodes):
                continue
            nodes.append((c, r))
            break
        else:
            raise PhantomSpecError(f"cannot fit node {len(nodes)} of radius {r:.2f} mm in the body")

    for c, r in nodes:
        dist = np.sqrt((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2)
        # smooth edge, ~0.6 mm falloff
        vol += (spec.node_hu - body_hu) / (1.0 + np.exp((dist - r) / 0.6))

    mask = None
    if label == 1:
        c, r = nodes[0]
        dx, dy, dz = x - c[0], y - c[1], z - c[2]
        dist = np.sqrt(dx**2 + dy**2 + dz**2)
        shell = (dist > r - 0.5) & (dist <= r + spec.halo_thickness_mm)
        dirs = _fibonacci_dirs(spec.halo_rays, rng)
        unit = np.stack([dx, dy, dz], axis=-1)[shell] / np.maximum(dist[shell], 1e-9)[:, None]
        cosang = (unit @ dirs.T).max(axis=1)
        on_ray = cosang >= np.cos(np.deg2rad(spec.ray_halfwidth_deg))
        gain = rng.uniform(0.7, 1.3, size=on_ray.shape)
        vol[shell] += np.where(on_ray, (spec.halo_hu - body_hu) * gain, 0.0)
        mask = dist <= r + spec.halo_thickness_mm

    volume = CTVolume(vol.astype(np.float32), spec.spacing, nose, acromion)
    return PhantomCase(f"P{index:04d}", label, volume, mask, nodes)


def case_labels(spec: PhantomSpec, n_per_class: int) -> np.ndarray:
    labels = np.array([1] * n_per_class + [0] * n_per_class)
    return np.random.default_rng([spec.seed, 0xC1A55]).permutation(labels)


def iter_cases(spec: PhantomSpec, n_per_class: int):
    for i, label in enumerate(case_labels(spec, n_per_class)):
        yield generate_case(spec, i, int(label))


def generate(spec: PhantomSpec, n_per_class: int, out_dir) -> list[Sample]:
    """Write volumes, positive-case masks and ``manifest.csv`` under ``out_dir``."""
    if n_per_class < 1:
        raise PhantomSpecError("need at least one case per class")
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    samples = []
    for case in iter_cases(spec, n_per_class):
        vpath = out / "volumes" / f"{case.patient_id}.gmgv"
        write_volume(case.volume, vpath)
        mpath = None
        if case.mask is not None:
            mpath = out / "masks" / f"{case.patient_id}_mask.gmgv"
            write_array(case.mask.astype(np.float32), mpath, case.volume.spacing)
        samples.append(Sample(case.patient_id, vpath, case.label, case.volume.nose_slice, case.volume.acromion_slice, mpath))
    write_manifest(samples, out / "manifest.csv")
    return samples
