import numpy as np
import pytest

from gmgenet.dataio import load_manifest, read_volume
from gmgenet.phantom import PhantomSpec, PhantomSpecError, case_labels, generate, generate_case, iter_cases


@pytest.fixture(scope="module")
def cases():
    return list(iter_cases(PhantomSpec(seed=0), 100))


def fit_logistic(x, y, iters=50):
    """Newton iterations on standardized features, with a small ridge."""
    mu, sd = x.mean(axis=0), x.std(axis=0) + 1e-12
    z = np.c_[np.ones(len(x)), (x - mu) / sd]
    w = np.zeros(z.shape[1])
    for _ in range(iters):
        p = 1 / (1 + np.exp(-z @ w))
        hess = z.T @ (z * (p * (1 - p))[:, None]) + 1e-3 * np.eye(len(w))
        w -= np.linalg.solve(hess, z.T @ (p - y) + 1e-3 * w)
    return lambda q: (np.c_[np.ones(len(q)), (q - mu) / sd] @ w) > 0


class TestGlobalStatistics:
    def test_mean_and_variance_matched(self, cases):
        labels = np.array([c.label for c in cases])
        for stat in (np.mean, np.var):
            v = np.array([stat(c.volume.voxels.astype(np.float64)) for c in cases])
            gap = abs(v[labels == 1].mean() - v[labels == 0].mean()) / abs(v[labels == 0].mean())
            assert gap < 0.02

    def test_logistic_probe_near_chance(self, cases):
        feats = np.array([[c.volume.voxels.mean(), c.volume.voxels.var()] for c in cases], dtype=np.float64)
        labels = np.array([c.label for c in cases], dtype=float)
        order = np.random.default_rng(0).permutation(len(cases))
        correct = 0
        for fold in np.array_split(order, 5):
            train = np.setdiff1d(order, fold)
            clf = fit_logistic(feats[train], labels[train])
            correct += int(np.sum(clf(feats[fold]) == labels[fold]))
        assert correct / len(cases) <= 0.6


class TestCases:
    def test_class_balance(self):
        labels = case_labels(PhantomSpec(), 37)
        assert labels.sum() == 37 and len(labels) == 74

    def test_masks_only_for_positives(self, cases):
        for c in cases:
            assert (c.mask is not None) == (c.label == 1)

    def test_mask_voxels_within_sphere_bounds(self, cases):
        spec = PhantomSpec()
        voxel = float(np.prod(spec.spacing))
        lo_r = spec.node_radius_mm[0] + spec.halo_thickness_mm
        hi_r = spec.node_radius_mm[1] + spec.halo_thickness_mm
        lo = 4 / 3 * np.pi * lo_r**3 / voxel
        hi = 4 / 3 * np.pi * hi_r**3 / voxel
        for c in cases:
            if c.mask is not None:
                assert 0.95 * lo <= c.mask.sum() <= 1.05 * hi

    def test_mask_is_hot(self, cases):
        for c in cases[:20]:
            if c.mask is not None:
                v = c.volume.voxels
                assert v[c.mask].mean() > v[~c.mask & (v > -500)].mean() + 50

    def test_landmarks_and_geometry(self, cases):
        spec = PhantomSpec()
        for c in cases:
            assert c.volume.voxels.shape == spec.extent[::-1]
            assert spec.nose_slices[0] <= c.volume.nose_slice <= spec.nose_slices[1]
            assert c.volume.nose_slice < c.volume.acromion_slice
            assert spec.node_count[0] <= len(c.nodes) <= spec.node_count[1]

    def test_case_independent_of_set_size(self):
        spec = PhantomSpec(seed=3)
        a = generate_case(spec, 5, 1)
        b = generate_case(spec, 5, 1)
        assert a.volume.voxels.tobytes() == b.volume.voxels.tobytes()

    def test_bad_spec(self):
        with pytest.raises(PhantomSpecError):
            PhantomSpec(node_count=(3, 2))
        with pytest.raises(PhantomSpecError):
            PhantomSpec(extent=(1, 4, 4))
        with pytest.raises(PhantomSpecError):
            generate_case(PhantomSpec(node_radius_mm=(14.0, 15.0)), 0, 1)


class TestGenerateFiles:
    def test_byte_deterministic(self, tmp_path):
        spec = PhantomSpec(seed=11)
        generate(spec, 3, tmp_path / "a")
        generate(spec, 3, tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) == 6 + 3 + 1
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_seed_changes_output(self, tmp_path):
        generate(PhantomSpec(seed=1), 1, tmp_path / "a")
        generate(PhantomSpec(seed=2), 1, tmp_path / "b")
        assert (tmp_path / "a/volumes/P0000.gmgv").read_bytes() != (tmp_path / "b/volumes/P0000.gmgv").read_bytes()

    def test_manifest_readable(self, tmp_path):
        samples = generate(PhantomSpec(), 2, tmp_path)
        back = load_manifest(tmp_path / "manifest.csv")
        assert [s.patient_id for s in back] == [s.patient_id for s in samples]
        for s in back:
            assert (s.mask_path is not None) == (s.label == 1)
            assert read_volume(s.volume_path).voxels.shape == (32, 44, 44)
