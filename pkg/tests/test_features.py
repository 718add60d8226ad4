import numpy as np
import pytest

from erpmatch import features, sphere
from erpmatch.errors import DimensionMismatch, ImageTooSmall, MalformedFile
from erpmatch.frame import ErpImage
from erpmatch.sphere import ErpGridSpec

EXTRACTORS = {
    "patch": features.PatchExtractor(),
    "tangent": features.TangentPatchExtractor(),
    "gradient": features.GradientExtractor(),
    "gradient-concat": features.GradientExtractor(layout="concat"),
}


def textured(width=128, seed=0):
    rng = np.random.default_rng(seed)
    return ErpImage(rng.random((width // 2, width, 3)))


def nn_within_cell(pyr_A, pyr_B, gt, stride):
    A, B = pyr_A[stride], pyr_B[stride]
    h, w, d = A.shape
    grid = ErpGridSpec(w, h)
    nn = np.argmax(A.reshape(-1, d) @ B.reshape(-1, d).T, axis=1)
    picked = grid.rays().reshape(-1, 3)[nn].reshape(h, w, 3)
    err = np.degrees(np.arccos(np.clip(np.sum(picked * gt.directions, axis=-1), -1, 1)))
    return (err <= 360.0 / w)[gt.certainty > 0.5]


class TestPyramidContract:
    @pytest.mark.parametrize("name", EXTRACTORS)
    def test_shape_law(self, name):
        img = ErpImage(np.random.default_rng(1).random((320, 640)))
        pyr = EXTRACTORS[name].extract(img)
        for s in features.STRIDES:
            assert pyr[s].shape[:2] == (320 // s, 640 // s)
        assert pyr[32].shape[:2] == (10, 20)

    def test_default_dims(self):
        img = textured()
        assert set(features.extract_patch_baseline(img).dims().values()) == {25}
        assert set(features.extract_gradient_baseline(img).dims().values()) == {8}
        assert set(features.extract_gradient_baseline(img, layout="concat").dims().values()) == {200}

    @pytest.mark.parametrize("name", EXTRACTORS)
    def test_deterministic(self, name):
        img = textured()
        a, b = EXTRACTORS[name].extract(img), EXTRACTORS[name].extract(img)
        for s in features.STRIDES:
            np.testing.assert_array_equal(a[s], b[s])

    @pytest.mark.parametrize("name", EXTRACTORS)
    def test_unit_or_zero(self, name):
        pyr = EXTRACTORS[name].extract(textured())
        for s in features.STRIDES:
            n = np.linalg.norm(pyr[s], axis=-1)
            assert np.all((np.abs(n - 1) < 1e-12) | (n == 0))

    @pytest.mark.parametrize("name", EXTRACTORS)
    def test_column_shift_equivariance(self, name):
        img = textured(seed=2)
        shift = 3 * 32
        a = EXTRACTORS[name].extract(img)
        b = EXTRACTORS[name].extract(ErpImage(np.roll(img.data, shift, axis=1)))
        for s in features.STRIDES:
            np.testing.assert_allclose(b[s], np.roll(a[s], shift // s, axis=1), atol=1e-12)

    def test_too_small(self):
        with pytest.raises(ImageTooSmall):
            features.extract_patch_baseline(ErpImage(np.zeros((32, 64))))
        with pytest.raises(DimensionMismatch):
            features.extract_patch_baseline(ErpImage(np.zeros((80, 160))))

    def test_missing_stride(self):
        with pytest.raises(DimensionMismatch):
            features.FeaturePyramid({32: np.ones((2, 4, 3))})

    def test_unknown_extractor(self):
        with pytest.raises(ValueError):
            features.make_extractor("sift")
        with pytest.raises(ValueError):
            features.GradientExtractor(layout="bogus")


class TestPatchBaseline:
    def test_constant_image_is_low_texture(self):
        pyr = features.extract_patch_baseline(ErpImage(np.full((64, 128), 0.4)))
        for s in features.STRIDES:
            assert not pyr[s].any()
            assert pyr.low_texture[s].all()

    def test_patch_layout(self):
        g = np.arange(4 * 8, dtype=float).reshape(4, 8)
        nb = features.neighborhood(g, 1)
        assert nb.shape == (4, 8, 9)
        np.testing.assert_array_equal(nb[1, 0], [7, 0, 1, 15, 8, 9, 23, 16, 17])
        np.testing.assert_array_equal(nb[0, 3, :3], g[0, 2:5])

    def test_tangent_footprint_uniform(self):
        grid = ErpGridSpec(64, 32)
        pts = features.tangent_sample_points(grid, radius=1)
        center = grid.rays()
        ang = np.arccos(np.clip(np.sum(pts[..., 5, :] * center, axis=-1), -1, 1))
        np.testing.assert_allclose(ang, np.pi / 32, rtol=1e-12)


class TestGradientBaseline:
    def test_ramp_is_one_bin(self):
        rows = np.linspace(0, 1, 64)[:, None] * np.ones((1, 128))
        pyr = features.extract_gradient_baseline(ErpImage(rows))
        for s in features.STRIDES:
            d = pyr[s]
            assert np.all(np.argmax(d, axis=-1) == 2)
            np.testing.assert_allclose(d[..., 2], 1.0, atol=1e-12)

    def test_rotation_permutes_bins(self):
        g = np.random.default_rng(0).random((12, 12))
        ext = features.GradientExtractor()
        H = np.rot90(ext.histograms(g))
        R = ext.histograms(np.rot90(g))
        inner = (slice(2, -2), slice(2, -2))
        np.testing.assert_allclose(R[inner], np.roll(H, -2, axis=-1)[inner], atol=1e-12)


class TestCache:
    def test_round_trip(self, tmp_path):
        pyr = features.extract_patch_baseline(textured())
        features.save_pyramid(tmp_path / "p.npz", pyr)
        back = features.load_pyramid(tmp_path / "p.npz")
        for s in features.STRIDES:
            np.testing.assert_array_equal(back[s], pyr[s])
            np.testing.assert_array_equal(back.low_texture[s], pyr.low_texture[s])

    def test_bad_header(self, tmp_path):
        np.savez(tmp_path / "x.npz", format=np.array("other"), version=np.array(1))
        with pytest.raises(MalformedFile):
            features.load_pyramid(tmp_path / "x.npz")
        (tmp_path / "y.npz").write_bytes(b"junk")
        with pytest.raises(MalformedFile):
            features.load_pyramid(tmp_path / "y.npz")


class TestGroundTruthNearestNeighbor:
    """Coarse descriptors find the GT cell (within one cell pitch) across real pairs."""

    @pytest.mark.parametrize("name", ["patch", "tangent", "gradient-concat"])
    def test_nearest_neighbor_rate(self, name, match_cases):
        ext = EXTRACTORS[name]
        hits = [
            nn_within_cell(ext.extract(c.pair.frame_A.image), ext.extract(c.pair.frame_B.image), c.gts[32], 32)
            for c in match_cases[:6]
        ]
        assert np.concatenate(hits).mean() >= 0.9

    def test_coarse_descriptors_distinct(self, match_cases):
        d = features.TangentPatchExtractor().extract(match_cases[0].pair.frame_A.image)[32].reshape(-1, 25)
        gaps = np.linalg.norm(d[:, None] - d[None], axis=-1) + np.eye(len(d))
        assert gaps.min() > 0
