import numpy as np
import pytest

from erpmatch import frame, sphere, synth
from erpmatch.errors import DataError, DimensionMismatch
from erpmatch.frame import DepthMap, ErpImage, Frame, MatchField, PoseSE3
from erpmatch.sphere import ErpGridSpec

G = ErpGridSpec(64, 32)


def random_pose(rng, scale=0.3):
    return PoseSE3(sphere.rodrigues(rng.normal(0, 0.3, 3)), rng.normal(0, scale, 3))


@pytest.fixture(scope="module")
def room_pair():
    scene = synth.default_room_scene(3)
    pA, pB = synth.pair_poses(0.3, 0.4, seed=3)
    _, dA = synth.raycast_erp(scene, pA, G)
    _, dB = synth.raycast_erp(scene, pB, G)
    return dA, pA, dB, pB


class TestContainers:
    def test_image_gray_and_channels(self):
        img = ErpImage(np.ones((32, 64, 3)) * [1.0, 0.0, 0.0])
        assert img.channels == 3
        np.testing.assert_allclose(img.gray(), 0.299)
        assert ErpImage(np.zeros((32, 64))).channels == 1

    def test_image_rejects_bad_shape(self):
        with pytest.raises(DimensionMismatch):
            ErpImage(np.zeros((32, 32, 3)))
        with pytest.raises(DataError):
            ErpImage(np.full((32, 64), np.nan))

    def test_depth_invalid_pixels(self):
        d = np.ones((32, 64))
        d[0, 0] = -1.0
        d[0, 1] = np.inf
        d[0, 2] = 0.0
        mask = np.ones((32, 64), bool)
        mask[0, 3] = False
        dm = DepthMap(d, mask)
        assert not dm.valid[0, :4].any()
        assert dm.valid[0, 4:].all()
        assert np.isnan(dm.data[0, :4]).all()
        assert dm.filled(7.0)[0, 0] == 7.0

    def test_pose_validation(self):
        with pytest.raises(DataError):
            PoseSE3(np.diag([1.0, 1.0, -1.0]))
        with pytest.raises(DataError):
            PoseSE3(2 * np.eye(3))

    def test_pose_algebra(self):
        rng = np.random.default_rng(0)
        a, b = random_pose(rng), random_pose(rng)
        X = rng.normal(size=(10, 3))
        np.testing.assert_allclose(a.compose(b).apply(X), a.apply(b.apply(X)), atol=1e-12)
        np.testing.assert_allclose(a.inverse().apply(a.apply(X)), X, atol=1e-12)

    def test_relative_pose_maps_cameras(self):
        rng = np.random.default_rng(1)
        pA, pB = random_pose(rng), random_pose(rng)
        X_A = rng.normal(size=(5, 3))
        world = pA.apply(X_A)
        np.testing.assert_allclose(frame.relative_pose(pA, pB).apply(X_A), pB.inverse().apply(world), atol=1e-12)

    def test_matchfield_validation(self):
        with pytest.raises(DataError):
            MatchField(np.ones((32, 64, 3)), np.ones((32, 64)))
        with pytest.raises(DataError):
            MatchField(G.rays(), np.full((32, 64), 1.5))
        with pytest.raises(DimensionMismatch):
            MatchField(G.rays(), np.ones((32, 63)))
        m = MatchField.identity(G, 0.5)
        assert m.spec == G and np.all(m.certainty == 0.5)


class TestWarp:
    def test_identity_pose(self, room_pair):
        dA, pA, _, _ = room_pair
        m, warped = frame.warp_frame(dA, pA, pA)
        np.testing.assert_allclose(m.directions[dA.valid], G.rays()[dA.valid], atol=1e-12)
        np.testing.assert_allclose(warped.filled(0), dA.filled(0), atol=1e-12)

    def test_round_trip(self, room_pair):
        dA, pA, dB, pB = room_pair
        m, warped = frame.warp_frame(dA, pA, pB)
        back, _, ok = frame.warp_points(m.directions, warped.filled(np.nan), frame.relative_pose(pB, pA))
        ok &= warped.valid
        np.testing.assert_allclose(back[ok], G.rays()[ok], atol=1e-12)

    def test_warp_points_rejects_center(self):
        unit, dist, ok = frame.warp_points(np.array([[0, 0, 1.0]]), np.array([1.0]), PoseSE3(np.eye(3), [0, 0, -1.0]))
        assert not ok[0] and np.isnan(dist[0])

    def test_sample_depth_constant(self):
        d = DepthMap(np.full((32, 64), 2.5))
        rng = np.random.default_rng(2)
        dirs = sphere.normalize(rng.normal(size=(50, 3)))
        vals, ok = frame.sample_depth(d, dirs)
        assert ok.all()
        np.testing.assert_allclose(vals, 2.5)

    def test_sample_depth_invalid_neighbor(self):
        data = np.full((32, 64), 2.0)
        data[10, 20] = np.nan
        d = DepthMap(data)
        u = sphere.pixel_to_sph(sphere.PixelCoord(np.array([20.5, 25.0]), np.array([10.0, 10.0])), G)
        _, ok = frame.sample_depth(d, sphere.sph_to_cart(*u))
        assert ok.tolist() == [False, True]


class TestCertaintyMask:
    def test_matches_brute_force(self, room_pair):
        dA, pA, dB, pB = room_pair
        m, warped = frame.warp_frame(dA, pA, pB)
        sampled, ok = frame.sample_depth(dB, m.directions)
        mask = frame.certainty_mask(warped, DepthMap(sampled, ok), 0.05)
        expected = np.zeros_like(mask)
        for r in range(G.height):
            for c in range(G.width):
                if warped.valid[r, c] and ok[r, c]:
                    expected[r, c] = abs(warped.data[r, c] - sampled[r, c]) / sampled[r, c] < 0.05
        np.testing.assert_array_equal(mask, expected)
        assert 0.3 < mask.mean() < 1.0

    def test_alpha_must_be_positive(self, room_pair):
        dA = room_pair[0]
        with pytest.raises(ValueError):
            frame.certainty_mask(dA, dA, 0.0)

    def test_gt_certainty_is_binary(self, room_pair):
        gt, _ = frame.ground_truth_matches(*room_pair)
        assert set(np.unique(gt.certainty)) <= {0.0, 1.0}


class TestOverlap:
    def test_same_frame(self, room_pair):
        dA, pA, _, _ = room_pair
        f = Frame(None, dA, pA)
        assert frame.overlap_ratio(f, f) == 1.0

    def test_far_apart(self, room_pair):
        dA, pA, _, _ = room_pair
        scene = synth.default_room_scene(3)
        far = PoseSE3(np.eye(3), [0.0, 0.0, 40.0])
        _, dFar = synth.raycast_erp(synth.SceneSpec(primitives=scene.primitives[1:], seed=3), far, G)
        assert frame.overlap_ratio(Frame(None, dA, pA), Frame(None, dFar, far)) < 0.05

    def test_needs_depth(self, room_pair):
        with pytest.raises(DataError):
            frame.overlap_ratio(Frame(None, None, None), Frame(None, room_pair[0], room_pair[1]))


class TestAzimuthAugment:
    def test_snap(self):
        shift, snapped = frame.snap_azimuth(0.1, 64)
        assert shift == 1
        assert snapped == pytest.approx(2 * np.pi / 64)

    def test_pixels_and_pose_stay_consistent(self, room_pair):
        dA, pA, _, _ = room_pair
        _, d2, p2 = frame.augment_azimuth(None, dA, pA, 3 * 2 * np.pi / 64)
        np.testing.assert_array_equal(d2.valid, np.roll(dA.valid, 3, axis=1))
        # every shifted pixel still sees the same world point
        world1 = pA.apply(G.rays()[dA.valid] * dA.data[dA.valid][:, None])
        shifted_rays = np.roll(G.rays(), -3, axis=1)
        mask = np.roll(dA.valid, 3, axis=1)
        world2 = p2.apply(np.roll(shifted_rays, 3, axis=1)[mask] * d2.data[mask][:, None])
        np.testing.assert_allclose(np.sort(world1, axis=0), np.sort(world2, axis=0), atol=1e-9)

    def test_overlap_invariant(self, room_pair):
        dA, pA, dB, pB = room_pair
        base = frame.overlap_ratio(Frame(None, dA, pA), Frame(None, dB, pB))
        for k in (1, 7, 32, 50):
            _, d2, p2 = frame.augment_azimuth(None, dA, pA, k * 2 * np.pi / 64)
            assert frame.overlap_ratio(Frame(None, d2, p2), Frame(None, dB, pB)) == base

    def test_inexact_mode_runs(self, room_pair):
        dA, pA, _, _ = room_pair
        img = ErpImage(np.random.default_rng(0).random((32, 64)))
        i2, d2, p2 = frame.augment_azimuth(img, dA, pA, 0.123, exact=False)
        assert i2.data.shape == img.data.shape and d2.valid.sum() <= dA.valid.sum()
