import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from erpmatch import sphere
from erpmatch.errors import DimensionMismatch, ZeroVector
from erpmatch.sphere import ErpGridSpec, PixelCoord, SphericalCoord

G = ErpGridSpec(640, 320)
angles = st.floats(-np.pi, np.pi, allow_nan=False)
lats = st.floats(-np.pi / 2 + 1e-6, np.pi / 2 - 1e-6, allow_nan=False)


class TestGridSpec:
    def test_shape_and_downsample(self):
        assert G.shape == (320, 640)
        assert G.downsample(32) == ErpGridSpec(20, 10)

    @pytest.mark.parametrize("w,h", [(640, 640), (1, 0), (3, 1)])
    def test_bad_aspect(self, w, h):
        with pytest.raises(DimensionMismatch):
            ErpGridSpec(w, h)

    def test_downsample_indivisible(self):
        with pytest.raises(DimensionMismatch):
            ErpGridSpec(40, 20).downsample(3)

    def test_rays_unit(self):
        r = ErpGridSpec(64, 32).rays()
        assert r.shape == (32, 64, 3)
        np.testing.assert_allclose(np.linalg.norm(r, axis=-1), 1.0, atol=1e-12)


class TestSphToCart:
    @pytest.mark.parametrize(
        "theta,phi,expected",
        [(0.0, 0.0, (0, 0, 1)), (np.pi / 2, 0.0, (1, 0, 0)), (0.0, np.pi / 2, (0, 1, 0))],
    )
    def test_reference_points(self, theta, phi, expected):
        np.testing.assert_allclose(sphere.sph_to_cart(theta, phi), expected, atol=1e-15)

    def test_norm_preserved(self):
        rng = np.random.default_rng(1)
        S = sphere.sph_to_cart(rng.uniform(-np.pi, np.pi, 10**6), rng.uniform(-np.pi / 2, np.pi / 2, 10**6))
        assert np.max(np.abs(np.linalg.norm(S, axis=-1) - 1.0)) <= 1e-9


class TestCartToSph:
    @pytest.mark.parametrize(
        "S,theta,phi",
        [((0, 0, 1), 0.0, 0.0), ((0, 1, 0), 0.0, np.pi / 2), ((1, 0, 0), np.pi / 2, 0.0), ((0, -2, 0), 0.0, -np.pi / 2)],
    )
    def test_reference_points(self, S, theta, phi):
        u = sphere.cart_to_sph(np.array(S, dtype=float))
        assert u.theta == pytest.approx(theta, abs=1e-15)
        assert u.phi == pytest.approx(phi, abs=1e-15)

    def test_non_unit_input(self):
        u = sphere.cart_to_sph(np.array([3.0, 3.0 * np.sqrt(2), 3.0]))
        assert u.phi == pytest.approx(np.pi / 4)
        assert u.theta == pytest.approx(np.pi / 4)

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            sphere.cart_to_sph(np.array([[1.0, 0, 0], [0, 0, 1e-13]]))

    @given(angles, lats)
    def test_round_trip(self, theta, phi):
        u = sphere.cart_to_sph(sphere.sph_to_cart(theta, phi))
        assert abs(sphere.wrap_angle(u.theta - theta)) <= 1e-9
        assert abs(u.phi - phi) <= 1e-9


class TestPixelLattice:
    def test_center_pixel(self):
        u = sphere.pixel_to_sph(PixelCoord(319.5, 159.5), G)
        assert u.theta == pytest.approx(0.0, abs=1e-15)
        assert u.phi == pytest.approx(0.0, abs=1e-15)

    def test_left_edge(self):
        u = sphere.pixel_to_sph(PixelCoord(-0.5, 159.5), G)
        assert u.theta == pytest.approx(-np.pi)
        assert u.phi == pytest.approx(0.0, abs=1e-15)

    def test_quarter_point(self):
        u = sphere.pixel_to_sph(PixelCoord(159.5, 79.5), G)
        assert u.theta == pytest.approx(-np.pi / 2, abs=1e-15)
        assert u.phi == pytest.approx(np.pi / 4, abs=1e-15)

    def test_rows_clamped(self):
        u = sphere.pixel_to_sph(PixelCoord(np.array([0.0, 0.0]), np.array([-5.0, 400.0])), G)
        np.testing.assert_allclose(u.phi, [np.pi / 2, -np.pi / 2])

    def test_columns_wrap(self):
        a = sphere.pixel_to_sph(PixelCoord(10.0, 20.0), G)
        b = sphere.pixel_to_sph(PixelCoord(10.0 + 640.0, 20.0), G)
        assert a.theta == pytest.approx(b.theta, abs=1e-12)

    def test_inverse_center(self):
        p = sphere.sph_to_pixel(SphericalCoord(0.0, 0.0), G)
        assert (p.col, p.row) == pytest.approx((319.5, 159.5))

    def test_inverse_seam(self):
        p = sphere.sph_to_pixel(SphericalCoord(np.pi - 1e-12, 0.0), G)
        assert 0.0 <= p.col < 640
        assert p.col == pytest.approx(639.5, abs=1e-6)

    def test_round_trip_random(self):
        rng = np.random.default_rng(2)
        p = PixelCoord(rng.uniform(0, 640, 1000), rng.uniform(0, 319, 1000))
        q = sphere.sph_to_pixel(sphere.pixel_to_sph(p, G), G)
        np.testing.assert_allclose(q.col, p.col, atol=1e-9)
        np.testing.assert_allclose(q.row, p.row, atol=1e-9)

    @given(angles, lats)
    def test_col_canonical(self, theta, phi):
        p = sphere.sph_to_pixel(SphericalCoord(theta, phi), G)
        assert 0.0 <= p.col < 640.0


class TestAzimuthRotation:
    def test_identity(self):
        np.testing.assert_array_equal(sphere.azimuth_rotation(0.0), np.eye(3))

    def test_half_turn(self):
        np.testing.assert_allclose(sphere.azimuth_rotation(np.pi) @ [0, 0, 1], [0, 0, -1], atol=1e-15)

    @given(angles, angles)
    def test_group_law(self, a, b):
        np.testing.assert_allclose(
            sphere.azimuth_rotation(a) @ sphere.azimuth_rotation(b), sphere.azimuth_rotation(a + b), atol=1e-12
        )

    @given(angles)
    def test_proper_rotation(self, a):
        R = sphere.azimuth_rotation(a)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)

    @given(angles, lats, angles)
    def test_adds_longitude_keeps_latitude(self, theta, phi, a):
        u = sphere.cart_to_sph(sphere.azimuth_rotation(a) @ sphere.sph_to_cart(theta, phi))
        assert abs(u.phi - phi) <= 1e-9
        if abs(phi) < np.pi / 2 - 1e-3:
            assert abs(sphere.wrap_angle(u.theta - theta - a)) <= 1e-9


class TestBilinear:
    grid = np.arange(8 * 16, dtype=float).reshape(8, 16)

    def test_exact_at_centers(self):
        rows, cols = np.indices(self.grid.shape)
        np.testing.assert_array_equal(sphere.erp_bilinear_sample(self.grid, cols, rows), self.grid)

    def test_seam_blend(self):
        v = sphere.erp_bilinear_sample(self.grid, 16 - 0.25, 3.0)
        assert v == pytest.approx(0.25 * self.grid[3, 15] + 0.75 * self.grid[3, 0])

    def test_negative_column_wraps(self):
        v = sphere.erp_bilinear_sample(self.grid, -0.25, 3.0)
        assert v == pytest.approx(0.25 * self.grid[3, 15] + 0.75 * self.grid[3, 0])

    def test_constant_grid(self):
        rng = np.random.default_rng(3)
        g = np.full((8, 16, 2), 0.7)
        out = sphere.erp_bilinear_sample(g, rng.uniform(-50, 50, 100), rng.uniform(-3, 12, 100))
        np.testing.assert_allclose(out, 0.7)

    def test_rows_clamp(self):
        assert sphere.erp_bilinear_sample(self.grid, 2.0, -3.0) == self.grid[0, 2]
        assert sphere.erp_bilinear_sample(self.grid, 2.0, 99.0) == self.grid[7, 2]

    def test_seam_continuity(self):
        rng = np.random.default_rng(4)
        g = rng.random((8, 16))
        eps = 1e-7
        lo = sphere.erp_bilinear_sample(g, -eps, 2.5)
        hi = sphere.erp_bilinear_sample(g, 16 - eps, 2.5)
        assert lo == pytest.approx(hi, abs=1e-12)
        d = sphere.erp_bilinear_sample(g, eps, 2.5) - lo
        assert abs(d) <= 2 * eps * np.max(np.abs(np.diff(np.concatenate([g, g[:, :1]], axis=1), axis=1)))


class TestRotationHelpers:
    def test_rodrigues_matches_azimuth(self):
        np.testing.assert_allclose(sphere.rodrigues([0, 0.3, 0]), sphere.azimuth_rotation(0.3), atol=1e-15)

    @settings(max_examples=50)
    @given(st.floats(1e-9, 3.1), angles, lats)
    def test_rotation_angle(self, angle, theta, phi):
        axis = sphere.sph_to_cart(theta, phi)
        assert sphere.rotation_angle(sphere.rodrigues(angle * axis)) == pytest.approx(angle, rel=1e-7, abs=1e-12)

    def test_rotation_to_align(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a, b = sphere.normalize(rng.normal(size=(2, 3)))
            R = sphere.rotation_to_align(a, b)
            np.testing.assert_allclose(R @ a, b, atol=1e-12)
            np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        R = sphere.rotation_to_align([0, 0, 1.0], [0, 0, -1.0])
        np.testing.assert_allclose(R @ [0, 0, 1.0], [0, 0, -1.0], atol=1e-12)
