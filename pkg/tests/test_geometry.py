import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from keypointlab.errors import (
    DegenerateConfigurationError,
    DegeneratePointError,
    InsufficientDataError,
    ParseError,
)
from keypointlab.geometry import (
    Homography,
    HomographySamplerConfig,
    apply_homography,
    corner_error,
    estimate_homography_dlt,
    homography_jacobian,
    sample_homography,
)


def random_homography(rng, size=(200, 150)):
    cfg = HomographySamplerConfig(180.0, 0.3, (0.6, 1.6), 0.2)
    return sample_homography(cfg, size, rng=rng)


def fd_jacobian(h, pt, step=1e-4):
    jac = np.zeros((2, 2))
    for k in range(2):
        d = np.zeros(2)
        d[k] = step
        jac[:, k] = (apply_homography(h, pt + d) - apply_homography(h, pt - d)) / (2 * step)
    return jac


class TestHomographyType:
    def test_normalized_bottom_right(self):
        h = Homography(np.diag([2.0, 4.0, 2.0]))
        assert h.matrix[2, 2] == 1.0
        np.testing.assert_allclose(h.matrix, np.diag([1.0, 2.0, 1.0]))

    def test_unit_frobenius_when_h33_vanishes(self):
        m = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        h = Homography(m)
        assert np.linalg.norm(h.matrix) == pytest.approx(1.0)

    def test_singular_rejected(self):
        with pytest.raises(DegenerateConfigurationError):
            Homography(np.array([[1.0, 2, 3], [2, 4, 6], [0, 0, 1]]))

    def test_inverse_roundtrip(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            h = random_homography(rng)
            pts = rng.uniform(0, 150, size=(20, 2))
            back = apply_homography(h.inverse(), apply_homography(h, pts))
            np.testing.assert_allclose(back, pts, atol=1e-9)

    def test_text_roundtrip(self, tmp_path):
        h = random_homography(np.random.default_rng(1))
        h.save(tmp_path / "H")
        np.testing.assert_array_equal(Homography.load(tmp_path / "H").matrix, h.matrix)
        assert len((tmp_path / "H").read_text().strip().splitlines()) == 3

    def test_truncated_text(self):
        with pytest.raises(ParseError):
            Homography.from_text("1 0 0\n0 1 0\n")


class TestApply:
    def test_identity(self):
        np.testing.assert_array_equal(apply_homography(Homography.identity(), (5.0, 7.0)), [5.0, 7.0])

    def test_translation(self):
        np.testing.assert_allclose(apply_homography(Homography.translation(2, 3), (1.0, 1.0)), [3.0, 4.0])

    def test_perspective_dehomogenization(self):
        m = np.array([[1.2, 0.3, 5.0], [0.1, 0.9, -2.0], [1e-3, 0.0, 1.0]])
        out = apply_homography(Homography(m), (100.0, 0.0))
        num_x = 1.2 * 100.0 + 0.3 * 0.0 + 5.0
        num_y = 0.1 * 100.0 + 0.9 * 0.0 - 2.0
        w = 1e-3 * 100.0 + 1.0
        assert w == pytest.approx(1.1)
        np.testing.assert_allclose(out, [num_x / 1.1, num_y / 1.1], rtol=1e-14)

    def test_line_at_infinity(self):
        m = np.array([[1.0, 0, 0], [0, 1.0, 0], [-0.01, 0, 1.0]])
        with pytest.raises(DegeneratePointError) as info:
            apply_homography(Homography(m), [[0.0, 0.0], [100.0, 3.0]])
        assert info.value.index == 1


class TestJacobian:
    def test_identity(self):
        np.testing.assert_allclose(homography_jacobian(Homography.identity(), (3.0, 4.0)), np.eye(2))

    def test_affine_constant(self):
        a = np.array([[1.5, 0.2, 3.0], [-0.4, 0.7, 1.0], [0, 0, 1.0]])
        for pt in [(0.0, 0.0), (10.0, -3.0), (100.0, 50.0)]:
            np.testing.assert_allclose(homography_jacobian(Homography(a), pt), a[:2, :2])

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        h = random_homography(rng)
        pt = np.array([10.0, 20.0])
        np.testing.assert_allclose(homography_jacobian(h, pt), fd_jacobian(h, pt), rtol=1e-5)

    def test_finite_differences_many(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            h = random_homography(rng)
            pt = rng.uniform(0, 150, size=2)
            ana = homography_jacobian(h, pt)
            num = fd_jacobian(h, pt)
            assert np.linalg.norm(ana - num) <= 1e-5 * np.linalg.norm(ana)

    def test_vectorized(self):
        rng = np.random.default_rng(4)
        h = random_homography(rng)
        pts = rng.uniform(0, 100, size=(7, 2))
        batch = homography_jacobian(h, pts)
        for p, j in zip(pts, batch):
            np.testing.assert_allclose(j, homography_jacobian(h, p))


class TestSampling:
    def test_zero_config_is_identity(self):
        h = sample_homography(HomographySamplerConfig.identity(5), (64, 48))
        np.testing.assert_allclose(h.matrix, np.eye(3), atol=1e-15)

    def test_rotation_90_corner(self):
        cfg = HomographySamplerConfig(90.0, 0.0, (1.0, 1.0), 0.0)

        class Fixed:
            # forces the +90 draw; remaining draws are zero-width
            def uniform(self, lo, hi, size=None):
                if size is None:
                    return hi
                return np.full(size, hi)

        h = sample_homography(cfg, (100, 100), rng=Fixed())
        c, s = 0.0, 1.0
        cx = cy = 49.5
        oracle_x = cx + c * (0 - cx) - s * (0 - cy)
        oracle_y = cy + s * (0 - cx) + c * (0 - cy)
        np.testing.assert_allclose(apply_homography(h, (0.0, 0.0)), [oracle_x, oracle_y], atol=1e-9)
        np.testing.assert_allclose([oracle_x, oracle_y], [99.0, 0.0], atol=1e-9)

    def test_seed_determinism(self):
        cfg = HomographySamplerConfig(rng_seed=17)
        a = sample_homography(cfg, (160, 160))
        b = sample_homography(cfg, (160, 160))
        assert a.matrix.tobytes() == b.matrix.tobytes()

    def test_rotation_uniform(self):
        cfg = HomographySamplerConfig(120.0, 0.0, (1.0, 1.0), 0.0)
        rng = np.random.default_rng(123)
        angles = []
        for _ in range(10_000):
            m = sample_homography(cfg, (64, 64), rng=rng).matrix
            angles.append(np.rad2deg(np.arctan2(m[1, 0], m[0, 0])))
        res = stats.kstest(angles, stats.uniform(loc=-120, scale=240).cdf)
        assert res.pvalue > 0.01

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(scale_range=(0.0, 1.0)),
            dict(scale_range=(1.2, 1.0)),
            dict(max_perspective=-0.1),
            dict(max_perspective=0.9),
            dict(max_rotation_deg=400.0),
        ],
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            HomographySamplerConfig(**kwargs)


class TestDLT:
    def _pairs(self, rng, n):
        h = random_homography(rng)
        src = rng.uniform(0, 150, size=(n, 2))
        return h, src, apply_homography(h, src)

    @pytest.mark.parametrize("n", [4, 100])
    def test_exact_recovery(self, n):
        rng = np.random.default_rng(n)
        for _ in range(20):
            h, src, dst = self._pairs(rng, n)
            est = estimate_homography_dlt(src, dst)
            assert np.linalg.norm(est.matrix - h.matrix) < 1e-6

    def test_similarity_equivariance(self):
        rng = np.random.default_rng(9)
        h, src, dst = self._pairs(rng, 30)
        sim = Homography(np.array([[0.5, -0.2, 10.0], [0.2, 0.5, -4.0], [0, 0, 1.0]]))
        est = estimate_homography_dlt(sim(src), sim(dst))
        expected = sim @ h @ sim.inverse()
        assert np.linalg.norm(est.matrix - expected.matrix) < 1e-6

    def test_insufficient(self):
        with pytest.raises(InsufficientDataError):
            estimate_homography_dlt(np.zeros((3, 2)), np.zeros((3, 2)))

    def test_collinear(self):
        src = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        with pytest.raises(DegenerateConfigurationError):
            estimate_homography_dlt(src, src * 2)


class TestCornerError:
    def test_identity_zero(self):
        h = random_homography(np.random.default_rng(0))
        assert corner_error(h, h, (640, 480)) == pytest.approx(0.0, abs=1e-9)

    def test_translation_one_pixel(self):
        h = random_homography(np.random.default_rng(1))
        assert corner_error(Homography.translation(1, 0) @ h, h, (640, 480)) == pytest.approx(1.0)

    def test_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a, b = random_homography(rng), random_homography(rng)
            total = 0.0
            for x, y in [(0, 0), (639, 0), (0, 479), (639, 479)]:
                pa = a.matrix @ np.array([x, y, 1.0])
                pb = b.matrix @ np.array([x, y, 1.0])
                total += np.hypot(*(pa[:2] / pa[2] - pb[:2] / pb[2]))
            assert corner_error(a, b, (640, 480)) == pytest.approx(total / 4, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.integers(0, 2**31 - 1)
)
def test_roundtrip_property(x, y, seed):
    h = random_homography(np.random.default_rng(seed))
    try:
        fwd = apply_homography(h, (x, y))
        back = apply_homography(h.inverse(), fwd)
    except DegeneratePointError:
        return
    scale = max(1.0, abs(x), abs(y))
    np.testing.assert_allclose(back, [x, y], atol=1e-9 * scale * 10)
