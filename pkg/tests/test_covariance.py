import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from keypointlab.covariance import (
    DIAG_FLOOR,
    CovarianceTrainConfig,
    build_covariance,
    cholesky_factor,
    covariance_loss,
    evaluate_covariance,
    nll_reprojection,
    propagate_error_cov,
    softplus_inverse,
    train_covariance,
)
from keypointlab.data import make_toy_corpus
from keypointlab.errors import InsufficientDataError, NumericalDomainError
from keypointlab.geometry import Homography, HomographySamplerConfig
from keypointlab.models import DetectorModel
from keypointlab.training import parameter_hash

raws = st.floats(-50, 50, allow_nan=False)


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def gaussian_nll_oracle(e, s):
    # -log N(e; 0, S) minus the log(2 pi) constant
    return 0.5 * np.log(np.linalg.det(s)) + 0.5 * e @ np.linalg.inv(s) @ e


def random_homography(rng):
    m = np.eye(3) + rng.normal(0, [[0.1, 0.1, 3], [0.1, 0.1, 3], [1e-4, 1e-4, 0]])
    return Homography(m)


class TestBuild:
    def test_identity_from_softplus_inverse(self):
        r = softplus_inverse(1.0)
        assert r == pytest.approx(math.log(math.e - 1))
        np.testing.assert_allclose(build_covariance(t(r), t(0.0), t(r)).numpy(), np.eye(2), atol=1e-12)

    def test_diagonal_when_offdiag_zero(self):
        s = build_covariance(t(0.3), t(0.0), t(-1.2)).numpy()
        sp = lambda x: math.log1p(math.exp(x))
        np.testing.assert_allclose(s, np.diag([sp(0.3) ** 2, sp(-1.2) ** 2]), atol=1e-12)

    def test_cholesky_recovered(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            r = rng.normal(0, 2, 3)
            L = cholesky_factor(t(r[0]), t(r[1]), t(r[2])).numpy()
            S = build_covariance(t(r[0]), t(r[1]), t(r[2])).numpy()
            np.testing.assert_allclose(np.linalg.cholesky(S), L, atol=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(raws, raws, raws)
    def test_always_spd(self, a, b, c):
        s = build_covariance(t(a), t(b), t(c)).numpy()
        assert np.allclose(s, s.T, atol=1e-9)
        assert np.linalg.eigvalsh(s).min() > 0

    def test_extreme_corners_spd(self):
        import itertools

        for a, b, c in itertools.product((-50.0, 0.0, 50.0), repeat=3):
            assert np.linalg.eigvalsh(build_covariance(t(a), t(b), t(c)).numpy()).min() > 0

    def test_floor(self):
        L = cholesky_factor(t(-50.0), t(0.0), t(-50.0)).numpy()
        assert L[0, 0] == L[1, 1] == DIAG_FLOOR


class TestPropagate:
    def test_identity(self):
        np.testing.assert_allclose(propagate_error_cov(t(np.eye(2)), t(np.eye(2)), np.eye(2)).numpy(), 2 * np.eye(2))

    def test_scalar(self):
        np.testing.assert_allclose(propagate_error_cov(t(np.eye(2)), t(np.eye(2)), 2 * np.eye(2)).numpy(), 5 * np.eye(2))

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a, b, j = rng.normal(size=(3, 2, 2))
            sa, sb = a @ a.T + 0.1 * np.eye(2), b @ b.T + 0.1 * np.eye(2)
            want = np.array(
                [[sa[r, c] + sum(j[r, p] * sb[p, q] * j[c, q] for p in range(2) for q in range(2)) for c in range(2)] for r in range(2)]
            )
            got = propagate_error_cov(t(sa), t(sb), j).numpy()
            np.testing.assert_allclose(got, want, atol=1e-12)
            assert np.linalg.eigvalsh(got).min() > 0


class TestNLL:
    def test_zero(self):
        assert float(nll_reprojection(t([0.0, 0.0]), t(np.eye(2)))) == 0.0

    def test_half(self):
        assert float(nll_reprojection(t([1.0, 0.0]), t(np.eye(2)))) == pytest.approx(0.5, abs=1e-12)

    def test_log2(self):
        v = float(nll_reprojection(t([2.0, 0.0]), t(np.diag([4.0, 1.0]))))
        assert abs(v - (math.log(2) + 0.5)) < 1e-9

    def test_generic_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            a = rng.normal(size=(2, 2))
            s = a @ a.T + 0.05 * np.eye(2)
            e = rng.normal(0, 2, 2)
            assert float(nll_reprojection(t(e), t(s))) == pytest.approx(gaussian_nll_oracle(e, s), rel=1e-9, abs=1e-9)

    def test_not_pd(self):
        with pytest.raises(NumericalDomainError):
            nll_reprojection(t([1.0, 0.0]), t([[1.0, 2.0], [2.0, 1.0]]))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.1, 10), st.floats(-10, 10))
    def test_stationary_at_half_squared_norm(self, ex, ey):
        e = t([ex, ey])
        best = 0.5 * float(e @ e)
        scan = np.linspace(0.5 * best, 1.5 * best, 2001)
        vals = [float(nll_reprojection(e, t(s * np.eye(2)))) for s in scan]
        assert scan[int(np.argmin(vals))] == pytest.approx(best, rel=2e-3)


def _random_loss_inputs(rng, m=6):
    xa = rng.uniform(0, 100, (m, 2))
    h = random_homography(rng)
    from keypointlab.geometry import apply_homography

    xb = apply_homography(h, xa) + rng.normal(0, 1, (m, 2))
    ra, rb = rng.normal(0, 0.7, (m, 3)), rng.normal(0, 0.7, (m, 3))
    pairs = np.stack([np.arange(m), np.arange(m)], 1)
    return pairs, xa, xb, ra, rb, h


def _sig(r):
    return build_covariance(r[:, 0], r[:, 1], r[:, 2])


class TestLoss:
    def test_half_identity_closed_form(self):
        x = np.random.default_rng(3).uniform(0, 50, (5, 2))
        half = t(np.tile(0.5 * np.eye(2), (5, 1, 1)))
        pairs = np.stack([np.arange(5)] * 2, 1)
        assert float(covariance_loss(pairs, x, x, half, half, Homography.identity())) == pytest.approx(0.0, abs=1e-12)

    def test_error_doubling(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(0, 50, (5, 2))
        e = rng.normal(size=(5, 2))
        sig = t(np.tile(np.diag([2.0, 0.5]), (5, 1, 1)))
        pairs = np.stack([np.arange(5)] * 2, 1)
        h = Homography.identity()
        logdet = 0.5 * math.log(np.linalg.det(2 * np.diag([2.0, 0.5])))
        q1 = float(covariance_loss(pairs, x, x + e, sig, sig, h)) - logdet
        q2 = float(covariance_loss(pairs, x, x + 2 * e, sig, sig, h)) - logdet
        assert q2 == pytest.approx(4 * q1, rel=1e-12)

    def test_swap_symmetry(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            pairs, xa, xb, ra, rb, h = _random_loss_inputs(rng)
            l1 = covariance_loss(pairs, xa, xb, _sig(t(ra)), _sig(t(rb)), h)
            l2 = covariance_loss(pairs[:, ::-1], xb, xa, _sig(t(rb)), _sig(t(ra)), h.inverse())
            assert float(l1) == pytest.approx(float(l2), rel=1e-10)

    def test_empty(self):
        with pytest.raises(InsufficientDataError):
            covariance_loss(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)), t(np.zeros((0, 2, 2))), t(np.zeros((0, 2, 2))), Homography.identity())

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            pairs, xa, xb, ra, rb, h = _random_loss_inputs(rng)
            ta, tb = t(ra).requires_grad_(), t(rb).requires_grad_()
            covariance_loss(pairs, xa, xb, _sig(ta), _sig(tb), h).backward()

            def f(a, b):
                return float(covariance_loss(pairs, xa, xb, _sig(t(a)), _sig(t(b)), h))

            step = 1e-6
            for arr, grad, first in ((ra, ta.grad.numpy(), True), (rb, tb.grad.numpy(), False)):
                fd = np.zeros_like(arr)
                for idx in np.ndindex(arr.shape):
                    p, m = arr.copy(), arr.copy()
                    p[idx] += step
                    m[idx] -= step
                    fd[idx] = (f(p, rb) - f(m, rb)) / (2 * step) if first else (f(ra, p) - f(ra, m)) / (2 * step)
                np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-8)


def _tiny_model():
    torch.manual_seed(0)
    return DetectorModel(widths=(8, 8, 8, 8), head_dim=8, cov_hidden=8)


class TestTrain:
    def test_frozen_parameters_and_determinism(self, tmp_path):
        imgs = make_toy_corpus(3, 96, seed=1)
        cfg = CovarianceTrainConfig(steps=3, num_keypoints=32, crop_size=80, out_size=64)
        hashes = []
        for i in range(2):
            model = _tiny_model()
            det_before = parameter_hash(list(model.detector_parameters()))
            s = train_covariance(imgs, model, cfg, out_dir=tmp_path / str(i))
            assert parameter_hash(list(model.detector_parameters())) == det_before
            hashes.append(s["checkpoint_hash"])
        assert hashes[0] == hashes[1]

    @pytest.mark.slow
    def test_recovers_injected_noise(self):
        # exact correspondences + known noise: predicted Sigma should approach Sigma*
        target = [[1.0, 0.3], [0.3, 0.5]]
        imgs = make_toy_corpus(6, 128, seed=3)
        cfg = CovarianceTrainConfig(
            steps=150, num_keypoints=64, crop_size=112, out_size=96,
            injected_noise=target, exact_correspondences=True,
        )
        model = _tiny_model()
        train_covariance(imgs, model, cfg)
        from keypointlab.detector import make_validation_pairs

        pairs = make_validation_pairs(imgs, cfg, seed=9, num_pairs=4)
        res = evaluate_covariance(model, pairs, cfg, seed=9)
        ratio = res["mean_trace"] / 1.5
        assert 0.7 <= ratio <= 1.4
        assert res["nll"] < res["nll_identity"]
