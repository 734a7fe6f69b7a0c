import math

import numpy as np
import pytest

from jointinr.metrics import PSNR_IDENTICAL, SsimConfig, aggregate, psnr, ssim


class TestPsnr:
    def test_identical_sentinel(self):
        a = np.random.default_rng(0).uniform(size=(8, 8))
        assert psnr(a, a) == PSNR_IDENTICAL == math.inf

    def test_uniform_offset_twenty_db(self):
        b = np.zeros((16, 16))
        assert psnr(b + 0.1, b, data_range=1.0) == pytest.approx(20.0, abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
        assert psnr(2 * a, 2 * b, 2.0) == pytest.approx(psnr(a, b, 1.0), abs=1e-12)

    def test_default_range_is_reference_max(self):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(size=(8, 8)), 0.5 * rng.uniform(size=(8, 8))
        assert psnr(a, b) == psnr(a, b, data_range=b.max())

    def test_monotone_in_mse(self):
        b = np.zeros((8, 8))
        vals = [psnr(b + e, b, 1.0) for e in (0.01, 0.02, 0.05, 0.1)]
        assert all(x > y for x, y in zip(vals, vals[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((5, 5)))


class TestSsim:
    def test_identity(self):
        a = np.random.default_rng(0).uniform(size=(32, 32))
        assert ssim(a, a) == 1.0

    def test_constant_images(self):
        c = np.full((16, 16), 0.4)
        assert ssim(c, c) == pytest.approx(1.0, abs=1e-15)

    def test_independent_noise_low(self):
        rng = np.random.default_rng(1)
        vals = [ssim(rng.uniform(size=(32, 32)), rng.uniform(size=(32, 32))) for _ in range(20)]
        assert max(vals) < 0.5

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        cfg = SsimConfig(data_range=1.0)
        for _ in range(5):
            a, b = rng.uniform(size=(24, 24)), rng.uniform(size=(24, 24))
            assert abs(ssim(a, b, cfg) - ssim(b, a, cfg)) < 1e-12

    def test_window_weights(self):
        k = SsimConfig().kernel()
        assert k.size == 7
        assert k.sum() == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(k, k[::-1])

    def test_range(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(size=(16, 16))
        assert -1.0 <= ssim(a, 1 - a) <= 1.0

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((5, 5)), np.zeros((5, 5)))

    def test_matches_reference_implementation(self):
        skm = pytest.importorskip("skimage.metrics")
        rng = np.random.default_rng(4)
        a = rng.uniform(size=(32, 32))
        b = np.clip(a + 0.1 * rng.standard_normal((32, 32)), 0, 1)
        ref = skm.structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                                        use_sample_covariance=False, data_range=1.0)
        # the reference averages over a slightly different border region
        assert ssim(a, b, SsimConfig(data_range=1.0)) == pytest.approx(ref, abs=0.02)


class TestAggregate:
    def test_single(self):
        assert aggregate([3.5]) == (3.5, 0.0)

    def test_constant(self):
        assert aggregate([1.0, 1.0, 1.0]) == (1.0, 0.0)

    def test_pair(self):
        mean, se = aggregate([0.0, 2.0])
        assert mean == 1.0
        assert se == pytest.approx(1.0, abs=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([])
