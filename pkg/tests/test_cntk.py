import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exactntk.cntk import (Arch, CntkConfig, cntk_cross, cntk_layer0, cntk_matrix, cntk_pair,
                           cntk_pair_naive, cntk_step, variance_maps)
from exactntk.ntk_fc import ntk_pair
from exactntk.tensor_core import PatchGeometry


def cfg(depth, q=3, arch="vanilla"):
    return CntkConfig(depth, PatchGeometry(q), Arch(arch))


class TestLayers:
    def test_layer0_single_pixel(self):
        st0 = cntk_layer0(np.full((1, 1), 3.0), np.full((1, 1), 3.0), cfg(1, 1))
        assert st0.sigma[0, 0, 0, 0] == 9.0
        assert st0.theta[0, 0, 0, 0] == 9.0

    def test_layer0_gap_starts_at_zero(self):
        st0 = cntk_layer0(np.ones((2, 2)), np.ones((2, 2)), cfg(2, 3, "gap"))
        assert np.all(st0.theta == 0)

    def test_step_single_unit_pixel(self):
        c = cfg(2, 1)
        st0 = cntk_layer0(np.ones((1, 1)), np.ones((1, 1)), c)
        st1 = cntk_step(st0, c, is_last=False)
        assert st1.sigma[0, 0, 0, 0] == pytest.approx(1.0, abs=1e-15)
        assert st1.theta[0, 0, 0, 0] == pytest.approx(2.0, abs=1e-15)

    def test_gap_unit_pixel(self):
        # layer 1 keeps only K; the last layer multiplies by Kdot = 1
        c = cfg(2, 1, "gap")
        st1 = cntk_step(cntk_layer0(np.ones((1, 1)), np.ones((1, 1)), c), c, is_last=False)
        assert st1.theta[0, 0, 0, 0] == pytest.approx(1.0, abs=1e-15)
        assert cntk_pair(np.ones((1, 1)), np.ones((1, 1)), c) == pytest.approx(1.0, abs=1e-15)

    def test_gap_single_layer_is_zero(self, caplog):
        with caplog.at_level(logging.WARNING):
            c = cfg(1, 3, "gap")
        assert "zero" in caplog.text
        assert cntk_pair(np.ones((3, 3)), np.ones((3, 3)), c) == 0.0

    def test_variance_maps_shape(self, rng):
        assert variance_maps(rng.standard_normal((4, 5, 2)), cfg(3)).shape == (3, 4, 5)


class TestDegeneracy:
    @pytest.mark.parametrize("depth", [1, 2, 5])
    def test_single_pixel_matches_fc(self, depth):
        for a, b in [(1.0, 1.0), (0.7, -1.3), (2.0, 0.5)]:
            got = cntk_pair(np.full((1, 1), a), np.full((1, 1), b), cfg(depth, 1))
            assert got == pytest.approx(ntk_pair([a], [b], depth).theta, abs=1e-12)

    @pytest.mark.parametrize("depth", [1, 2, 5])
    def test_unit_single_pixel(self, depth):
        assert cntk_pair(np.ones((1, 1)), np.ones((1, 1)), cfg(depth, 1)) == pytest.approx(
            depth + 1, abs=1e-12)

    def test_all_zero_images(self):
        z = np.zeros((2, 2))
        c = cfg(2)
        assert cntk_pair(z, z, c) == cntk_pair_naive(z, z, c) == 0.0


class TestAgainstNaive:
    @pytest.mark.parametrize("arch", ["vanilla", "gap"])
    def test_quadrature_reference(self, rng, arch):
        x, y = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        c = cfg(2, 3, arch)
        assert cntk_pair(x, y, c) == pytest.approx(cntk_pair_naive(x, y, c), abs=1e-10)

    def test_multichannel(self, rng):
        x, y = rng.standard_normal((3, 2, 2)), rng.standard_normal((3, 2, 2))
        c = cfg(2, 3)
        assert cntk_pair(x, y, c) == pytest.approx(cntk_pair_naive(x, y, c), abs=1e-10)

    @pytest.mark.parametrize("arch", ["vanilla", "gap"])
    def test_monte_carlo_reference(self, rng, arch):
        x, y = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        c = cfg(2, 3, arch)
        draws = np.array([cntk_pair_naive(x, y, c, mc_samples=20_000, seed=s) for s in range(10)])
        se = draws.std(ddof=1) / math.sqrt(len(draws))
        assert abs(draws.mean() - cntk_pair(x, y, c)) <= 3 * se


class TestInvariants:
    def test_symmetric_in_arguments(self, rng):
        x, y = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
        for arch in ("vanilla", "gap"):
            c = cfg(3, 3, arch)
            assert cntk_pair(x, y, c) == pytest.approx(cntk_pair(y, x, c), rel=1e-13)

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 2**31), a=st.floats(0.1, 10), b=st.floats(0.1, 10),
           arch=st.sampled_from(["vanilla", "gap"]))
    def test_homogeneity(self, seed, a, b, arch):
        r = np.random.default_rng(seed)
        x, y = r.standard_normal((3, 4)), r.standard_normal((3, 4))
        c = cfg(2, 3, arch)
        assert cntk_pair(a * x, b * y, c) == pytest.approx(a * b * cntk_pair(x, y, c),
                                                           rel=1e-10, abs=1e-12)

    @pytest.mark.parametrize("arch", ["vanilla", "gap"])
    def test_translation_of_interior_support(self, rng, arch):
        # with the support far enough from the border, zero padding is never reached
        x, y = np.zeros((12, 12)), np.zeros((12, 12))
        x[5:7, 5:7] = rng.standard_normal((2, 2))
        y[4:7, 5:8] = rng.standard_normal((3, 3))
        c = cfg(2, 3, arch)
        base = cntk_pair(x, y, c)
        both = cntk_pair(np.roll(x, (1, -1), (0, 1)), np.roll(y, (1, -1), (0, 1)), c)
        assert both == pytest.approx(base, rel=1e-12)
        if arch == "gap":
            one = cntk_pair(np.roll(x, (-1, 1), (0, 1)), y, c)
            assert one == pytest.approx(base, rel=1e-12)

    def test_deterministic(self, rng):
        x, y = rng.standard_normal((5, 5)), rng.standard_normal((5, 5))
        c = cfg(3, 3, "gap")
        assert cntk_pair(x, y, c) == cntk_pair(x, y, c)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cntk_pair(np.ones((2, 2)), np.ones((3, 3)), cfg(1))


class TestMatrix:
    @pytest.mark.parametrize("arch", ["vanilla", "gap"])
    def test_psd_and_symmetric(self, rng, arch):
        X = rng.standard_normal((12, 4, 4, 2))
        K = cntk_matrix(X, cfg(2, 3, arch), threads=2)
        assert K.kind == f"cntk-{arch}"
        assert np.array_equal(K.entries, K.entries.T)
        K.validate()

    def test_cross_matches_matrix(self, rng):
        X = rng.standard_normal((5, 3, 3))
        c = cfg(2)
        K = cntk_matrix(X, c, threads=1).entries
        np.testing.assert_array_equal(cntk_cross(X[:2], X, c, threads=3), K[:2])

    def test_thread_count_does_not_change_bits(self, rng):
        X = rng.standard_normal((7, 3, 3))
        c = cfg(2, 3, "gap")
        a = cntk_matrix(X, c, threads=1).entries
        b = cntk_matrix(X, c, threads=4).entries
        assert a.tobytes() == b.tobytes()

    def test_mixed_shapes_rejected(self):
        with pytest.raises(ValueError):
            cntk_matrix([np.ones((2, 2)), np.ones((3, 3))], cfg(1))
