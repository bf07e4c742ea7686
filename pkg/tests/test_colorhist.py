"""Color decoupling and soft histogram layer tests."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from renderpipe import colorhist as ch
from renderpipe import ops
from renderpipe.errors import ConfigurationError


def _hist_sig(lrg, params):
    delta = lrg[..., :, None] - params.centers
    if params.multiplicative_width:
        t = 1.0 - np.abs(delta) * params.half_widths
    else:
        t = 1.0 - np.abs(delta) / params.half_widths
    return (np.sign(delta), t > 0)


class TestRgbToLrg:
    def test_gray_pixel(self):
        x = np.full((1, 1, 1, 3), 0.3)
        out = ch.rgb_to_lrg(x)
        assert_allclose(out[0, 0, 0, 0], 0.3, rtol=1e-12)
        assert_allclose(out[0, 0, 0, 1:], 1.0 / 3.0, rtol=1e-6)

    def test_chromaticity_exposure_invariant(self):
        rng = np.random.default_rng(42)
        x = rng.uniform(0.1, 1.0, (1, 4, 4, 3))
        a = ch.rgb_to_lrg(x)
        b = ch.rgb_to_lrg(0.5 * x)
        assert_allclose(a[..., 1:], b[..., 1:], atol=1e-7)
        assert_allclose(b[..., 0], 0.5 * a[..., 0], rtol=1e-12)

    def test_black_pixel_is_finite(self):
        out = ch.rgb_to_lrg(np.zeros((1, 1, 1, 3)))
        assert np.all(np.isfinite(out))
        assert_allclose(out[0, 0, 0, 0], 0.0)

    def test_quotient_rule_hand_value(self):
        # gray 0.3 pixel, upstream gradient only on the red chromaticity:
        # d r / d R = (S - R) / S^2 with S = 0.9 + epsilon.
        x = np.full((1, 1, 1, 3), 0.3)
        g = np.zeros_like(x)
        g[..., 1] = 1.0
        grad = ch.rgb_to_lrg_backward(x, g)
        s = 0.9 + ch.CHROMA_EPSILON
        assert_allclose(grad[0, 0, 0, 0], (s - 0.3) / s**2, rtol=1e-10)
        assert_allclose(grad[0, 0, 0, 1], -0.3 / s**2, rtol=1e-10)
        assert_allclose(grad[0, 0, 0, 2], -0.3 / s**2, rtol=1e-10)

    def test_finite_differences(self):
        rng = np.random.default_rng(7)
        inputs = {"x": rng.uniform(0.05, 1.0, (1, 5, 5, 3))}
        res = ops.gradient_check(
            "rgb_to_lrg",
            lambda d: ch.rgb_to_lrg(d["x"]),
            lambda d, g: {"x": ch.rgb_to_lrg_backward(d["x"], g)},
            inputs,
            eps=1e-5,
            tolerance=1e-5,
        )
        assert res.passed, res.line()


class TestHistogramParams:
    def test_default_init(self):
        p = ch.init_default()
        assert p.bins == 6
        assert_allclose(p.centers[0], [0.0, 0.2, 0.4, 0.6, 0.8, 1.0], atol=1e-7)
        assert_allclose(p.half_widths, 0.2, atol=1e-7)

    def test_nonpositive_width_rejected(self):
        with pytest.raises(ConfigurationError):
            ch.HistogramParams(np.zeros((3, 6)), np.zeros((3, 6)))


class TestHistForward:
    def test_partition_of_unity_on_grid(self):
        # with default centers and half-widths the triangles tile [0, 1]:
        # the votes of every value sum to exactly one on all three channels.
        p = ch.init_default(dtype=np.float64)
        grid = np.linspace(0.0, 1.0, 1001)
        lrg = np.repeat(grid, 3).reshape(1, 1, 1001, 3)
        votes = ch.hist_forward(lrg, p).reshape(1001, 3, 6)
        assert_allclose(votes.sum(axis=2), 1.0, atol=1e-6)

    def test_midpoint_splits_vote(self):
        # x = 0.1 sits halfway between the centers 0.0 and 0.2, so those two
        # bins each receive 0.5 and every other bin receives nothing.
        p = ch.init_default(dtype=np.float64)
        lrg = np.full((1, 1, 1, 3), 0.1)
        votes = ch.hist_forward(lrg, p).reshape(3, 6)
        assert_allclose(votes[:, 0], 0.5, atol=1e-12)
        assert_allclose(votes[:, 1], 0.5, atol=1e-12)
        assert_allclose(votes[:, 2:], 0.0, atol=1e-12)

    def test_single_vote_hand_value(self):
        # |0.5 - 0.4| / 0.2 = 0.5, vote 1 - 0.5 = 0.5.
        p = ch.HistogramParams(np.full((3, 1), 0.4), np.full((3, 1), 0.2))
        votes = ch.hist_forward(np.full((1, 1, 1, 3), 0.5), p)
        assert_allclose(votes, 0.5, rtol=1e-12)

    def test_multiplicative_reading(self):
        # in the multiplicative reading the same point votes
        # 1 - |0.5 - 0.4| * 0.2 = 0.98.
        p = ch.HistogramParams(np.full((3, 1), 0.4), np.full((3, 1), 0.2), multiplicative_width=True)
        votes = ch.hist_forward(np.full((1, 1, 1, 3), 0.5), p)
        assert_allclose(votes, 0.98, rtol=1e-12)

    def test_votes_bounded(self):
        rng = np.random.default_rng(3)
        p = ch.init_default(dtype=np.float64)
        lrg = rng.uniform(0, 1, (2, 8, 8, 3))
        votes = ch.hist_forward(lrg, p)
        assert votes.min() >= 0.0 and votes.max() <= 1.0

    def test_channel_layout(self):
        # luminance votes occupy channels 0..bins-1, then red chromaticity,
        # then green chromaticity.
        p = ch.init_default(dtype=np.float64)
        lrg = np.zeros((1, 1, 1, 3))
        lrg[..., 0] = 1.0  # luminance at the top bin center
        votes = ch.hist_forward(lrg, p)[0, 0, 0]
        assert_allclose(votes[5], 1.0)
        assert_allclose(votes[6], 1.0)  # chromaticity 0 hits center 0.0
        assert_allclose(votes[12], 1.0)


class TestHistBackward:
    def test_hand_derivatives(self):
        # vote at x=0.5, center 0.4, half-width 0.2 is active with delta 0.1:
        # d/dx = -sign/w = -5, d/dcenter = +5, d/dwidth = |delta|/w^2 = 2.5.
        p = ch.HistogramParams(np.full((3, 1), 0.4), np.full((3, 1), 0.2))
        lrg = np.full((1, 1, 1, 3), 0.5)
        g = np.zeros((1, 1, 1, 3))
        g[..., 0] = 1.0
        gl, gc, gw = ch.hist_backward(lrg, p, g)
        assert_allclose(gl[0, 0, 0, 0], -5.0, rtol=1e-12)
        assert_allclose(gc[0, 0], 5.0, rtol=1e-12)
        assert_allclose(gw[0, 0], 2.5, rtol=1e-12)
        assert_allclose(gl[0, 0, 0, 1:], 0.0)

    def test_zero_outside_support_and_at_peak(self):
        p = ch.HistogramParams(np.full((3, 1), 0.4), np.full((3, 1), 0.2))
        g = np.ones((1, 1, 2, 3))
        # first pixel far outside support, second exactly at the peak
        lrg = np.zeros((1, 1, 2, 3))
        lrg[0, 0, 1] = 0.4
        gl, gc, gw = ch.hist_backward(lrg, p, g)
        assert_allclose(gl, 0.0)
        assert_allclose(gc, 0.0)
        assert_allclose(gw, 0.0)

    def test_batch_doubling_doubles_parameter_grads(self):
        rng = np.random.default_rng(11)
        p = ch.init_default(dtype=np.float64)
        lrg = rng.uniform(0, 1, (1, 6, 6, 3))
        g = rng.standard_normal((1, 6, 6, 18))
        _, gc1, gw1 = ch.hist_backward(lrg, p, g)
        _, gc2, gw2 = ch.hist_backward(np.tile(lrg, (2, 1, 1, 1)), p, np.tile(g, (2, 1, 1, 1)))
        assert_allclose(gc2, 2 * gc1, rtol=1e-12)
        assert_allclose(gw2, 2 * gw1, rtol=1e-12)

    def test_pixel_permutation_invariance_of_parameter_grads(self):
        rng = np.random.default_rng(13)
        p = ch.init_default(dtype=np.float64)
        lrg = rng.uniform(0, 1, (1, 1, 16, 3))
        g = rng.standard_normal((1, 1, 16, 18))
        perm = rng.permutation(16)
        _, gc1, gw1 = ch.hist_backward(lrg, p, g)
        _, gc2, gw2 = ch.hist_backward(lrg[:, :, perm], p, g[:, :, perm])
        assert_allclose(gc1, gc2, rtol=1e-10)
        assert_allclose(gw1, gw2, rtol=1e-10)

    @pytest.mark.parametrize("multiplicative", [False, True])
    def test_finite_differences(self, multiplicative):
        rng = np.random.default_rng(17)
        centers = np.tile(np.linspace(0.0, 1.0, 6), (3, 1))
        widths = np.full((3, 6), 0.2 if not multiplicative else 3.0)
        inputs = {
            "lrg": rng.uniform(0.01, 0.99, (1, 5, 5, 3)),
            "centers": centers,
            "half_widths": widths,
        }

        def make(d):
            return ch.HistogramParams(d["centers"], d["half_widths"], multiplicative)

        def fwd(d):
            p = make(d)
            return ch.hist_forward(d["lrg"], p), _hist_sig(d["lrg"], p)

        def bwd(d, g):
            gl, gc, gw = ch.hist_backward(d["lrg"], make(d), g)
            return {"lrg": gl, "centers": gc, "half_widths": gw}

        res = ops.gradient_check(
            f"hist mult={multiplicative}", fwd, bwd, inputs, eps=1e-6, tolerance=1e-4
        )
        assert res.passed, res.line()
        assert res.n_checked > 50
