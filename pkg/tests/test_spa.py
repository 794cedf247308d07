import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hbox2rbox import synth
from hbox2rbox.errors import InvalidArgumentError
from hbox2rbox.geom import HBox, Proposal, RBox, mcr
from hbox2rbox.spa import (
    default_topk,
    localization_score,
    sample_rbox_patch,
    spa_loss,
    split_and_flip,
    ssim,
    topk_select,
)

from gradcases import symmetric_image


def one_shape(kind, theta, size=128, L=70.0, aspect=0.6, noise=0.0, seed=0):
    spec = synth.ShapeSpec(kind, RBox(size / 2, size / 2, L, L * aspect, theta), 0.9)
    img = synth.rasterize([spec], size)
    if noise:
        img = img + noise * np.random.default_rng(seed).standard_normal(img.shape)
    return img, spec.rbox


class TestSsim:
    def test_identical_is_one(self, rng):
        a = rng.random((25, 50))
        assert ssim(a, a) == pytest.approx(1.0)

    @settings(max_examples=50)
    @given(st.integers(0, 1000))
    def test_symmetric(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.random((2, 10, 12))
        assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            ssim(np.zeros((2, 2)), np.zeros((2, 3)))


class TestPatches:
    def test_axis_aligned_patch_reads_pixels(self):
        img = np.arange(100.0).reshape(10, 10) / 100
        p = sample_rbox_patch(img, RBox(5, 5, 4, 4, 0.0), G=5)
        # Pixel centres sit at half-integers; the corner sample (3, 3) averages four pixels.
        assert p[0, 0] == pytest.approx(np.mean(img[2:4, 2:4]))

    def test_split_and_flip(self):
        patch = np.arange(16.0).reshape(4, 4)
        p1, p2 = split_and_flip(patch)
        np.testing.assert_array_equal(p1, patch[:2])
        np.testing.assert_array_equal(p2, patch[[3, 2]])
        with pytest.raises(InvalidArgumentError):
            split_and_flip(np.zeros((3, 3)))

    def test_invalid(self):
        with pytest.raises(InvalidArgumentError):
            sample_rbox_patch(np.zeros((0, 0)), RBox(0, 0, 1, 1))


class TestTopk:
    def test_order_and_symmetric_filter(self):
        props = [
            Proposal(RBox(0, 0, 1, 1), 0.5, 0.5),
            Proposal(RBox(0, 0, 1, 1), 0.9, 0.9, symmetric=False),
            Proposal(RBox(0, 0, 1, 1), 0.8, 0.8),
            Proposal(RBox(0, 0, 1, 1), 0.2, 0.1),
        ]
        got = topk_select(props, 2)
        assert [p.sc_cls for p in got] == [0.8, 0.5]
        assert default_topk(0) == 0 and default_topk(3) == 1 and default_topk(9) == 3

    def test_localization_score(self):
        rb = RBox(10, 10, 8, 4, 0.4)
        assert localization_score(rb, mcr(rb)) == pytest.approx(1.0)


class TestLoss:
    def test_range_and_empty(self):
        img, rb = one_shape("cross", 0.3, noise=0.05)
        val = spa_loss(img, [Proposal(rb)], k=1)
        assert 0.0 <= val <= 2.0
        assert spa_loss(img, [Proposal(rb, symmetric=False)], k=1) == 0.0

    def test_zero_on_mirror_symmetric_image(self):
        # A pattern mirrored about the box axis exactly on the sampling grid.
        G = 50
        y = np.arange(G, dtype=float)
        img = np.tile(np.abs(y - (G - 1) / 2)[:, None], (1, G)) / G
        rb = RBox(G / 2, G / 2, G - 1, G - 1, 0.0)
        assert spa_loss(img, [Proposal(rb)], k=1, G=G) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("kind", ["cross", "airplane_polygon", "rounded_rectangle"])
    def test_true_axis_beats_offsets(self, kind):
        wins = 0
        for s in range(20):
            r = np.random.default_rng(s)
            img, rb = one_shape(kind, r.uniform(-1.5, 1.5), noise=0.05, seed=s)
            base = spa_loss(img, [Proposal(rb)], k=1)
            offs = [spa_loss(img, [Proposal(RBox(rb.cx, rb.cy, rb.w, rb.h, rb.theta + math.radians(d)))], k=1) for d in (10, 20, 30)]
            wins += all(base <= o for o in offs)
        assert wins >= 18

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            theta, R = rng.uniform(-1.5, 1.5), rng.uniform(-3, 3)
            img, rb = symmetric_image(rng)
            rb = RBox(rb.cx, rb.cy, rb.w, rb.h, rb.theta + rng.uniform(-0.3, 0.3))
            spec = synth.ShapeSpec("airplane_polygon", rb, 0.9)
            a_img = synth.rasterize([spec], 96)
            turned = synth.ShapeSpec("airplane_polygon", RBox(rb.cx, rb.cy, rb.w, rb.h, rb.theta + R), 0.9)
            b_img = synth.rasterize([turned], 96)
            probe = RBox(rb.cx, rb.cy, rb.w, rb.h, theta)
            probe_r = RBox(rb.cx, rb.cy, rb.w, rb.h, theta + R)
            la = spa_loss(a_img, [Proposal(probe)], k=1)
            lb = spa_loss(b_img, [Proposal(probe_r)], k=1)
            assert abs(la - lb) < 2e-2

    def test_invalid_grid(self):
        with pytest.raises(InvalidArgumentError):
            spa_loss(np.zeros((8, 8)), [], G=7)
