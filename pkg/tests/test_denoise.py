"""Moment perturbation: magnitudes, scale ranges, clamping, determinism."""

import numpy as np
import pytest

from vidground.errors import ValidationError
from vidground.features import MomentSpan
from vidground.metrics import iou_1d
from vidground.modeling.denoise import NoiseConfig, NoiseDraw, apply_noise, perturb_moments

CLIP_W = 1 / 32


class TestApplyNoise:
    def test_magnitude_spot_check(self):
        # s = 0.4, delta2 = 1, lam = 0.5 -> |dc| = |ds| = 0.1
        span = MomentSpan(0.5, 0.4)
        draw = NoiseDraw(lam=0.5, sign_center=1.0, sign_span=1.0)
        out = apply_noise(span, draw, delta2=1.0, clip_width=CLIP_W)
        assert out.center == pytest.approx(0.6, abs=1e-12)
        assert out.span == pytest.approx(0.5, abs=1e-12)

    def test_signs_apply_independently(self):
        span = MomentSpan(0.5, 0.4)
        out = apply_noise(span, NoiseDraw(0.5, -1.0, 1.0), 1.0, CLIP_W)
        assert out.center == pytest.approx(0.4, abs=1e-12)
        assert out.span == pytest.approx(0.5, abs=1e-12)

    def test_zero_delta_identity(self):
        span = MomentSpan(0.37, 0.21)
        out = apply_noise(span, NoiseDraw(0.9, 1.0, -1.0), delta2=1e-300,
                          clip_width=CLIP_W)
        assert out.center == span.center
        assert out.span == span.span

    def test_span_floor(self):
        span = MomentSpan(0.5, CLIP_W * 1.5)
        out = apply_noise(span, NoiseDraw(1.0, 1.0, -1.0), 1.0, CLIP_W)
        assert out.span >= CLIP_W


class TestPerturbMoments:
    def test_positive_and_negative_scale_ranges(self):
        rng = np.random.default_rng(0)
        cfg = NoiseConfig(delta2=1.0)
        m = [MomentSpan(0.5, 0.3)]
        for _ in range(300):
            _, draws = perturb_moments(m, "pos", cfg, rng, CLIP_W)
            assert 0.0 <= draws[0].lam <= 1.0
            _, draws = perturb_moments(m, "neg", cfg, rng, CLIP_W)
            assert 1.0 <= draws[0].lam <= 2.0

    def test_empty_input(self):
        noised, draws = perturb_moments([], "pos", NoiseConfig(),
                                        np.random.default_rng(0), CLIP_W)
        assert noised == [] and draws == []

    def test_deterministic_given_stream(self):
        cfg = NoiseConfig()
        m = [MomentSpan(0.4, 0.3), MomentSpan(0.8, 0.2)]
        a, da = perturb_moments(m, "pos", cfg, np.random.default_rng(7), CLIP_W)
        b, db = perturb_moments(m, "pos", cfg, np.random.default_rng(7), CLIP_W)
        assert a == b and da == db

    def test_positive_overlap_invariant(self):
        # delta2 <= 1, positive polarity: noised span always overlaps the GT
        rng = np.random.default_rng(1)
        cfg = NoiseConfig(delta2=1.0)
        for _ in range(10_000):
            center = rng.uniform(0.1, 0.9)
            width = rng.uniform(CLIP_W, min(2 * center, 2 * (1 - center), 0.8))
            m = MomentSpan(center, width)
            noised, _ = perturb_moments([m], "pos", cfg, rng, CLIP_W)
            assert iou_1d(noised[0], m) > 0

    def test_clamped_outputs_valid(self):
        rng = np.random.default_rng(2)
        cfg = NoiseConfig(delta2=1.0)
        for _ in range(2000):
            center = rng.uniform(0.05, 0.95)
            width = rng.uniform(CLIP_W, min(2 * center, 2 * (1 - center)))
            noised, _ = perturb_moments([MomentSpan(center, width)], "neg",
                                        cfg, rng, CLIP_W)
            start, end = noised[0].to_start_end()
            assert -1e-9 <= start <= end <= 1 + 1e-9
            assert noised[0].span >= CLIP_W - 1e-12

    def test_bad_polarity(self):
        with pytest.raises(ValidationError):
            perturb_moments([MomentSpan(0.5, 0.2)], "maybe", NoiseConfig(),
                            np.random.default_rng(0), CLIP_W)


def test_noise_config_invariants():
    with pytest.raises(ValidationError):
        NoiseConfig(delta2=0.0)
    with pytest.raises(ValidationError):
        NoiseConfig(pos_replicas=-1)
