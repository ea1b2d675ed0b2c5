"""Disentangled encoder: shapes, text-order invariance, fusion, gradients."""

import numpy as np
import pytest
import torch

from helpers import assert_grad_close, check_param_gradients, fd_gradient
from vidground.errors import InputError, ShapeError
from vidground.modeling.encoder import CrossModalTower, VideoTextEncoder

torch.set_default_dtype(torch.float64)

D, HEADS, L, M = 16, 4, 6, 4


def make_encoder(dropout=0.0, L_max=64):
    torch.manual_seed(0)
    return VideoTextEncoder(d=D, heads=HEADS, tower_layers=2, encoder_layers=2,
                            ffn_dim=4 * D, dropout=dropout, d_motion=12,
                            d_semantic=10, d_text=8, L_max=L_max).double()


def make_inputs(seed=0, L_=L, M_=M, scale=1.0):
    rng = np.random.default_rng(seed)
    motion = torch.from_numpy(scale * rng.standard_normal((1, L_, 12)))
    semantic = torch.from_numpy(scale * rng.standard_normal((1, L_, 10)))
    text = torch.from_numpy(scale * rng.standard_normal((1, M_, 8)))
    return motion, semantic, text


class TestShapes:
    def test_output_shapes(self):
        enc = make_encoder()
        motion, semantic, text = make_inputs(L_=10)
        x_s, memory, fused = enc(motion, semantic, text)
        assert x_s.shape == (1, D)
        assert memory.shape == (1, 10, D)
        assert fused.shape == (1, 10, D)

    def test_various_lengths(self):
        enc = make_encoder()
        for L_, M_ in [(1, 1), (3, 7), (12, 2)]:
            motion, semantic, text = make_inputs(L_=L_, M_=M_)
            x_s, memory, _ = enc(motion, semantic, text)
            assert memory.shape == (1, L_, D)

    def test_L_max_enforced(self):
        enc = make_encoder(L_max=4)
        motion, semantic, text = make_inputs(L_=5)
        with pytest.raises(InputError):
            enc(motion, semantic, text)

    def test_empty_text_rejected(self):
        enc = make_encoder()
        motion, semantic, _ = make_inputs()
        with pytest.raises(InputError):
            enc(motion, semantic, torch.zeros(1, 0, 8))


class TestTextOrderInvariance:
    def test_permuting_words_keeps_output(self):
        enc = make_encoder()
        enc.eval()
        motion, semantic, text = make_inputs(M_=5)
        base, base_mem, _ = enc(motion, semantic, text)
        perm = torch.randperm(5, generator=torch.Generator().manual_seed(1))
        x_s, memory, _ = enc(motion, semantic, text[:, perm])
        assert torch.allclose(base, x_s, atol=1e-5)
        assert torch.allclose(base_mem, memory, atol=1e-5)

    def test_single_word_equals_duplicated_word(self):
        # softmax over one key is exactly 1, so duplicating the key is a no-op
        enc = make_encoder()
        enc.eval()
        motion, semantic, text = make_inputs(M_=1)
        single, mem1, _ = enc(motion, semantic, text)
        doubled = torch.cat([text, text], dim=1)
        dup, mem2, _ = enc(motion, semantic, doubled)
        assert torch.allclose(single, dup, atol=1e-10)
        assert torch.allclose(mem1, mem2, atol=1e-10)

    def test_padding_mask_hides_tokens(self):
        enc = make_encoder()
        enc.eval()
        motion, semantic, text = make_inputs(M_=3)
        x_s, memory, _ = enc(motion, semantic, text)
        extra = torch.cat([text, torch.full((1, 2, 8), 123.0)], dim=1)
        padding = torch.tensor([[False, False, False, True, True]])
        x_s2, memory2, _ = enc(motion, semantic, extra, padding)
        assert torch.allclose(x_s, x_s2, atol=1e-10)
        assert torch.allclose(memory, memory2, atol=1e-10)

    def test_deterministic_without_dropout(self):
        enc = make_encoder()
        enc.eval()
        motion, semantic, text = make_inputs()
        a = enc(motion, semantic, text)[0]
        b = enc(motion, semantic, text)[0]
        assert torch.equal(a, b)


class TestFuse:
    def test_identity_weights_pass_motion_half(self):
        enc = make_encoder()
        with torch.no_grad():
            enc.fuse_proj.weight.zero_()
            enc.fuse_proj.weight[:, :D] = torch.eye(D)
            enc.fuse_proj.bias.zero_()
        a = torch.randn(1, 5, D)
        b = torch.randn(1, 5, D)
        assert torch.allclose(enc.fuse(a, b), a, atol=1e-12)

    def test_single_row(self):
        enc = make_encoder()
        out = enc.fuse(torch.randn(1, 1, D), torch.randn(1, 1, D))
        assert out.shape == (1, 1, D)

    def test_row_mismatch(self):
        enc = make_encoder()
        with pytest.raises(ShapeError):
            enc.fuse(torch.randn(1, 3, D), torch.randn(1, 4, D))

    def test_fuse_weight_gradient_matches_fd(self):
        enc = make_encoder()
        a = torch.randn(1, 3, D)
        b = torch.randn(1, 3, D)
        readout = torch.randn(D)

        def f():
            return (enc.fuse(a, b) * readout).sum()

        enc.zero_grad()
        f().backward()
        numeric = fd_gradient(f, enc.fuse_proj.weight.data)
        assert_grad_close(enc.fuse_proj.weight.grad, numeric, label="fuse weight")


class TestEncode:
    def test_zero_input_rows_identical_without_positions(self):
        enc = make_encoder()
        enc.eval()
        fused = torch.zeros(1, 8, D)
        zero_pos = torch.zeros(8, D)
        x_s, memory = enc.encode(fused, clip_pos=zero_pos)
        assert torch.allclose(memory - memory[:, :1], torch.zeros_like(memory),
                              atol=1e-12)
        # and with real positions the rows do differ
        _, memory_pos = enc.encode(fused)
        assert not torch.allclose(memory_pos - memory_pos[:, :1],
                                  torch.zeros_like(memory_pos), atol=1e-6)

    def test_identical_videos_identical_outputs(self):
        enc = make_encoder()
        enc.eval()
        motion, semantic, text = make_inputs()
        double = (torch.cat([motion, motion]), torch.cat([semantic, semantic]),
                  torch.cat([text, text]))
        x_s, memory, _ = enc(*double)
        assert torch.allclose(x_s[0], x_s[1], atol=1e-12)
        assert torch.allclose(memory[0], memory[1], atol=1e-12)

    def test_bounded_inputs_finite(self):
        enc = make_encoder()
        enc.eval()
        motion, semantic, text = make_inputs(scale=1e3)
        x_s, memory, fused = enc(motion, semantic, text)
        assert torch.isfinite(x_s).all()
        assert torch.isfinite(memory).all()
        assert torch.isfinite(fused).all()


class TestEndToEndGradients:
    def test_all_parameter_groups_match_fd(self):
        enc = make_encoder()
        enc.eval()
        motion, semantic, text = make_inputs()
        readout = torch.randn(D, generator=torch.Generator().manual_seed(2))

        def f():
            x_s, memory, _ = enc(motion, semantic, text)
            return (x_s * readout).sum() + memory.sum()

        check_param_gradients(f, enc, np.random.default_rng(0))


class TestTowerBehaviour:
    def test_tower_runs_standalone(self):
        torch.manual_seed(0)
        tower = CrossModalTower(D, HEADS, 2, 4 * D, 0.0).double()
        tower.eval()
        clips = torch.randn(1, L, D)
        words = torch.randn(1, M, D)
        pos = torch.zeros(L, D)
        out = tower(clips, words, pos)
        assert out.shape == (1, L, D)
        with pytest.raises(InputError):
            tower(clips, torch.zeros(1, 0, D), pos)
