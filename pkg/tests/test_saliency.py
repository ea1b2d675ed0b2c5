"""Salience scoring, top-K query selection, reference spans, span encoding."""

import math

import numpy as np
import pytest
import torch

from helpers import assert_grad_close, fd_gradient
from vidground.errors import ConfigError
from vidground.modeling.layers import encode_span_positions
from vidground.modeling.saliency import (
    AuxSpanLayer,
    SalienceHead,
    build_guided_queries,
    select_content_queries,
)

torch.set_default_dtype(torch.float64)


class TestSalienceScores:
    def test_formula_spot_check(self):
        # w_s.x_s = 2, w_v.x_i = 3, d = 4 -> score 2*3/sqrt(4) = 3.0
        head = SalienceHead(4)
        with torch.no_grad():
            head.w_s.copy_(torch.tensor([1.0, 0, 0, 0]))
            head.w_v.copy_(torch.tensor([0, 1.0, 0, 0]))
        x_s = torch.tensor([[2.0, 0, 0, 0]])
        memory = torch.tensor([[[0, 3.0, 0, 0]]])
        with torch.no_grad():
            assert float(head(x_s, memory)) == pytest.approx(3.0, abs=1e-12)

    def test_zero_weight_zero_scores(self):
        head = SalienceHead(8)
        with torch.no_grad():
            head.w_s.zero_()
        scores = head(torch.randn(2, 8), torch.randn(2, 5, 8))
        assert torch.equal(scores, torch.zeros(2, 5))

    def test_scaling_token_scales_scores(self):
        head = SalienceHead(8)
        x_s = torch.randn(1, 8)
        memory = torch.randn(1, 6, 8)
        base = head(x_s, memory)
        scaled = head(2.5 * x_s, memory)
        assert torch.allclose(scaled, 2.5 * base, atol=1e-12)
        assert int(base.argmax()) == int(scaled.argmax())

    def test_bilinear_additivity(self):
        head = SalienceHead(8)
        x1, x2 = torch.randn(1, 8), torch.randn(1, 8)
        memory = torch.randn(1, 6, 8)
        lhs = head(x1 + x2, memory)
        rhs = head(x1, memory) + head(x2, memory)
        assert torch.allclose(lhs, rhs, atol=1e-12)
        m1, m2 = torch.randn(1, 6, 8), torch.randn(1, 6, 8)
        assert torch.allclose(head(x1, m1 + m2), head(x1, m1) + head(x1, m2),
                              atol=1e-12)


class TestSelectContentQueries:
    def test_top_k_example(self):
        memory = torch.arange(4 * 3, dtype=torch.float64).reshape(1, 4, 3)
        scores = torch.tensor([[0.1, 0.9, 0.5, 0.7]])
        content, idx, padded = select_content_queries(memory, scores, K=2)
        assert idx.tolist() == [[1, 3]]  # 0-based; clips 2 and 4 in 1-based terms
        assert not padded
        assert torch.equal(content[0, 0], memory[0, 1])

    def test_ties_break_to_lower_index(self):
        memory = torch.randn(1, 4, 3)
        scores = torch.zeros(1, 4)
        _, idx, _ = select_content_queries(memory, scores, K=2)
        assert idx.tolist() == [[0, 1]]

    def test_cycle_when_short(self):
        memory = torch.randn(1, 3, 2)
        scores = torch.tensor([[0.5, 0.9, 0.1]])
        _, idx, padded = select_content_queries(memory, scores, K=5)
        assert padded
        assert idx.tolist() == [[1, 0, 2, 1, 0]]

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            scores = torch.from_numpy(rng.standard_normal((1, 8)))
            memory = torch.randn(1, 8, 4)
            _, idx, _ = select_content_queries(memory, scores, K=3)
            _, idx2, _ = select_content_queries(memory, 3.0 * scores + 1.5, K=3)
            _, idx3, _ = select_content_queries(memory, torch.exp(scores), K=3)
            assert torch.equal(idx, idx2)
            assert torch.equal(idx, idx3)


class TestReferenceSpans:
    def test_zero_parameters_give_half(self):
        layer = AuxSpanLayer(8)
        with torch.no_grad():
            for p in layer.parameters():
                p.zero_()
        out = layer(torch.randn(1, 3, 8))
        assert torch.allclose(out, torch.full((1, 3, 2), 0.5), atol=1e-12)

    def test_open_interval(self):
        # strict interior within the float64-representable range of sigmoid;
        # saturation to exactly 0/1 needs |preactivation| beyond ~36
        layer = AuxSpanLayer(8)
        out = layer(torch.randn(1, 64, 8))
        assert (out > 0).all() and (out < 1).all()
        extreme = layer(1e3 * torch.randn(1, 16, 8))
        assert (extreme >= 0).all() and (extreme <= 1).all()

    def test_gradient_matches_fd(self):
        torch.manual_seed(0)
        layer = AuxSpanLayer(16).double()
        content = torch.randn(1, 2, 16)
        readout = torch.randn(1, 2, 2)

        def f():
            return (layer(content) * readout).sum()

        layer.zero_grad()
        f().backward()
        final_linear = layer.mlp.layers[4]
        numeric = fd_gradient(f, final_linear.weight.data)
        assert_grad_close(final_linear.weight.grad, numeric, label="span head")


class TestSpanPositionEncoding:
    def test_zero_input_pattern(self):
        out = encode_span_positions(torch.zeros(1, 2), d=16)
        quarter = 4
        for block in (out[0, :8], out[0, 8:]):
            assert torch.equal(block[:quarter], torch.zeros(quarter))
            assert torch.equal(block[quarter:], torch.ones(quarter))

    def test_first_sin_entry_quarter(self):
        out = encode_span_positions(torch.tensor([[0.25, 0.0]]), d=16)
        assert float(out[0, 0]) == pytest.approx(math.sin(math.pi / 2), abs=1e-12)

    def test_range(self):
        spans = torch.rand(100, 2)
        out = encode_span_positions(spans, d=32)
        assert float(out.min()) >= -1.0
        assert float(out.max()) <= 1.0

    def test_d_not_divisible_by_four(self):
        with pytest.raises(ConfigError):
            encode_span_positions(torch.zeros(1, 2), d=10)

    def test_injective_on_grid(self):
        # every (center, span) point on a 1e-3 grid maps to a distinct code
        step = 1e-3
        centers = torch.arange(0.0, 1.0 + step / 2, step)
        spans = torch.arange(step, 1.0 + step / 2, step)
        n_c, n_s = len(centers), len(spans)
        grid = torch.stack([
            centers.repeat_interleave(n_s),
            spans.repeat(n_c),
        ], dim=1)
        codes = encode_span_positions(grid, d=16).numpy()
        view = np.ascontiguousarray(codes).view(
            np.dtype((np.void, codes.dtype.itemsize * codes.shape[1])))
        assert len(np.unique(view)) == grid.shape[0]


class TestGuidedQueries:
    def test_build(self):
        torch.manual_seed(0)
        layer = AuxSpanLayer(16).double()
        memory = torch.randn(2, 10, 16)
        scores = torch.randn(2, 10)
        g = build_guided_queries(memory, scores, K=4, aux_span=layer)
        assert g.content.shape == (2, 4, 16)
        assert g.ref_spans.shape == (2, 4, 2)
        assert g.pos.shape == (2, 4, 16)
        assert not g.padded
