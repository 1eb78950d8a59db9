import math

import numpy as np
import pytest
import torch

from modules.encoder import (
    AttentionHead,
    MultiScaleEncoder,
    PoolingConfig,
    attention_head,
    pool_to_scale,
    scale_length,
    sinusoid_table,
    temporal_pool,
)


def _naive_pool(x, k, stride, p):
    padded = np.concatenate([np.zeros((p, x.shape[1])), x, np.zeros((p, x.shape[1]))])
    n = (x.shape[0] + 2 * p - k) // stride + 1
    return np.stack([padded[i * stride:i * stride + k].mean(axis=0) for i in range(n)])


def _naive_attention(x, w_q, w_k, w_v):
    q, k, v = x @ w_q, x @ w_k, x @ w_v
    T, d = q.shape
    out = np.array(x, dtype=np.float64)
    for i in range(T):
        logits = [sum(q[i, c] * k[j, c] for c in range(d)) / math.sqrt(d) for j in range(T)]
        top = max(logits)
        weights = [math.exp(l - top) for l in logits]
        total = sum(weights)
        for j in range(T):
            out[i] += weights[j] / total * v[j]
    return out


class TestTemporalPool:

    def test_two_window_average(self):
        x = torch.tensor([[1.0], [2.0], [3.0], [4.0]])
        np.testing.assert_array_equal(temporal_pool(x, 2, 2, 0).numpy(), [[1.5], [3.5]])

    def test_unit_kernel_is_identity(self, rng):
        x = torch.from_numpy(rng.standard_normal((9, 4)))
        assert torch.equal(temporal_pool(x, 1, 1, 0), x)

    def test_matches_windowed_mean(self, rng):
        x = rng.standard_normal((17, 5))
        out = temporal_pool(torch.from_numpy(x), 3, 2, 1).numpy()
        np.testing.assert_allclose(out, _naive_pool(x, 3, 2, 1), atol=1e-12)

    def test_random_configurations(self, rng):
        for _ in range(100):
            T, dim = rng.integers(1, 20), rng.integers(1, 5)
            k, stride, p = rng.integers(1, 5), rng.integers(1, 4), rng.integers(0, 3)
            if (T + 2 * p - k) // stride + 1 < 1:
                continue
            x = rng.standard_normal((T, dim))
            np.testing.assert_allclose(temporal_pool(torch.from_numpy(x), int(k), int(stride), int(p)).numpy(),
                                       _naive_pool(x, k, stride, p), atol=1e-12)

    def test_empty_output_rejected(self):
        with pytest.raises(ValueError):
            temporal_pool(torch.ones(2, 3), 5, 1, 0)

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            PoolingConfig(0, 1).validate()


class TestPoolToScale:

    @pytest.mark.parametrize("T,scale,expected", [(100, 1, 100), (100, 2, 50), (101, 2, 51), (10, 4, 3)])
    def test_lengths(self, T, scale, expected):
        assert scale_length(T, scale) == expected
        assert pool_to_scale(torch.ones(T, 3), scale).shape == (expected, 3)

    def test_tail_repeats_last_snippet(self):
        x = torch.tensor([[1.0], [2.0], [3.0]])
        np.testing.assert_array_equal(pool_to_scale(x, 2).numpy(), [[1.5], [3.0]])

    @pytest.mark.parametrize("scale,pooling", [
        (1, PoolingConfig(2, 2, 0)),
        (2, PoolingConfig(2, 1, 0)),
        (2, PoolingConfig(4, 2, 0)),
        (2, PoolingConfig(2, 2, 1)),
    ])
    def test_pooling_must_step_by_the_scale(self, scale, pooling):
        with pytest.raises(ValueError):
            pool_to_scale(torch.arange(6.0)[:, None], scale, pooling)

    def test_padded_pooling_keeps_snippet_order(self):
        x = torch.arange(6.0)[:, None]
        out = pool_to_scale(x, 2, PoolingConfig(3, 2, 1)).numpy()[:, 0]
        np.testing.assert_allclose(out, [1 / 3, 2.0, 4.0])

    def test_encoder_rejects_mismatched_pooling(self):
        with pytest.raises(ValueError):
            MultiScaleEncoder(in_dim=4, width=4, num_heads=2, scales=(1, 2), pooling={2: PoolingConfig(2, 1, 0)})


class TestAttention:

    def test_single_snippet_doubles(self, rng):
        f = torch.from_numpy(rng.standard_normal((1, 4)))
        eye = torch.eye(4)
        np.testing.assert_allclose(attention_head(f, eye, eye, eye).numpy(), 2 * f.numpy(), atol=1e-12)

    def test_identical_snippets(self, rng):
        row = rng.standard_normal(4)
        f = torch.from_numpy(np.stack([row, row]))
        eye = torch.eye(4)
        out, weights = attention_head(f, eye, eye, eye, return_weights=True)
        np.testing.assert_allclose(weights.numpy(), 0.5, atol=1e-12)
        np.testing.assert_allclose(out.numpy(), 2 * f.numpy(), atol=1e-12)

    def test_matches_three_loop_oracle(self, rng):
        x = rng.standard_normal((6, 4))
        w = [rng.standard_normal((4, 4)) for _ in range(3)]
        out = attention_head(torch.from_numpy(x), *map(torch.from_numpy, w)).numpy()
        np.testing.assert_allclose(out, _naive_attention(x, *w), atol=1e-6)

    def test_rows_of_weights_sum_to_one(self, rng):
        x = torch.from_numpy(rng.standard_normal((7, 3)))
        w = [torch.from_numpy(rng.standard_normal((3, 3))) for _ in range(3)]
        _, weights = attention_head(x, *w, return_weights=True)
        np.testing.assert_allclose(weights.sum(dim=1).numpy(), 1.0, atol=1e-12)
        assert bool((weights >= 0).all())

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            attention_head(torch.ones(3, 4), torch.ones(5, 2), torch.ones(5, 2), torch.ones(5, 2))

    def test_gradients(self, rng):
        x = torch.from_numpy(rng.standard_normal((5, 3))).requires_grad_()
        w = [torch.from_numpy(rng.standard_normal((3, 3))).requires_grad_() for _ in range(3)]
        assert torch.autograd.gradcheck(lambda *a: attention_head(*a), (x, *w))

    def test_pooled_gradients(self, rng):
        x = torch.from_numpy(rng.standard_normal((7, 3))).requires_grad_()
        w = [torch.from_numpy(rng.standard_normal((3, 2))).requires_grad_() for _ in range(3)]
        residual = torch.from_numpy(rng.standard_normal((4, 2)))
        assert torch.autograd.gradcheck(
            lambda *a: attention_head(*a, scale=2, residual=residual), (x, *w))


class TestMultiScaleEncoder:

    def test_embedding_lengths(self, rng):
        encoder = MultiScaleEncoder(in_dim=6, width=8, num_heads=2, scales=(1, 2))
        out = encoder(torch.from_numpy(rng.standard_normal((100, 6))))
        assert {s: tuple(e.shape) for s, e in out.items()} == {1: (100, 8), 2: (50, 8)}

    def test_zero_mlp_leaves_attention_output(self, rng):
        encoder = MultiScaleEncoder(in_dim=4, width=4, num_heads=2, scales=(2,))
        block = encoder.blocks["s2"]
        with torch.no_grad():
            block.mlp.weight.zero_()
            block.mlp.bias.zero_()
        f = torch.from_numpy(rng.standard_normal((9, 4)))
        x = pool_to_scale(f, 2)
        normed = block.norm_attn(x)
        expected = torch.cat([head(normed, x[:, 2 * i:2 * (i + 1)]) for i, head in enumerate(block.heads)], dim=1)
        np.testing.assert_allclose(encoder(f)[2].detach().numpy(), expected.detach().numpy(), atol=1e-12)

    def test_input_projection_when_widths_differ(self, rng):
        encoder = MultiScaleEncoder(in_dim=5, width=4, num_heads=2, scales=(1,))
        assert isinstance(encoder.blocks["s1"].input_proj, torch.nn.Linear)
        assert encoder(torch.from_numpy(rng.standard_normal((3, 5))))[1].shape == (3, 4)

    @pytest.mark.parametrize("scales", [(), (3,), (1, 1)])
    def test_scale_set_rejected(self, scales):
        with pytest.raises(ValueError):
            MultiScaleEncoder(in_dim=4, width=4, num_heads=2, scales=scales)

    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError):
            MultiScaleEncoder(in_dim=4, width=6, num_heads=4)

    def test_feature_dimension_checked(self):
        encoder = MultiScaleEncoder(in_dim=4, width=4, num_heads=2)
        with pytest.raises(ValueError):
            encoder(torch.ones(5, 3))

    def test_head_parameters_initialised(self):
        head = AttentionHead(6, 3)
        bound = math.sqrt(6 / 9)
        for w in (head.w_q, head.w_k, head.w_v):
            assert torch.isfinite(w).all()
            assert float(w.abs().max()) <= bound


class TestPositions:

    def test_table_layout(self):
        table = sinusoid_table(5, 6)
        assert table.shape == (5, 6) and table.dtype == torch.float64
        np.testing.assert_allclose(table[0].numpy(), [0, 1, 0, 1, 0, 1], atol=1e-12)
        np.testing.assert_allclose(table[3, 0].item(), math.sin(3.0), atol=1e-12)
        np.testing.assert_allclose(table[3, 1].item(), math.cos(3.0), atol=1e-12)

    def test_odd_width(self):
        assert sinusoid_table(4, 5).shape == (4, 5)

    def test_without_positions_reordering_snippets_reorders_output(self, rng):
        torch.manual_seed(0)
        encoder = MultiScaleEncoder(in_dim=4, width=4, num_heads=2, scales=(1,)).double()
        x = torch.from_numpy(rng.standard_normal((6, 4)))
        order = torch.tensor([3, 0, 5, 1, 4, 2])
        with torch.no_grad():
            np.testing.assert_allclose(encoder(x[order])[1].numpy(), encoder(x)[1][order].numpy(), atol=1e-10)

    def test_positions_tell_snippets_apart(self, rng):
        torch.manual_seed(0)
        encoder = MultiScaleEncoder(in_dim=4, width=4, num_heads=2, scales=(1,), positional=True).double()
        row = torch.from_numpy(rng.standard_normal(4))
        with torch.no_grad():
            out = encoder(row.expand(5, 4).clone())[1]
        assert not torch.allclose(out[0], out[3])
