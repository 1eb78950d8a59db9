import math

import numpy as np
import pytest
import torch

from core.config import EncoderConfig
from modules.model import DTYPE, TagsModel, build_model, forward_numpy, init_parameters


class TestTagsModel:

    def test_output_shapes(self, rng, small_encoder):
        model = build_model(8, 3, 16, small_encoder, seed=1)
        outputs = model(torch.from_numpy(rng.standard_normal((16, 8))))
        assert [o.scale for o in outputs] == [1, 2]
        for out, length in zip(outputs, (16, 8)):
            assert tuple(out.P.shape) == (4, length)
            assert tuple(out.R.shape) == (4, length)
            assert tuple(out.M.shape) == (length, length)
            assert tuple(out.E.shape) == (length, 8)
            assert out.P.dtype == DTYPE
            out.check()

    def test_structural_invariants_over_random_inputs(self, rng):
        for i in range(30):
            T = int(rng.integers(2, 20))
            config = EncoderConfig(scales=(1, 2, 4), num_heads=2)
            model = build_model(4, 2, T, config, seed=i)
            with torch.no_grad():
                outputs = model(torch.from_numpy(rng.standard_normal((T, 4)) * 3))
            for out in outputs:
                out.check(atol=1e-12)

    def test_projection_width(self, rng):
        model = build_model(8, 3, 16, EncoderConfig(scales=(1,), num_heads=2, consistency_dim=5), seed=1)
        E_p, E_m = model.projections(torch.from_numpy(rng.standard_normal((16, 8))))
        assert E_p.shape == (16, 5) and E_m.shape == (16, 5)

    def test_wrong_feature_shape(self, small_encoder):
        model = TagsModel(8, 3, 16, small_encoder)
        with pytest.raises(ValueError):
            model(torch.ones(15, 8))

    def test_named_tensors_are_unique_and_ordered(self, small_encoder):
        model = TagsModel(8, 3, 16, small_encoder)
        names = list(model.named_tensors())
        assert len(names) == len(set(names))
        assert names == [n for n, _ in model.named_parameters()]
        assert any(n.startswith("mask_heads.s2.") for n in names)


class TestInitialisation:

    def test_seeded_initialisation_is_reproducible(self, small_encoder):
        a = build_model(8, 3, 16, small_encoder, seed=5).named_tensors()
        b = build_model(8, 3, 16, small_encoder, seed=5).named_tensors()
        c = build_model(8, 3, 16, small_encoder, seed=6).named_tensors()
        assert all(torch.equal(a[n], b[n]) for n in a)
        assert not all(torch.equal(a[n], c[n]) for n in a)

    def test_glorot_bounds(self, small_encoder):
        model = build_model(8, 3, 16, small_encoder, seed=2)
        for name, param in model.named_tensors().items():
            if name.endswith("bias"):
                assert not param.any(), name
            elif ".norm_" in name:
                continue
            elif param.dim() == 3:
                bound = math.sqrt(6.0 / ((param.shape[0] + param.shape[1]) * param.shape[2]))
                assert float(param.abs().max()) <= bound, name
            elif param.dim() == 2:
                bound = math.sqrt(6.0 / (param.shape[0] + param.shape[1]))
                assert float(param.abs().max()) <= bound, name

    def test_layer_norm_starts_as_identity_affine(self, small_encoder):
        model = init_parameters(TagsModel(8, 3, 16, small_encoder), torch.Generator().manual_seed(0))
        norm = model.encoder.blocks["s1"].norm_attn
        assert torch.equal(norm.weight, torch.ones(8)) and torch.equal(norm.bias, torch.zeros(8))


def test_forward_numpy(rng, small_encoder):
    model = build_model(8, 3, 16, small_encoder, seed=1)
    out = forward_numpy(model, rng.standard_normal((16, 8)).astype(np.float32))
    assert sorted(out) == [1, 2]
    assert out[2]["M"].shape == (8, 8)
    np.testing.assert_allclose(out[1]["P"].sum(axis=0), 1.0, atol=1e-12)
