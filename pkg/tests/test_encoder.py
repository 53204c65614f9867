import numpy as np
import pytest
import torch

from conftest import assert_grads_close, finite_difference_grads
from makeupdiff.encoder import (BackboneConfig, MakeupEncoder, SelfAttentionMapper,
                                VisionBackbone, assemble_embeddings,
                                backbone_features, image_to_tensor)


class TestBackbone:
    def test_toy_shapes(self):
        cfg = BackboneConfig(patch_grid=4, embed_dim=32, n_layers=4, n_tap=4, image_size=64)
        bb = VisionBackbone(cfg)
        layers = backbone_features(torch.randn(1, 3, 64, 64), bb)
        assert len(layers) == 4
        for seq in layers:
            assert seq.shape == (1, 17, 32)

    def test_frozen_and_deterministic(self):
        cfg = BackboneConfig()
        bb = VisionBackbone(cfg, seed=1)
        assert all(not p.requires_grad for p in bb.parameters())
        x = torch.randn(2, 3, 64, 64)
        a = backbone_features(x, bb)
        b = backbone_features(x, bb)
        for s, t in zip(a, b):
            assert torch.equal(s, t)

    def test_size_mismatch_rejected(self):
        bb = VisionBackbone(BackboneConfig())
        with pytest.raises(ValueError):
            bb(torch.randn(1, 3, 32, 32))

    def test_tap_indices_last_k(self):
        cfg = BackboneConfig(patch_grid=2, embed_dim=8, n_layers=6, n_tap=3,
                             n_heads=2, image_size=16)
        assert cfg.tap_indices() == [3, 4, 5]


class TestAssemble:
    def test_full_scale_shape(self):
        # 12 layers of 257 tokens at dim 1024 -> 3084 tokens of dim 1024.
        layers = [torch.randn(1, 257, 1024) for _ in range(12)]
        out = assemble_embeddings(layers)
        assert out.shape == (1, 257 * 12, 1024)

    def test_single_layer_identity(self):
        x = torch.randn(1, 17, 32)
        assert torch.equal(assemble_embeddings([x]), x)

    def test_index_tracing(self):
        # Token i of layer k lands at index k*17 + i.
        layers = []
        for k in range(4):
            t = torch.zeros(1, 17, 32)
            for i in range(17):
                t[0, i, 0] = k * 100 + i
            layers.append(t)
        out = assemble_embeddings(layers)
        assert out.shape[1] == 68
        for k in range(4):
            for i in range(17):
                assert out[0, k * 17 + i, 0].item() == k * 100 + i

    def test_ragged_rejected(self):
        with pytest.raises(ValueError):
            assemble_embeddings([torch.randn(1, 17, 32), torch.randn(1, 16, 32)])


class TestMapper:
    def test_full_scale_shape_preserved(self):
        mapper = SelfAttentionMapper(1024, heads=8)
        x = torch.randn(1, 257 * 12, 1024)
        with torch.no_grad():
            assert mapper(x).shape == (1, 257 * 12, 1024)

    def test_zero_out_projection_is_identity(self):
        mapper = SelfAttentionMapper(32, heads=4)
        torch.nn.init.zeros_(mapper.to_out.weight)
        torch.nn.init.zeros_(mapper.to_out.bias)
        x = torch.randn(1, 10, 32)
        with torch.no_grad():
            assert torch.equal(mapper(x), x)

    def test_attention_rows_sum_to_one(self):
        mapper = SelfAttentionMapper(32, heads=4)
        with torch.no_grad():
            mapper(torch.randn(2, 12, 32))
        rows = mapper.last_attention.sum(dim=-1)
        assert torch.allclose(rows, torch.ones_like(rows), atol=1e-5)

    def test_non_finite_rejected(self):
        mapper = SelfAttentionMapper(8, heads=2)
        x = torch.full((1, 4, 8), float("nan"))
        with pytest.raises(FloatingPointError):
            mapper(x)

    def test_gradcheck_finite_differences(self):
        torch.manual_seed(0)
        mapper = SelfAttentionMapper(8, heads=2).double()
        x = torch.randn(1, 6, 8, dtype=torch.float64)
        target = torch.randn(1, 6, 8, dtype=torch.float64)
        params = [mapper.to_q.weight, mapper.to_v.weight, mapper.to_out.weight]

        def loss_fn():
            return ((mapper(x) - target) ** 2).mean()

        assert_grads_close(finite_difference_grads(loss_fn, params), rtol=1e-4)


class TestShapeLaw:
    @pytest.mark.parametrize("seed", range(5))
    def test_randomized_configs(self, seed):
        rng = np.random.default_rng(seed)
        p = int(rng.integers(2, 6))
        heads = 2
        d = int(rng.integers(2, 6)) * heads * 2
        L = int(rng.integers(2, 6))
        k = int(rng.integers(1, L + 1))
        cfg = BackboneConfig(patch_grid=p, embed_dim=d, n_layers=L, n_tap=k,
                             n_heads=heads, image_size=p * 8)
        enc = MakeupEncoder(cfg)
        out = enc(torch.randn(1, 3, p * 8, p * 8))
        assert out.shape == (1, (p * p + 1) * k, d)
        assert torch.isfinite(out).all()

    def test_k_exceeding_depth_rejected(self):
        with pytest.raises(ValueError):
            BackboneConfig(n_layers=2, n_tap=3)


def test_patch_permutation_changes_output():
    # Spatial information must survive the mapping: permuting patch tokens
    # of the assembled input changes the mapped output.
    torch.manual_seed(0)
    mapper = SelfAttentionMapper(16, heads=2)
    x = torch.randn(1, 10, 16)
    perm = torch.randperm(10)
    while torch.equal(perm, torch.arange(10)):
        perm = torch.randperm(10)
    with torch.no_grad():
        a, b = mapper(x), mapper(x[:, perm])
    assert not torch.allclose(a, b)


def test_image_to_tensor_roundtrip(face):
    t = image_to_tensor(face.image)
    assert t.shape == (1, 3, 64, 64)
    assert torch.allclose(t[0].permute(1, 2, 0), torch.as_tensor(face.image))
