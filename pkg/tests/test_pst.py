"""Adaptive embedding geometry, transformer paths, and bin-head fusion."""

import numpy as np
import pytest
import torch

from depthalign.bins import DepthRange
from depthalign.errors import ValidationError
from depthalign.pst import (
    AdaptiveEmbedding,
    AecGeometry,
    PathOutput,
    PyramidSceneTransformer,
    ScenePath,
    SelfAttention,
    TransformerEncoder,
    compute_aec_geometry,
    path_target_hw,
)


class TestAecGeometry:
    def test_halving_square(self):
        g = compute_aec_geometry(8, 8, 4, 4)
        assert (g.stride_y, g.stride_x) == (2, 2)
        assert (g.kernel_h, g.kernel_w) == (2, 2)

    def test_identity_resolution(self):
        g = compute_aec_geometry(8, 8, 8, 8)
        assert (g.stride_y, g.stride_x, g.kernel_h, g.kernel_w) == (1, 1, 1, 1)

    def test_uneven_grid(self):
        g = compute_aec_geometry(7, 10, 4, 4)
        assert (g.stride_y, g.kernel_h) == (1, 4)
        assert (g.stride_x, g.kernel_w) == (2, 4)
        # sliding-window bookkeeping: (7-4)/1+1 = 4 and (10-4)/2+1 = 4
        assert (7 - g.kernel_h) // g.stride_y + 1 == 4
        assert (10 - g.kernel_w) // g.stride_x + 1 == 4

    def test_exhaustive_window_exactness(self):
        # every admissible (in, out) pair up to 64 lands exactly on the target
        # grid and the last window ends on the last input cell (no padding,
        # no out-of-bounds reads)
        for size_in in range(1, 65):
            for size_out in range(1, size_in + 1):
                g = compute_aec_geometry(size_in, size_in, size_out, size_out)
                assert (size_in - g.kernel_h) // g.stride_y + 1 == size_out
                assert g.stride_y * (size_out - 1) + g.kernel_h == size_in
                assert g.kernel_h >= 1

    def test_rejects_upscaling(self):
        with pytest.raises(ValidationError):
            compute_aec_geometry(4, 4, 8, 4)

    def test_rejects_inconsistent_fields(self):
        with pytest.raises(ValidationError):
            AecGeometry(8, 8, 4, 4, stride_y=1, stride_x=2, kernel_h=2, kernel_w=2)


class TestAdaptiveEmbedding:
    def test_identity_geometry_is_per_pixel_projection(self):
        g = compute_aec_geometry(5, 6, 5, 6)
        emb = AdaptiveEmbedding(3, 3, g)
        with torch.no_grad():
            emb.proj.weight.zero_()
            for i in range(3):
                emb.proj.weight[i, i, 0, 0] = 1.0
            emb.proj.bias.zero_()
        x = torch.randn(2, 3, 5, 6)
        torch.testing.assert_close(emb(x), x)

    def test_embedding_count(self):
        g = compute_aec_geometry(8, 8, 4, 4)
        out = AdaptiveEmbedding(5, 7, g)(torch.randn(1, 5, 8, 8))
        assert out.shape == (1, 7, 4, 4)

    def test_uneven_grid_embedding_count(self):
        g = compute_aec_geometry(7, 10, 4, 4)
        out = AdaptiveEmbedding(2, 6, g)(torch.randn(3, 2, 7, 10))
        assert out.shape == (3, 6, 4, 4)

    def test_rejects_mismatched_input(self):
        g = compute_aec_geometry(8, 8, 4, 4)
        with pytest.raises(ValidationError):
            AdaptiveEmbedding(2, 4, g)(torch.randn(1, 2, 9, 8))


def attention_oracle(x, module):
    """Brute-force multi-head attention in numpy from the module's weights."""
    w_qkv = module.qkv.weight.detach().numpy()
    b_qkv = module.qkv.bias.detach().numpy()
    w_o = module.proj.weight.detach().numpy()
    b_o = module.proj.bias.detach().numpy()
    t, c = x.shape
    heads, hd = module.num_heads, module.head_dim
    qkv = (x @ w_qkv.T + b_qkv).reshape(t, 3, heads, hd)
    out = np.zeros((t, c))
    for h in range(heads):
        q, k, v = qkv[:, 0, h], qkv[:, 1, h], qkv[:, 2, h]
        scores = q @ k.T / np.sqrt(hd)
        scores = np.exp(scores - scores.max(axis=1, keepdims=True))
        attn = scores / scores.sum(axis=1, keepdims=True)
        out[:, h * hd : (h + 1) * hd] = attn @ v
    return out @ w_o.T + b_o


class TestTransformerEncoder:
    def test_sequence_length_conserved(self):
        enc = TransformerEncoder(dim=16, depth=2, num_heads=4)
        for t in (1, 5, 33):
            x = torch.randn(2, t, 16)
            assert enc(x).shape == (2, t, 16)

    def test_zero_weights_give_identity(self):
        enc = TransformerEncoder(dim=8, depth=3, num_heads=2)
        with torch.no_grad():
            for p in enc.parameters():
                p.zero_()
        x = torch.randn(2, 7, 8)
        torch.testing.assert_close(enc(x), x)

    def test_attention_matches_brute_force(self):
        torch.manual_seed(0)
        attn = SelfAttention(dim=8, num_heads=2).double()
        x = torch.randn(1, 5, 8, dtype=torch.float64)
        got = attn(x)[0].detach().numpy()
        want = attention_oracle(x[0].numpy(), attn)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_permutation_equivariance(self):
        torch.manual_seed(1)
        enc = TransformerEncoder(dim=12, depth=2, num_heads=3).double()
        x = torch.randn(1, 9, 12, dtype=torch.float64)
        perm = torch.randperm(9)
        torch.testing.assert_close(enc(x[:, perm]), enc(x)[:, perm])


class TestScenePath:
    def test_path_targets(self):
        assert path_target_hw(8, 10, 1) == (8, 10)
        assert path_target_hw(8, 10, 2) == (4, 5)
        assert path_target_hw(8, 10, 3) == (2, 2)

    def test_tiny_input_clamps_with_warning(self):
        with pytest.warns(UserWarning):
            assert path_target_hw(2, 3, 3) == (1, 1)

    def test_path_one_keeps_resolution_and_special_token(self):
        path = ScenePath(1, in_channels=20, input_hw=(8, 10), embed_dim=16)
        out = path(torch.randn(2, 20, 8, 10))
        assert out.grid.shape == (2, 16, 8, 10)
        assert out.special is not None and out.special.shape == (2, 16)
        assert path.pos_embed.shape == (81, 16)  # 80 grid tokens + 1 bin token

    def test_path_two_downscales_without_special(self):
        path = ScenePath(2, in_channels=20, input_hw=(8, 10), embed_dim=16)
        out = path(torch.randn(1, 20, 8, 10))
        assert out.grid.shape == (1, 16, 4, 5)
        assert out.special is None
        assert path.pos_embed.shape == (20, 16)

    def test_zero_transformer_returns_embedded_grid(self):
        path = ScenePath(1, in_channels=4, input_hw=(6, 6), embed_dim=8)
        with torch.no_grad():
            for p in path.encoder.parameters():
                p.zero_()
            path.pos_embed.zero_()
            path.special_token.zero_()
        x = torch.randn(2, 4, 6, 6)
        torch.testing.assert_close(path(x).grid, path.embed(x))

    def test_path_output_invariant(self):
        grid = torch.zeros(1, 4, 2, 2)
        with pytest.raises(ValidationError):
            PathOutput(2, grid, torch.zeros(1, 4))
        with pytest.raises(ValidationError):
            PathOutput(1, grid, None)


class TestPyramidSceneTransformer:
    def make(self, num_bins=8, hw=(8, 10), embed_dim=16):
        return PyramidSceneTransformer(
            in_channels=24,
            input_hw=hw,
            depth_range=DepthRange(0.0, 10.0),
            num_bins=num_bins,
            embed_dim=embed_dim,
        )

    def test_fused_feature_shape(self):
        pst = self.make()
        out = pst(torch.randn(2, 24, 8, 10))
        assert out.fused_feature.shape == (2, 16, 8, 10)

    def test_concatenated_channels_before_compression(self):
        pst = self.make(embed_dim=32)
        assert pst.fuse[0].in_channels == 96  # three 32-channel paths

    def test_zeroed_bin_head_gives_uniform_partition(self):
        pst = self.make(num_bins=4)
        with torch.no_grad():
            for p in pst.bin_head.parameters():
                p.zero_()
        out = pst(torch.randn(1, 24, 8, 10))
        np.testing.assert_allclose(out.widths[0].detach().numpy(), [0.25] * 4, rtol=1e-6)
        np.testing.assert_allclose(
            out.centers[0].detach().numpy(), [1.25, 3.75, 6.25, 8.75], rtol=1e-6
        )

    def test_bin_outputs_are_well_formed(self):
        torch.manual_seed(2)
        pst = self.make(num_bins=12)
        out = pst(torch.randn(3, 24, 8, 10))
        widths = out.widths.detach().numpy()
        centers = out.centers.detach().numpy()
        np.testing.assert_allclose(widths.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(widths > 0)
        assert np.all(np.diff(centers, axis=1) > 0)
        assert np.all(centers > 0.0) and np.all(centers < 10.0)
        part = out.partition(1)
        assert part.num_bins == 12

    def test_every_parameter_receives_gradient(self):
        torch.manual_seed(3)
        pst = self.make()
        out = pst(torch.randn(2, 24, 8, 10))
        (out.fused_feature.sum() + out.centers.sum()).backward()
        for name, p in pst.named_parameters():
            assert p.grad is not None, name
            assert torch.any(p.grad != 0), f"dead branch at {name}"

    def test_rejects_mismatched_grid(self):
        pst = self.make(hw=(8, 10))
        with pytest.raises(ValidationError):
            pst(torch.randn(1, 24, 8, 8))

    def test_rejects_wrong_rank(self):
        pst = self.make()
        with pytest.raises(ValidationError):
            pst(torch.randn(24, 8, 10))
