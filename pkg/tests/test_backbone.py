"""Flexible patch embedding, position interpolation and the encoder."""

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from flexissl.backbone import (
    DESK,
    MINI,
    VIT_S,
    FlexiViT,
    bilinear_matrix_1d,
    encode,
    encoder_config,
    interpolate_pos_embed,
    patchify,
    pi_resize,
    plain_resize,
    resize_matrix,
)
from flexissl.errors import InvalidArgumentError
from helpers import fd_relative_error

GEOMETRIES = [(224, 8, 28), (224, 16, 14), (224, 32, 7), (96, 8, 12), (96, 16, 6), (96, 32, 3)]


def _interp_oracle(n_in, n_out):
    """Resize matrix assembled column by column from F.interpolate on basis vectors."""
    cols = []
    for j in range(n_in):
        e = torch.zeros(1, 1, n_in, dtype=torch.float64)
        e[0, 0, j] = 1.0
        cols.append(F.interpolate(e, size=n_out, mode="linear", align_corners=False)[0, 0].numpy())
    return np.stack(cols, axis=1)


class TestResizeMatrix:
    @pytest.mark.parametrize("n_in,n_out", [(16, 32), (16, 8), (2, 3), (14, 28), (14, 3)])
    def test_1d_matches_interpolate(self, n_in, n_out):
        np.testing.assert_allclose(bilinear_matrix_1d(n_in, n_out), _interp_oracle(n_in, n_out), atol=1e-12)

    def test_2d_matches_interpolate_on_images(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((16, 16))
        for p in (8, 32):
            got = (resize_matrix(16, p) @ x.ravel()).reshape(p, p)
            ref = F.interpolate(torch.from_numpy(x)[None, None], size=(p, p), mode="bilinear",
                                align_corners=False, antialias=False)[0, 0].numpy()
            np.testing.assert_allclose(got, ref, atol=1e-12)


class TestPIResize:
    def test_identity_at_base_is_same_object(self):
        w = torch.randn(4, 3, 16, 16)
        assert pi_resize(w, 16) is w

    def test_inner_product_preserved_upsizing(self):
        """<w_hat, R x> = <w, x> for 100 random pairs, to_p = 32."""
        rng = np.random.default_rng(1)
        R = resize_matrix(16, 32)
        for _ in range(100):
            w = rng.standard_normal((16, 16))
            x = rng.standard_normal((16, 16))
            w_hat = pi_resize(torch.from_numpy(w), 32).numpy()
            lhs = np.dot(w_hat.ravel(), R @ x.ravel())
            assert abs(lhs - np.dot(w.ravel(), x.ravel())) < 1e-5

    def test_downsizing_matches_least_squares(self):
        """to_p = 8: w_hat minimizes E_x (<w_hat, Rx> - <w, x>)^2 = ||R^T w_hat - w||^2 for Gaussian x."""
        rng = np.random.default_rng(2)
        R = resize_matrix(16, 8)
        for _ in range(10):
            w = rng.standard_normal(256)
            oracle, *_ = np.linalg.lstsq(R.T, w, rcond=None)
            got = pi_resize(torch.from_numpy(w.reshape(16, 16)), 8).numpy().ravel()
            np.testing.assert_allclose(got, oracle, atol=1e-5)

    def test_batched_kernel_matches_per_channel(self):
        w = torch.randn(5, 3, 16, 16, dtype=torch.float64)
        out = pi_resize(w, 32)
        assert out.shape == (5, 3, 32, 32)
        torch.testing.assert_close(out[2, 1], pi_resize(w[2, 1], 32))

    def test_unsupported_size(self):
        with pytest.raises(InvalidArgumentError):
            pi_resize(torch.zeros(16, 16), 12)
        with pytest.raises(InvalidArgumentError):
            plain_resize(torch.zeros(16, 16), 64)


class TestPositionInterpolation:
    def test_identity(self):
        g = torch.randn(14, 14, 8)
        assert torch.equal(interpolate_pos_embed(g, 14), g)

    @pytest.mark.parametrize("target", [28, 7, 12, 6, 3])
    def test_constant_stays_constant(self, target):
        g = torch.full((14, 14, 4), 0.37, dtype=torch.float64)
        out = interpolate_pos_embed(g, target)
        assert out.shape == (target, target, 4)
        torch.testing.assert_close(out, torch.full_like(out, 0.37))

    def test_closed_form_2x2_to_3x3_center(self):
        g = torch.tensor([[0.0, 1.0], [1.0, 2.0]], dtype=torch.float64).unsqueeze(-1)
        out = interpolate_pos_embed(g, 3)
        assert out[1, 1, 0].item() == pytest.approx(1.0, abs=1e-12)

    def test_bad_geometry(self):
        with pytest.raises(InvalidArgumentError):
            interpolate_pos_embed(torch.zeros(14, 14, 2), 0)


@pytest.fixture(scope="module")
def desk_model():
    torch.manual_seed(0)
    return FlexiViT(DESK).eval()


class TestEncoder:
    def test_vit_s_shape(self):
        assert (VIT_S.depth, VIT_S.heads, VIT_S.embed_dim, VIT_S.mlp_ratio) == (12, 6, 384, 4)
        assert encoder_config("desk") == DESK

    @pytest.mark.parametrize("crop,p,g", GEOMETRIES)
    def test_token_count_law(self, desk_model, crop, p, g):
        x = torch.rand(2, 3, crop, crop)
        with torch.no_grad():
            out = desk_model(x, p)
            toks = patchify(desk_model, x, p)
        assert out.patch_tokens.shape == (2, g * g, DESK.embed_dim)
        assert out.grid == (g, g) and out.patch_size == p and out.source_crop_size == crop
        assert out.grid_tokens().shape == (2, g, g, DESK.embed_dim)
        assert toks.shape == (2, g * g + 1, DESK.embed_dim)

    def test_non_divisible_crop(self, desk_model):
        with pytest.raises(InvalidArgumentError):
            desk_model(torch.rand(1, 3, 100, 100), 16)

    def test_mae_mask_keeps_quarter(self, desk_model):
        x = torch.rand(2, 3, 224, 224)
        drop = torch.zeros(2, 196, dtype=torch.bool)
        drop[0, :147] = True
        drop[1, 49:] = True
        with torch.no_grad():
            out = encode(desk_model, x, 16, drop)
        assert out.patch_tokens.shape == (2, 49, DESK.embed_dim)
        with pytest.raises(InvalidArgumentError):
            out.grid_tokens()

    def test_unequal_drop_counts_rejected(self, desk_model):
        drop = torch.zeros(2, 196, dtype=torch.bool)
        drop[0, :3] = True
        with pytest.raises(InvalidArgumentError):
            desk_model(torch.rand(2, 3, 224, 224), 16, drop_mask=drop)

    def test_deterministic(self, desk_model):
        x = torch.rand(1, 3, 96, 96)
        with torch.inference_mode():
            a, b = desk_model(x, 8), desk_model(x, 8)
        assert torch.equal(a.cls, b.cls) and torch.equal(a.patch_tokens, b.patch_tokens)

    def test_weights_shared_across_patch_sizes_without_mutation(self, desk_model):
        before = {k: v.clone() for k, v in desk_model.state_dict().items()}
        x = torch.rand(1, 3, 224, 224)
        with torch.no_grad():
            for p in (8, 16, 32):
                assert torch.isfinite(desk_model(x, p).cls).all()
        for k, v in desk_model.state_dict().items():
            assert torch.equal(v, before[k])

    def test_mask_token_replaces_masked_patches(self, desk_model):
        x = torch.rand(1, 3, 96, 96)
        mask = torch.zeros(1, 36, dtype=torch.bool)
        mask[0, 5] = True
        with torch.no_grad():
            t = desk_model.patchify(x, 16, mask)
            pos = interpolate_pos_embed(desk_model.pos_embed, 6).reshape(36, -1)
        torch.testing.assert_close(t[0, 5], desk_model.mask_token + pos[5])

    def test_patch_embedding_uses_resized_kernel(self, desk_model):
        """A 32-patch token equals <w_hat, x> + b with w_hat the PI-resized base kernel."""
        x = torch.rand(1, 3, 96, 96)
        with torch.no_grad():
            tok = desk_model.patch_embed(x, 32)[0, 0]
            w_hat = pi_resize(desk_model.patch_embed.weight, 32)
            ref = (w_hat * x[0, :, :32, :32]).sum(dim=(1, 2, 3)) + desk_model.patch_embed.bias
        torch.testing.assert_close(tok, ref, rtol=1e-5, atol=1e-5)


def test_mini_encoder_gradcheck():
    """L2 loss on CLS of the depth-2, dim-16 encoder against central finite differences."""
    torch.manual_seed(0)
    model = FlexiViT(MINI).double()
    x = torch.rand(1, 3, 96, 96, dtype=torch.float64)
    names = ["patch_embed.weight", "pos_embed", "blocks.0.attn.qkv.weight", "blocks.1.mlp.0.weight", "cls_token"]
    params = dict(model.named_parameters())

    def loss(*ps):
        return torch.func.functional_call(model, dict(zip(names, ps)), (x, 32)).cls.pow(2).sum()

    assert fd_relative_error(loss, [params[n] for n in names]) < 1e-4
