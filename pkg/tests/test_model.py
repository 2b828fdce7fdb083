import numpy as np
import pytest
import torch

from rgvp.data import EntityBox
from rgvp.losses import pad_tokenized
from rgvp.model import (
    ModelConfig,
    ModelError,
    VlmModel,
    build_model,
    patch_masks_to_tensor,
    pixels_to_tensor,
)
from rgvp.patches import full_mask, patches_for_bbox


def random_pixels(n=2, size=64, seed=0):
    rng = np.random.default_rng(seed)
    return pixels_to_tensor([rng.random((size, size, 3)).astype(np.float32) for _ in range(n)])


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ModelError):
            ModelConfig(d_model=30, n_heads=4)

    def test_positive_temperature(self):
        with pytest.raises(ModelError):
            ModelConfig(temperature=0.0)

    def test_zero_depth_rejected(self):
        with pytest.raises(ModelError):
            ModelConfig(depth_xmodal=0)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {},
            {"d_model": 16, "n_heads": 2, "depth_vision": 1, "depth_text": 3},
            {"vocab_size": 200, "n_relations": 310, "mrc_hidden": 7, "proj_dim": 5},
        ],
    )
    def test_parameter_count_closed_form(self, kwargs):
        config = ModelConfig(**kwargs)
        model = VlmModel(config)
        assert config.parameter_count() == sum(p.numel() for p in model.parameters())


class TestEncodeImage:
    def test_output_length(self, tiny_model, tiny_config):
        out = tiny_model.encode_image(random_pixels(2))
        assert out.shape == (2, 1 + tiny_config.n_patches, tiny_config.d_model)

    def test_full_mask_equals_no_mask(self, tiny_model, tiny_config):
        pixels = random_pixels(2)
        mask = patch_masks_to_tensor([full_mask(tiny_config.grid)] * 2)
        with torch.no_grad():
            a = tiny_model.encode_image(pixels)
            b = tiny_model.encode_image(pixels, mask)
        assert torch.equal(a, b)

    def test_masked_rows_invariant_to_hidden_pixels(self, tiny_model, tiny_config):
        grid = tiny_config.grid
        entity = EntityBox("e", 8, 8, 24, 24)
        mask = patches_for_bbox(grid, entity)
        mask_t = patch_masks_to_tensor([mask])
        rng = np.random.default_rng(3)
        base = rng.random((64, 64, 3)).astype(np.float32)
        noise = rng.random((64, 64, 3)).astype(np.float32)
        visible = np.zeros((64, 64), dtype=bool)
        for i in range(grid.rows):
            for j in range(grid.cols):
                if mask.patch_flags[i, j]:
                    visible[i * 8 : (i + 1) * 8, j * 8 : (j + 1) * 8] = True
        perturbed = np.where(visible[..., None], base, noise)
        with torch.no_grad():
            a = tiny_model.encode_image(pixels_to_tensor([base]), mask_t)
            b = tiny_model.encode_image(pixels_to_tensor([perturbed]), mask_t)
        allowed_rows = torch.from_numpy(mask.allowed)
        assert torch.equal(a[0][allowed_rows], b[0][allowed_rows])

    def test_shape_mismatch_errors(self, tiny_model):
        with pytest.raises(ModelError):
            tiny_model.encode_image(torch.zeros(1, 32, 32, 3))

    def test_deterministic(self, tiny_model):
        pixels = random_pixels(1)
        with torch.no_grad():
            assert torch.equal(tiny_model.encode_image(pixels), tiny_model.encode_image(pixels))


class TestEncodeText:
    def test_shape(self, tiny_model, tokenizer, tiny_config):
        ids = pad_tokenized([tokenizer.encode_caption("a red circle", 36)])
        out = tiny_model.encode_text(ids)
        assert out.shape == (1, ids.shape[1], tiny_config.d_model)

    def test_id_out_of_range(self, tiny_model, tiny_config):
        ids = torch.tensor([[tiny_config.vocab_size]])
        with pytest.raises(ModelError, match="out of range"):
            tiny_model.encode_text(ids)

    def test_too_long_rejected(self, tiny_model, tiny_config):
        ids = torch.zeros(1, tiny_config.max_text_len + 1, dtype=torch.long)
        with pytest.raises(ModelError, match="max_text_len"):
            tiny_model.encode_text(ids)

    def test_pad_append_leaves_nonpad_rows_stable(self, tiny_model, tokenizer):
        from rgvp.tokenizer import PAD_ID

        tok = tokenizer.encode_caption("a red circle above a blue square", 36)
        ids = torch.tensor([tok.ids])
        padded = torch.cat([ids, torch.full((1, 3), PAD_ID)], dim=1)
        with torch.no_grad():
            a = tiny_model.encode_text(ids)
            b = tiny_model.encode_text(padded)
        torch.testing.assert_close(a[0], b[0, : ids.shape[1]], atol=1e-6, rtol=1e-5)


class TestFuse:
    def test_pooled_is_row_zero(self, tiny_model, tokenizer):
        pixels = random_pixels(2)
        ids = pad_tokenized([tokenizer.encode_caption("a red circle", 36)] * 2)
        pair = tiny_model.forward_pair(pixels, ids)
        assert torch.equal(pair.pooled, pair.fused_tokens[:, 0])
        assert pair.pooled.shape[-1] == tiny_model.config.d_model

    def test_fused_invariant_to_hidden_pixels_through_full_stack(
        self, tiny_model, tiny_config, tokenizer
    ):
        grid = tiny_config.grid
        entity = EntityBox("red circle", 16, 16, 40, 40)
        mask = patches_for_bbox(grid, entity)
        mask_t = patch_masks_to_tensor([mask])
        rng = np.random.default_rng(4)
        base = rng.random((64, 64, 3)).astype(np.float32)
        noise = rng.random((64, 64, 3)).astype(np.float32)
        visible = np.kron(mask.patch_flags, np.ones((8, 8), dtype=bool))
        perturbed = np.where(visible[..., None], base, noise)
        ids = pad_tokenized([tokenizer.encode_caption(entity.label, 36)])
        with torch.no_grad():
            a = tiny_model.forward_pair(pixels_to_tensor([base]), ids, mask_t)
            b = tiny_model.forward_pair(pixels_to_tensor([perturbed]), ids, mask_t)
        assert torch.equal(a.pooled, b.pooled)
        assert torch.equal(a.fused_tokens, b.fused_tokens)

    def test_dim_mismatch_errors(self, tiny_model):
        with pytest.raises(ModelError):
            tiny_model.fuse(torch.zeros(1, 5, 16), torch.zeros(1, 4, 32))


class TestHeads:
    def test_itm_logits_length_two(self, tiny_model):
        assert tiny_model.itm_logits(torch.zeros(3, 32)).shape == (3, 2)

    def test_mlm_logits_shape(self, tiny_model, tiny_config):
        out = tiny_model.mlm_logits(torch.zeros(2, 7, 32))
        assert out.shape == (2, 7, tiny_config.vocab_size)

    def test_bbox_outputs_in_open_unit_interval(self, tiny_model):
        out = tiny_model.bbox_predict(torch.randn(5, 32))
        assert ((out > 0) & (out < 1)).all()

    def test_mrc_output_space(self, tiny_model, tiny_config):
        out = tiny_model.mrc_logits(torch.zeros(2, 32), torch.zeros(2, 32))
        assert out.shape == (2, tiny_config.n_relations + 1)

    def test_mrc_paper_scale_output_space(self):
        config = ModelConfig(d_model=16, n_heads=2, n_relations=310)
        model = VlmModel(config)
        out = model.mrc_logits(torch.zeros(1, 16), torch.zeros(1, 16))
        assert out.shape == (1, 311)

    def test_contrastive_embed_unit_norm(self, tiny_model):
        vec = torch.randn(4, 32)
        for side in ("image", "text"):
            out = tiny_model.contrastive_embed(vec, side)
            torch.testing.assert_close(
                out.norm(dim=-1), torch.ones(4), atol=1e-6, rtol=0
            )

    def test_contrastive_embed_scale_invariant_direction(self, tiny_model):
        vec = torch.randn(3, 32)
        a = tiny_model.contrastive_embed(vec, "image")
        b = tiny_model.contrastive_embed(2 * vec, "image")
        torch.testing.assert_close(a, b, atol=1e-6, rtol=1e-5)

    def test_contrastive_dims_match(self, tiny_model):
        vec = torch.randn(2, 32)
        img = tiny_model.contrastive_embed(vec, "image")
        txt = tiny_model.contrastive_embed(vec, "text")
        assert img.shape == txt.shape

    def test_zero_vector_rejected(self, tiny_model):
        with torch.no_grad():
            tiny_model.vision_proj.weight.zero_()
            tiny_model.vision_proj.bias.zero_()
        with pytest.raises(ModelError, match="zero vector"):
            tiny_model.contrastive_embed(torch.randn(2, 32), "image")

    def test_unknown_side_rejected(self, tiny_model):
        with pytest.raises(ModelError):
            tiny_model.contrastive_embed(torch.randn(1, 32), "fused")


class TestBuild:
    def test_seeded_build_reproducible(self, tiny_config):
        a = build_model(tiny_config, seed=5)
        b = build_model(tiny_config, seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_high_precision_mode(self, tiny_config):
        model = build_model(tiny_config, seed=0, dtype=torch.float64)
        assert all(p.dtype == torch.float64 for p in model.parameters())
