import math
import random

import numpy as np
import pytest
import torch

from rgvp.data import EntityBox, build_relation_vocab
from rgvp.losses import (
    IGNORE_INDEX,
    LossError,
    albef_losses,
    generalized_iou,
    itm_loss_from_pooled,
    loss_bbox,
    loss_cl,
    loss_itm,
    loss_mlm,
    loss_mrc,
    loss_vma,
    mask_token_batch,
    pad_tokenized,
    sample_itm_negatives,
)
from rgvp.model import pixels_to_tensor
from rgvp.tokenizer import PAD_ID


def unit_rows(n, dim):
    out = torch.zeros(n, dim)
    for i in range(n):
        out[i, i] = 1.0
    return out


class TestContrastive:
    def test_orthonormal_pair_closed_form(self):
        e = unit_rows(2, 8)
        loss = loss_cl(e, e, temperature=1.0)
        assert math.isclose(float(loss), math.log(1 + math.exp(-1)), rel_tol=1e-6)

    def test_permutation_invariance(self):
        torch.manual_seed(0)
        img = torch.nn.functional.normalize(torch.randn(5, 8), dim=-1)
        txt = torch.nn.functional.normalize(torch.randn(5, 8), dim=-1)
        perm = torch.randperm(5)
        a = loss_cl(img, txt, 0.5)
        b = loss_cl(img[perm], txt[perm], 0.5)
        torch.testing.assert_close(a, b)

    def test_uniform_similarities_give_log_n(self):
        e = torch.nn.functional.normalize(torch.ones(4, 8), dim=-1)
        loss = loss_cl(e, e, temperature=1.0)
        assert math.isclose(float(loss), math.log(4), rel_tol=1e-6)

    def test_nonnegative(self):
        torch.manual_seed(1)
        img = torch.nn.functional.normalize(torch.randn(6, 8), dim=-1)
        txt = torch.nn.functional.normalize(torch.randn(6, 8), dim=-1)
        assert float(loss_cl(img, txt, 0.07)) >= 0

    def test_single_pair_rejected(self):
        e = unit_rows(1, 4)
        with pytest.raises(LossError, match="N >= 2"):
            loss_cl(e, e, 1.0)


class _StubHead:
    """Duck-typed stand-in exposing itm_logits for pure math checks."""

    def __init__(self, fn):
        self.itm_logits = fn


class TestItm:
    def test_confident_correct_approaches_zero(self):
        labels = torch.tensor([1, 0, 1, 0])
        big = 50.0
        logits = torch.stack([torch.tensor([-big, big]) if y else torch.tensor([big, -big]) for y in labels])
        stub = _StubHead(lambda pooled: logits)
        loss = itm_loss_from_pooled(stub, torch.zeros(4, 2), labels)
        assert float(loss) < 1e-6

    def test_uniform_logits_give_log_two(self):
        labels = torch.tensor([1, 0, 0])
        stub = _StubHead(lambda pooled: torch.zeros(3, 2))
        loss = itm_loss_from_pooled(stub, torch.zeros(3, 2), labels)
        assert math.isclose(float(loss), math.log(2), rel_tol=1e-6)

    def test_single_class_batch_rejected(self):
        stub = _StubHead(lambda pooled: torch.zeros(2, 2))
        with pytest.raises(LossError, match="both"):
            itm_loss_from_pooled(stub, torch.zeros(2, 2), torch.tensor([1, 1]))

    def test_loss_itm_end_to_end(self, tiny_model, tokenizer, corpus):
        pixels = pixels_to_tensor([corpus[0].pixels, corpus[1].pixels])
        toks = [tokenizer.encode_caption(r.captions[0], 36) for r in corpus[:2]]
        loss = loss_itm(tiny_model, pixels, toks, [1, 0])
        assert float(loss) > 0 and math.isfinite(float(loss))

    def test_hard_negative_sampling_reproducible(self):
        torch.manual_seed(0)
        sims = torch.randn(6, 6)
        a = sample_itm_negatives(sims, torch.Generator().manual_seed(9), hard=True)
        b = sample_itm_negatives(sims, torch.Generator().manual_seed(9), hard=True)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_negatives_never_diagonal(self):
        sims = torch.randn(8, 8)
        gen = torch.Generator().manual_seed(1)
        for hard in (True, False):
            neg_t, neg_i = sample_itm_negatives(sims, gen, hard=hard)
            assert (neg_t != torch.arange(8)).all()
            assert (neg_i != torch.arange(8)).all()


class TestMlm:
    def test_uniform_logits_give_log_vocab(self, tiny_model, tokenizer, corpus):
        with torch.no_grad():
            tiny_model.mlm_head.weight.zero_()
            tiny_model.mlm_head.bias.zero_()
        toks = [tokenizer.encode_caption(corpus[0].captions[0], 36)]
        masked, targets = mask_token_batch(toks, 0.25, random.Random(0))
        pixels = pixels_to_tensor([corpus[0].pixels])
        loss = loss_mlm(tiny_model, pixels, masked, targets)
        assert math.isclose(float(loss), math.log(tokenizer.vocab_size), rel_tol=1e-5)

    def test_one_hot_logits_give_zero(self, tiny_model, tokenizer, corpus):
        toks = [tokenizer.encode_caption(corpus[0].captions[0], 36)]
        masked, targets = mask_token_batch(toks, 0.25, random.Random(0))
        pixels = pixels_to_tensor([corpus[0].pixels])
        big = 1000.0

        def oracle_logits(fused):
            logits = torch.zeros(*fused.shape[:2], tiny_model.config.vocab_size)
            for b in range(targets.shape[0]):
                for pos in range(targets.shape[1]):
                    if targets[b, pos] != IGNORE_INDEX:
                        logits[b, pos, targets[b, pos]] = big
            return logits

        original = tiny_model.mlm_logits
        tiny_model.mlm_logits = oracle_logits
        try:
            loss = loss_mlm(tiny_model, pixels, masked, targets)
        finally:
            tiny_model.mlm_logits = original
        assert float(loss) < 1e-6

    def test_zero_masked_positions_rejected(self, tiny_model, tokenizer, corpus):
        toks = [tokenizer.encode_caption(corpus[0].captions[0], 36)]
        ids = pad_tokenized(toks)
        targets = torch.full_like(ids, IGNORE_INDEX)
        with pytest.raises(LossError, match="masked position"):
            loss_mlm(tiny_model, pixels_to_tensor([corpus[0].pixels]), ids, targets)


def whole_image_entities(records, as_caption=True):
    ents = []
    for r in records:
        label = r.captions[0] if as_caption else r.entities[0].label
        ents.append(EntityBox(label, 0, 0, r.width, r.height))
    return ents


class TestVma:
    def test_full_image_mask_equals_caption_loss(self, tiny_model, tokenizer, corpus):
        records = corpus[:4]
        pixels = pixels_to_tensor([r.pixels for r in records])
        entities = whole_image_entities(records)
        vma = loss_vma(
            tiny_model, pixels, entities, tokenizer,
            rng=random.Random(7), generator=torch.Generator().manual_seed(7),
        )
        toks = [tokenizer.encode_caption(e.label, 36) for e in entities]
        plain = albef_losses(
            tiny_model, pixels, toks,
            rng=random.Random(7), generator=torch.Generator().manual_seed(7),
        )
        for key in ("cl", "itm", "mlm"):
            assert torch.equal(vma[key], plain[key]), key

    def test_invariant_to_pixels_outside_entity_patches(self, tiny_model, tokenizer, corpus):
        records = corpus[:3]
        entities = [r.entities[0] for r in records]
        from rgvp.patches import patches_for_bbox

        grid = tiny_model.config.grid
        rng = np.random.default_rng(0)
        base = [r.pixels for r in records]
        perturbed = []
        for pix, e in zip(base, entities):
            flags = patches_for_bbox(grid, e).patch_flags
            visible = np.kron(flags, np.ones((8, 8), dtype=bool))
            perturbed.append(
                np.where(visible[..., None], pix, rng.random(pix.shape).astype(np.float32))
            )
        a = loss_vma(
            tiny_model, pixels_to_tensor(base), entities, tokenizer,
            rng=random.Random(3), generator=torch.Generator().manual_seed(3),
        )
        b = loss_vma(
            tiny_model, pixels_to_tensor(perturbed), entities, tokenizer,
            rng=random.Random(3), generator=torch.Generator().manual_seed(3),
        )
        for key in ("cl", "itm", "mlm", "vma"):
            assert torch.equal(a[key], b[key]), key

    def test_single_patch_entity_finite(self, tiny_model, tokenizer, corpus):
        records = corpus[:2]
        entities = [EntityBox("red circle", 0, 0, 8, 8), EntityBox("blue square", 0, 0, 8, 8)]
        out = loss_vma(
            tiny_model, pixels_to_tensor([r.pixels for r in records]), entities, tokenizer,
            rng=random.Random(1), generator=torch.Generator().manual_seed(1),
        )
        assert math.isfinite(float(out["vma"]))


class TestMrc:
    def test_uniform_logits_give_log_classes(self, tiny_model, tokenizer, corpus):
        vocab = build_relation_vocab(corpus, tiny_model.config.n_relations)
        with torch.no_grad():
            tiny_model.mrc_fc2.weight.zero_()
            tiny_model.mrc_fc2.bias.zero_()
        r = corpus[0]
        t = r.triplets[0]
        loss = loss_mrc(
            tiny_model,
            pixels_to_tensor([r.pixels]),
            [r.entities[t.subject]],
            [r.entities[t.object]],
            [t.relation],
            vocab,
            tokenizer,
        )
        expected = math.log(tiny_model.config.n_relations + 1)
        assert math.isclose(float(loss), expected, rel_tol=1e-5)

    def test_out_of_vocab_relation_maps_to_reserved_class(self, tiny_model, tokenizer, corpus):
        vocab = build_relation_vocab(corpus, tiny_model.config.n_relations)
        r = corpus[0]
        t = r.triplets[0]
        loss = loss_mrc(
            tiny_model,
            pixels_to_tensor([r.pixels]),
            [r.entities[t.subject]],
            [r.entities[t.object]],
            ["never seen relation"],
            vocab,
            tokenizer,
        )
        assert math.isfinite(float(loss))


class TestBbox:
    def test_exact_match_is_zero(self):
        target = torch.tensor([[0.1, 0.2, 0.6, 0.9]])
        assert float(loss_bbox(target.clone(), target)) == 0.0

    def test_disjoint_boxes_hand_computed(self):
        a = torch.tensor([[0.0, 0.0, 0.2, 0.2]])
        b = torch.tensor([[0.8, 0.8, 1.0, 1.0]])
        giou = generalized_iou(a, b)
        # iou 0; union 0.08; enclosure 1.0 -> giou = -(1 - 0.08) = -0.92
        torch.testing.assert_close(giou, torch.tensor([-0.92]))
        loss = loss_bbox(a, b)
        smooth = 0.5 * 0.8**2  # same delta on all 4 coords
        assert math.isclose(float(loss), smooth + 1.92, rel_tol=1e-6)
        assert float(loss) - smooth > 1.0  # the GIoU term alone exceeds 1

    def test_axis_swap_symmetry(self):
        pred = torch.tensor([[0.1, 0.3, 0.5, 0.6]])
        target = torch.tensor([[0.2, 0.25, 0.7, 0.8]])
        swap = [1, 0, 3, 2]
        a = loss_bbox(pred, target)
        b = loss_bbox(pred[:, swap], target[:, swap])
        torch.testing.assert_close(a, b)

    def test_degenerate_target_rejected(self):
        pred = torch.tensor([[0.1, 0.1, 0.2, 0.2]])
        with pytest.raises(LossError, match="degenerate"):
            loss_bbox(pred, torch.tensor([[0.5, 0.5, 0.5, 0.9]]))

    def test_unnormalized_target_rejected(self):
        pred = torch.tensor([[0.1, 0.1, 0.2, 0.2]])
        with pytest.raises(LossError, match="normalized"):
            loss_bbox(pred, torch.tensor([[0.0, 0.0, 2.0, 1.0]]))

    def test_smooth_l1_only_mode(self):
        pred = torch.tensor([[0.0, 0.0, 0.5, 0.5]])
        target = torch.tensor([[0.0, 0.0, 0.4, 0.4]])
        assert float(loss_bbox(pred, target, use_giou=False)) < float(
            loss_bbox(pred, target, use_giou=True)
        )


class TestBatchHelpers:
    def test_pad_tokenized_shapes(self, tokenizer):
        toks = [tokenizer.encode_caption("a red circle", 36), tokenizer.encode_caption("a", 36)]
        ids = pad_tokenized(toks)
        assert ids.shape[0] == 2
        assert (ids[1, len(toks[1]) :] == PAD_ID).all()

    def test_empty_batch_rejected(self):
        with pytest.raises(LossError):
            pad_tokenized([])
