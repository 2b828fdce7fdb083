"""Training losses: contrastive (CL), image-text matching (ITM), masked
language modelling (MLM) — together the caption loss — plus the visually
masked variant (VMA), masked relation classification (MRC) and bbox
regression.

All losses are batch-level, pure functions of (model, batch, rng state).
MLM targets use the -100 ignore-index convention.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .data import EntityBox
from .model import VlmModel, patch_masks_to_tensor
from .patches import patches_for_bbox
from .tokenizer import PAD_ID, TokenizedText, Tokenizer, mask_for_mlm

IGNORE_INDEX = -100


class LossError(ValueError):
    pass


@dataclass
class LossBreakdown:
    cl: float = 0.0
    itm: float = 0.0
    mlm: float = 0.0
    vma: float = 0.0
    mrc: float = 0.0
    bbox: float = 0.0
    total: float = 0.0
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, float]:
        return {
            "cl": self.cl,
            "itm": self.itm,
            "mlm": self.mlm,
            "vma": self.vma,
            "mrc": self.mrc,
            "bbox": self.bbox,
            "total": self.total,
        }


def pad_tokenized(toks: Sequence[TokenizedText], device=None) -> torch.Tensor:
    """Stack variable-length token id lists into a (B, L) [PAD]-filled tensor."""
    if not toks:
        raise LossError("empty token batch")
    max_len = max(len(t) for t in toks)
    ids = torch.full((len(toks), max_len), PAD_ID, dtype=torch.long, device=device)
    for row, tok in enumerate(toks):
        ids[row, : len(tok)] = torch.tensor(tok.ids, dtype=torch.long, device=device)
    return ids


def loss_cl(
    image_embeds: torch.Tensor, text_embeds: torch.Tensor, temperature: float
) -> torch.Tensor:
    """Symmetric InfoNCE over in-batch negatives; row i of each side is a positive pair."""
    n = image_embeds.shape[0]
    if n < 2:
        raise LossError(f"contrastive loss needs N >= 2 pairs, got {n}")
    sims = image_embeds @ text_embeds.T / temperature
    targets = torch.arange(n, device=sims.device)
    return 0.5 * (F.cross_entropy(sims, targets) + F.cross_entropy(sims.T, targets))


def sample_itm_negatives(
    sims: torch.Tensor, generator: torch.Generator, hard: bool = True
) -> tuple[torch.Tensor, torch.Tensor]:
    """One negative text per image (rows) and one negative image per text
    (columns), sampled proportional to contrastive similarity when hard=True,
    uniformly otherwise. Diagonal (the positives) is excluded."""
    n = sims.shape[0]
    if n < 2:
        raise LossError("negative sampling needs N >= 2")
    if not bool(torch.isfinite(sims).all()):
        raise LossError("non-finite similarity matrix (diverged model?)")
    eye = torch.eye(n, dtype=torch.bool, device=sims.device)
    if hard:
        row_w = torch.softmax(sims.masked_fill(eye, float("-inf")), dim=1)
        col_w = torch.softmax(sims.masked_fill(eye, float("-inf")), dim=0).T
    else:
        row_w = (~eye).double() / (n - 1)
        col_w = row_w
    neg_text = torch.multinomial(row_w.double(), 1, generator=generator).squeeze(1)
    neg_image = torch.multinomial(col_w.double(), 1, generator=generator).squeeze(1)
    return neg_text, neg_image


def itm_loss_from_pooled(
    model: VlmModel, pooled: torch.Tensor, labels: torch.Tensor
) -> torch.Tensor:
    """Class-balanced cross-entropy (batches carry 1 positive per 2 negatives,
    so unweighted CE would mis-calibrate the match probability)."""
    if labels.unique().numel() < 2:
        raise LossError("ITM batch must contain both match and no-match labels")
    counts = torch.bincount(labels, minlength=2).to(pooled.dtype)
    weight = labels.numel() / (2.0 * counts)
    return F.cross_entropy(model.itm_logits(pooled), labels, weight=weight)


def loss_itm(
    model: VlmModel,
    pixels: torch.Tensor,
    toks: Sequence[TokenizedText],
    labels: Sequence[int],
    image_allowed: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Binary cross-entropy of the match head over fused (image, text) pairs."""
    ids = pad_tokenized(toks)
    pair = model.forward_pair(pixels, ids, image_allowed)
    return itm_loss_from_pooled(
        model, pair.pooled, torch.tensor(list(labels), dtype=torch.long)
    )


def loss_mlm(
    model: VlmModel,
    pixels: torch.Tensor,
    masked_ids: torch.Tensor,
    targets: torch.Tensor,
    image_allowed: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Cross-entropy at masked positions, conditioned on the image through fusion.

    targets holds original token ids at masked positions and IGNORE_INDEX elsewhere.
    """
    if int((targets != IGNORE_INDEX).sum()) == 0:
        raise LossError("MLM loss needs at least one masked position")
    pair = model.forward_pair(pixels, masked_ids, image_allowed)
    logits = model.mlm_logits(pair.fused_tokens)
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE_INDEX
    )


def mask_token_batch(
    toks: Sequence[TokenizedText], mask_ratio: float, rng: random.Random
) -> tuple[torch.Tensor, torch.Tensor]:
    """Whole-word masking over a batch; returns (masked_ids, targets) tensors."""
    masked: list[TokenizedText] = []
    target_rows: list[tuple[list[int], list[int]]] = []
    for tok in toks:
        masked_ids, positions = mask_for_mlm(tok, mask_ratio, rng)
        masked.append(TokenizedText(masked_ids, tok.word_ids))
        target_rows.append((tok.ids, positions))
    ids = pad_tokenized(masked)
    targets = torch.full_like(ids, IGNORE_INDEX)
    for row, (orig, positions) in enumerate(target_rows):
        for pos in positions:
            targets[row, pos] = orig[pos]
    return ids, targets


def albef_losses(
    model: VlmModel,
    pixels: torch.Tensor,
    toks: Sequence[TokenizedText],
    image_allowed: Optional[torch.Tensor] = None,
    *,
    rng: random.Random,
    generator: torch.Generator,
    mlm_ratio: float = 0.25,
    hard_negatives: bool = True,
) -> dict[str, torch.Tensor]:
    """CL + ITM + MLM on a batch of (image, text) positive pairs.

    When image_allowed carries per-entity patch masks this *is* the visually
    masked loss: the same code path with restricted vision/cross-modal
    attention. Deterministic given (weights, batch, rng, generator).
    """
    n = len(toks)
    if pixels.shape[0] != n:
        raise LossError(f"batch mismatch: {pixels.shape[0]} images vs {n} texts")
    ids = pad_tokenized(toks)
    image_tokens = model.encode_image(pixels, image_allowed)

    # one text-encoder pass covers both the clean and the MLM-masked captions
    masked_ids, targets = mask_token_batch(toks, mlm_ratio, rng)
    both = model.encode_text(torch.cat([ids, masked_ids]))
    text_tokens, masked_text_tokens = both[:n], both[n:]

    image_embeds = model.contrastive_embed(image_tokens[:, 0], "image")
    text_embeds = model.contrastive_embed(text_tokens[:, 0], "text")
    cl = loss_cl(image_embeds, text_embeds, model.config.temperature)

    sims = (image_embeds @ text_embeds.T).detach() / model.config.temperature
    neg_text, neg_image = sample_itm_negatives(sims, generator, hard_negatives)

    # one fusion pass covers ITM positives, both negative pairings and MLM
    text_allowed = ids != PAD_ID
    fuse_images = torch.cat(
        [image_tokens, image_tokens, image_tokens[neg_image], image_tokens]
    )
    fuse_texts = torch.cat(
        [text_tokens, text_tokens[neg_text], text_tokens, masked_text_tokens]
    )
    fuse_text_allowed = torch.cat(
        [text_allowed, text_allowed[neg_text], text_allowed, masked_ids != PAD_ID]
    )
    fuse_image_allowed = None
    if image_allowed is not None:
        fuse_image_allowed = torch.cat(
            [image_allowed, image_allowed, image_allowed[neg_image], image_allowed]
        )
    pair = model.fuse(fuse_images, fuse_texts, fuse_text_allowed, fuse_image_allowed)

    labels = torch.cat(
        [torch.ones(n, dtype=torch.long), torch.zeros(2 * n, dtype=torch.long)]
    )
    itm = itm_loss_from_pooled(model, pair.pooled[: 3 * n], labels)

    logits = model.mlm_logits(pair.fused_tokens[3 * n :])
    if int((targets != IGNORE_INDEX).sum()) == 0:
        raise LossError("MLM loss needs at least one masked position")
    mlm = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE_INDEX
    )
    return {"cl": cl, "itm": itm, "mlm": mlm}


def loss_vma(
    model: VlmModel,
    pixels: torch.Tensor,
    entities: Sequence[EntityBox],
    tokenizer: Tokenizer,
    *,
    rng: random.Random,
    generator: torch.Generator,
    mlm_ratio: float = 0.25,
    hard_negatives: bool = True,
    max_tokens: int = 36,
) -> dict[str, torch.Tensor]:
    """The caption losses on (entity label, image) pairs with vision and
    cross-modal attention restricted to the patches enclosing each entity."""
    grid = model.config.grid
    masks = patch_masks_to_tensor([patches_for_bbox(grid, e) for e in entities])
    toks = [tokenizer.encode_caption(e.label, max_tokens) for e in entities]
    parts = albef_losses(
        model,
        pixels,
        toks,
        image_allowed=masks,
        rng=rng,
        generator=generator,
        mlm_ratio=mlm_ratio,
        hard_negatives=hard_negatives,
    )
    parts["vma"] = parts["cl"] + parts["itm"] + parts["mlm"]
    return parts


def loss_mrc(
    model: VlmModel,
    pixels: torch.Tensor,
    subjects: Sequence[EntityBox],
    objects: Sequence[EntityBox],
    relations: Sequence[str],
    vocab,
    tokenizer: Tokenizer,
    max_tokens: int = 36,
) -> torch.Tensor:
    """Cross-entropy over V+1 relation classes; subject and object are encoded
    separately, each with its visual context masked to its own patches."""
    n = len(subjects)
    grid = model.config.grid
    masks = patch_masks_to_tensor(
        [patches_for_bbox(grid, e) for e in (*subjects, *objects)]
    )
    ids = pad_tokenized(
        [tokenizer.encode_caption(e.label, max_tokens) for e in (*subjects, *objects)]
    )
    pooled = model.forward_pair(torch.cat([pixels, pixels]), ids, masks).pooled
    logits = model.mrc_logits(pooled[:n], pooled[n:])
    targets = torch.tensor([vocab.index_of(r) for r in relations], dtype=torch.long)
    return F.cross_entropy(logits, targets)


def generalized_iou(boxes_a: torch.Tensor, boxes_b: torch.Tensor) -> torch.Tensor:
    """GIoU for (N, 4) xyxy boxes in normalized coordinates."""
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    lt = torch.maximum(boxes_a[:, :2], boxes_b[:, :2])
    rb = torch.minimum(boxes_a[:, 2:], boxes_b[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area_a + area_b - inter
    iou = inter / union
    lt = torch.minimum(boxes_a[:, :2], boxes_b[:, :2])
    rb = torch.maximum(boxes_a[:, 2:], boxes_b[:, 2:])
    wh = (rb - lt).clamp(min=0)
    enclosure = wh[:, 0] * wh[:, 1]
    return iou - (enclosure - union) / enclosure


def loss_bbox(
    predicted: torch.Tensor, target: torch.Tensor, use_giou: bool = True
) -> torch.Tensor:
    """Mean smooth-L1 over the 4 coords plus an equally weighted (1 - GIoU) term."""
    if predicted.shape != target.shape or predicted.shape[-1] != 4:
        raise LossError(f"bbox shapes must match (N, 4), got {tuple(predicted.shape)}")
    if bool((target < 0).any()) or bool((target > 1).any()):
        raise LossError("bbox targets must be normalized to [0, 1]")
    degenerate = (target[:, 2] <= target[:, 0]) | (target[:, 3] <= target[:, 1])
    if bool(degenerate.any()):
        raise LossError("degenerate target box (zero width or height)")
    smooth = F.smooth_l1_loss(predicted, target)
    if not use_giou:
        return smooth
    return smooth + (1.0 - generalized_iou(predicted, target)).mean()
