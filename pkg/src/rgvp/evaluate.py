"""Zero-shot evaluation and checkpoint analysis.

Scoring is ITM-based: the match-class probability of the fused pair. On top of
it sit pairwise ranking accuracy over (positive, foil) pairs, VSR-style binary
judgments, exhaustive NxN retrieval recall, an MRC probe, checkpoint selection
and Spearman rank correlation between selection strategies.

Ties: ranking accuracy counts a tie as 0.5; retrieval ranks break ties by
lower index first; Spearman uses average ranks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import ImageRecord, RelationVocab, load_dataset
from .losses import pad_tokenized
from .model import VlmModel, patch_masks_to_tensor, pixels_to_tensor
from .patches import patches_for_bbox
from .synth import FoilPair, VsrItem, load_foils, load_vsr_items
from .tokenizer import TokenizedText, Tokenizer


class EvalError(ValueError):
    pass


@dataclass
class EvalReport:
    task: str
    metrics: dict[str, float]
    n_examples: int
    checkpoint_step: int = -1

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "metrics": self.metrics,
            "n_examples": self.n_examples,
            "checkpoint_step": self.checkpoint_step,
        }


@torch.no_grad()
def itm_scores(
    model: VlmModel,
    pixel_arrays: Sequence[np.ndarray],
    toks: Sequence[TokenizedText],
    batch_size: int = 64,
) -> np.ndarray:
    """Match probabilities for (image, text) pairs, batched."""
    model.eval()
    scores = []
    for start in range(0, len(toks), batch_size):
        chunk_pixels = pixels_to_tensor(pixel_arrays[start : start + batch_size])
        ids = pad_tokenized(toks[start : start + batch_size])
        pair = model.forward_pair(chunk_pixels, ids)
        probs = torch.softmax(model.itm_logits(pair.pooled), dim=-1)[:, 1]
        scores.append(probs.numpy())
    return np.concatenate(scores) if scores else np.zeros(0)


def itm_score(model: VlmModel, pixels: np.ndarray, tok: TokenizedText) -> float:
    return float(itm_scores(model, [pixels], [tok])[0])


def ranking_accuracy(pos_scores: Sequence[float], foil_scores: Sequence[float]) -> float:
    """Fraction of pairs where the positive outscores the foil; ties count 0.5."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    foil = np.asarray(foil_scores, dtype=np.float64)
    if pos.size == 0 or pos.shape != foil.shape:
        raise EvalError("ranking accuracy needs one or more (positive, foil) score pairs")
    return float(np.mean(np.where(pos > foil, 1.0, np.where(pos == foil, 0.5, 0.0))))


def binary_accuracy(scores: Sequence[float], labels: Sequence[bool], threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.size == 0 or scores.shape != labels.shape:
        raise EvalError("binary accuracy needs one or more scored items")
    preds = scores >= threshold
    return float(np.mean(preds == labels))


def rank_auc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Threshold-free AUC via the rank-sum statistic with average-rank ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvalError("AUC needs both positive and negative items")
    ranks = _average_ranks(scores.tolist())
    pos_rank_sum = float(np.asarray(ranks)[labels].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


def retrieval_recall(score_matrix: np.ndarray, ks: Sequence[int] = (1, 5)) -> dict[str, float]:
    """TR@k / IR@k on an NxN score matrix whose diagonal holds the positives.

    Rank of the true entry = 1 + count of strictly larger entries + count of
    equal entries at lower index (ties broken by lower index first).
    """
    matrix = np.asarray(score_matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise EvalError(f"score matrix must be square, got {matrix.shape}")
    n = matrix.shape[0]
    diag = np.diag(matrix)
    idx = np.arange(n)

    tr_rank = np.empty(n, dtype=np.int64)
    ir_rank = np.empty(n, dtype=np.int64)
    for i in range(n):
        row, col = matrix[i], matrix[:, i]
        tr_rank[i] = 1 + int((row > diag[i]).sum()) + int(((row == diag[i]) & (idx < i)).sum())
        ir_rank[i] = 1 + int((col > diag[i]).sum()) + int(((col == diag[i]) & (idx < i)).sum())

    out = {}
    for k in ks:
        out[f"tr@{k}"] = float((tr_rank <= k).mean())
        out[f"ir@{k}"] = float((ir_rank <= k).mean())
    return out


def _average_ranks(xs: Sequence[float]) -> list[float]:
    n = len(xs)
    order = sorted(range(n), key=lambda i: xs[i])
    ranks = [0.0] * n
    i = 0
    while i < n:
        j = i
        while j + 1 < n and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Rank correlation with average-rank tie handling (Pearson of ranks)."""
    if len(xs) != len(ys):
        raise EvalError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise EvalError("spearman needs at least 2 points")
    rx = np.asarray(_average_ranks(list(xs)))
    ry = np.asarray(_average_ranks(list(ys)))
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = float(np.sqrt((rx * rx).sum() * (ry * ry).sum()))
    if denom == 0:
        raise EvalError("spearman undefined for constant sequences")
    return float((rx * ry).sum() / denom)


# --- model-facing evaluators -------------------------------------------------


def evaluate_foils(
    model: VlmModel,
    tokenizer: Tokenizer,
    records_by_id: dict[str, ImageRecord],
    foils: Sequence[FoilPair],
    max_tokens: int = 36,
) -> EvalReport:
    if not foils:
        raise EvalError("empty foil set")
    pixel_arrays = [records_by_id[f.image_id].pixels for f in foils]
    pos_toks = [tokenizer.encode_caption(f.positive, max_tokens) for f in foils]
    foil_toks = [tokenizer.encode_caption(f.foil, max_tokens) for f in foils]
    pos_scores = itm_scores(model, pixel_arrays, pos_toks)
    foil_scores = itm_scores(model, pixel_arrays, foil_toks)
    metrics = {"acc_r": ranking_accuracy(pos_scores, foil_scores)}
    for foil_type in sorted({f.foil_type for f in foils}):
        sel = [i for i, f in enumerate(foils) if f.foil_type == foil_type]
        metrics[f"acc_r_{foil_type}"] = ranking_accuracy(pos_scores[sel], foil_scores[sel])
    return EvalReport("foils", metrics, n_examples=len(foils))


def evaluate_vsr(
    model: VlmModel,
    tokenizer: Tokenizer,
    records_by_id: dict[str, ImageRecord],
    items: Sequence[VsrItem],
    threshold: float = 0.5,
    max_tokens: int = 36,
) -> EvalReport:
    if not items:
        raise EvalError("empty VSR set")
    pixel_arrays = [records_by_id[i.image_id].pixels for i in items]
    toks = [tokenizer.encode_caption(i.sentence, max_tokens) for i in items]
    scores = itm_scores(model, pixel_arrays, toks)
    labels = [i.label for i in items]
    metrics = {
        "vsr_acc": binary_accuracy(scores, labels, threshold),
        "vsr_auc": rank_auc(scores, labels),
        "threshold": threshold,
    }
    return EvalReport("vsr", metrics, n_examples=len(items))


def evaluate_retrieval(
    model: VlmModel,
    tokenizer: Tokenizer,
    records: Sequence[ImageRecord],
    ks: Sequence[int] = (1, 5),
    max_tokens: int = 36,
) -> EvalReport:
    """Exhaustive ITM scoring of all NxN (image, first caption) pairs."""
    usable = [r for r in records if r.captions]
    n = len(usable)
    if n < 2:
        raise EvalError("retrieval needs at least 2 captioned records")
    toks = [tokenizer.encode_caption(r.captions[0], max_tokens) for r in usable]
    matrix = np.zeros((n, n))
    for i, record in enumerate(usable):
        row_pixels = [record.pixels] * n
        matrix[i] = itm_scores(model, row_pixels, toks)
    return EvalReport("retrieval", retrieval_recall(matrix, ks), n_examples=n)


@torch.no_grad()
def mrc_probe(
    model: VlmModel,
    tokenizer: Tokenizer,
    vocab: RelationVocab,
    records: Sequence[ImageRecord],
    max_triplets: Optional[int] = None,
    batch_size: int = 32,
    max_tokens: int = 36,
) -> EvalReport:
    """Argmax accuracy of the relation head on held-out triplets."""
    model.eval()
    items = [(r, t) for r in records for t in r.triplets]
    if max_triplets is not None:
        items = items[:max_triplets]
    if not items:
        raise EvalError("no triplets to probe")
    grid = model.config.grid
    correct = 0
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        pixels = pixels_to_tensor([r.pixels for r, _ in chunk])
        subjects = [r.entities[t.subject] for r, t in chunk]
        objects = [r.entities[t.object] for r, t in chunk]
        mask_s = patch_masks_to_tensor([patches_for_bbox(grid, e) for e in subjects])
        mask_o = patch_masks_to_tensor([patches_for_bbox(grid, e) for e in objects])
        ids_s = pad_tokenized([tokenizer.encode_caption(e.label, max_tokens) for e in subjects])
        ids_o = pad_tokenized([tokenizer.encode_caption(e.label, max_tokens) for e in objects])
        pooled_s = model.forward_pair(pixels, ids_s, mask_s).pooled
        pooled_o = model.forward_pair(pixels, ids_o, mask_o).pooled
        preds = model.mrc_logits(pooled_s, pooled_o).argmax(dim=-1)
        targets = torch.tensor([vocab.index_of(t.relation) for _, t in chunk])
        correct += int((preds == targets).sum())
    return EvalReport("mrc", {"mrc_acc": correct / len(items)}, n_examples=len(items))


# --- checkpoint selection ----------------------------------------------------


def select_checkpoint(checkpoints: Sequence, metric: str):
    """Checkpoint with the maximal metric; ties go to the latest step."""
    if not checkpoints:
        raise EvalError("no checkpoints to select from")
    for meta in checkpoints:
        if metric not in meta.eval_metrics:
            raise EvalError(f"metric {metric!r} missing from checkpoint step {meta.step}")
    return max(checkpoints, key=lambda m: (m.eval_metrics[metric], m.step))


@dataclass
class SelectionStudy:
    reference: str
    strategies: list[dict] = field(default_factory=list)
    cross_matrix: dict[str, dict[str, float]] = field(default_factory=dict)
    spearman: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "reference": self.reference,
            "strategies": self.strategies,
            "cross_matrix": self.cross_matrix,
            "spearman": self.spearman,
        }


@dataclass
class EvalData:
    records: list[ImageRecord]
    foils: list[FoilPair]
    vsr_items: list[VsrItem]

    @property
    def records_by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.records}


def load_eval_data(data_dir: Path | str) -> EvalData:
    data_dir = Path(data_dir)
    records = load_dataset(data_dir / "dataset.jsonl")
    foils_path = data_dir / "foils.jsonl"
    vsr_path = data_dir / "vsr.jsonl"
    return EvalData(
        records=records,
        foils=load_foils(foils_path) if foils_path.exists() else [],
        vsr_items=load_vsr_items(vsr_path) if vsr_path.exists() else [],
    )


def split_dev_test(items: Sequence) -> tuple[list, list]:
    """Deterministic halves by item index: even -> dev, odd -> test."""
    return list(items[0::2]), list(items[1::2])


def checkpoint_metrics(
    model: VlmModel,
    tokenizer: Tokenizer,
    vocab: RelationVocab,
    data: EvalData,
    retrieval_limit: int = 32,
    mrc_limit: int = 128,
) -> dict[str, float]:
    """The standard metric bundle used for selection studies."""
    by_id = data.records_by_id
    metrics: dict[str, float] = {}
    if data.foils:
        metrics.update(evaluate_foils(model, tokenizer, by_id, data.foils).metrics)
    if data.vsr_items:
        report = evaluate_vsr(model, tokenizer, by_id, data.vsr_items)
        metrics["vsr_acc"] = report.metrics["vsr_acc"]
        metrics["vsr_auc"] = report.metrics["vsr_auc"]
    metrics.update(
        evaluate_retrieval(model, tokenizer, data.records[:retrieval_limit]).metrics
    )
    metrics.update(
        mrc_probe(model, tokenizer, vocab, data.records, max_triplets=mrc_limit).metrics
    )
    return metrics
