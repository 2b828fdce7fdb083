"""Multi-task pretraining loop: grouped per-task batches, ratio-based task
sampling, AdamW with linear warmup, ablation switches and periodic
checkpointing.

Each step draws a single task (captions / entities / mrc / vsg), builds a
batch of that type only, and applies the task's losses:

    captions  caption triple (CL + ITM + MLM) on (image, caption)
    vsg       caption triple on (image, verbalised scene graph)
    entities  visually masked triple (VMA) and/or bbox regression
    mrc       masked relation classification

The ablation set {vsg, mrc, vma, bbox} enables the extras; captions are always
on. Runs are bit-reproducible given (config, seed, thread count).
"""

from __future__ import annotations

import dataclasses
import json
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import __version__ as package_version
from .checkpoint import VERSION as CHECKPOINT_VERSION
from .checkpoint import save_checkpoint
from .data import EntityBox, ImageRecord, RelationTriplet, RelationVocab, build_relation_vocab
from .losses import (
    LossBreakdown,
    LossError,
    albef_losses,
    loss_bbox,
    loss_mrc,
    loss_vma,
    pad_tokenized,
)
from .model import ModelConfig, VlmModel, build_model, pixels_to_tensor
from .tokenizer import Tokenizer
from .verbalise import VerbaliserConfig, make_vsg_caption

TASKS = ("captions", "entities", "mrc", "vsg")
ABLATION_FLAGS = frozenset({"vsg", "mrc", "vma", "bbox"})


class TrainerError(RuntimeError):
    pass


def _default_batch_sizes() -> dict[str, int]:
    return {"captions": 8, "entities": 8, "mrc": 8, "vsg": 8}


def _default_ratios() -> dict[str, float]:
    return {"captions": 2.0, "entities": 1.5, "mrc": 1.0, "vsg": 1.0}


def _default_per_image() -> dict[str, int]:
    return {"entities": 4, "mrc": 2, "vsg": 16}


def _default_weights() -> dict[str, float]:
    return {"cl": 1.0, "itm": 1.0, "mlm": 1.0, "vma": 1.0, "mrc": 1.0, "bbox": 1.0}


@dataclass
class TrainSchedule:
    steps: int = 500_000
    warmup_steps: int = 5000
    peak_lr: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.995)
    weight_decay: float = 0.02
    batch_sizes: dict[str, int] = field(default_factory=_default_batch_sizes)
    sampling_ratios: dict[str, float] = field(default_factory=_default_ratios)
    per_image_counts: dict[str, int] = field(default_factory=_default_per_image)
    ablation: frozenset[str] = ABLATION_FLAGS
    seed: int = 0
    lr_schedule: str = "constant"  # constant | cosine, after warmup
    grad_clip: float = 1.0  # 0 disables clipping
    mlm_ratio: float = 0.25
    max_tokens_caption: int = 36
    max_tokens_vsg: int = 112
    itm_hard_negatives: bool = True
    loss_weights: dict[str, float] = field(default_factory=_default_weights)
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self) -> None:
        self.ablation = frozenset(self.ablation)
        unknown = self.ablation - ABLATION_FLAGS
        if unknown:
            raise TrainerError(f"unknown ablation flags {sorted(unknown)}")
        if self.warmup_steps > self.steps:
            raise TrainerError(
                f"warmup_steps {self.warmup_steps} exceeds total steps {self.steps}"
            )
        if self.lr_schedule not in ("constant", "cosine"):
            raise TrainerError(f"unknown lr schedule {self.lr_schedule!r}")
        if any(r < 0 for r in self.sampling_ratios.values()):
            raise TrainerError("sampling ratios must be non-negative")
        if not any(self.effective_ratios().values()):
            raise TrainerError("no enabled task has a positive sampling ratio")

    def task_enabled(self, task: str) -> bool:
        if task == "captions":
            return True
        if task == "vsg":
            return "vsg" in self.ablation
        if task == "mrc":
            return "mrc" in self.ablation
        if task == "entities":
            return "vma" in self.ablation or "bbox" in self.ablation
        raise TrainerError(f"unknown task {task!r}")

    def effective_ratios(self) -> dict[str, float]:
        """Disabled tasks get ratio 0 regardless of the configured value."""
        return {
            t: (self.sampling_ratios.get(t, 0.0) if self.task_enabled(t) else 0.0)
            for t in TASKS
        }


def next_task(schedule: TrainSchedule, rng: random.Random) -> str:
    ratios = schedule.effective_ratios()
    weights = [ratios[t] for t in TASKS]
    if sum(weights) <= 0:
        raise TrainerError("all task sampling ratios are zero")
    return rng.choices(TASKS, weights=weights, k=1)[0]


@dataclass
class CaptionBatch:
    records: list[ImageRecord]
    captions: list[str]


@dataclass
class EntityBatch:
    records: list[ImageRecord]  # repeated per sampled entity
    entities: list[EntityBox]


@dataclass
class MrcBatch:
    records: list[ImageRecord]  # repeated per sampled triplet
    triplets: list[RelationTriplet]


@dataclass
class VsgBatch:
    records: list[ImageRecord]
    captions: list[str]


Batch = CaptionBatch | EntityBatch | MrcBatch | VsgBatch


def eligible_records(task: str, records: Sequence[ImageRecord]) -> list[ImageRecord]:
    if task == "captions":
        return [r for r in records if r.captions]
    if task == "entities":
        return [r for r in records if r.entities]
    if task in ("mrc", "vsg"):
        return [r for r in records if r.triplets]
    raise TrainerError(f"unknown task {task!r}")


def make_batch(
    task: str,
    records: Sequence[ImageRecord],
    schedule: TrainSchedule,
    rng: random.Random,
    tokenizer: Optional[Tokenizer] = None,
) -> Batch:
    pool = eligible_records(task, records)
    if not pool:
        raise TrainerError(f"no records are eligible for task {task!r}")
    size = schedule.batch_sizes.get(task, 8)
    chosen = rng.sample(pool, min(size, len(pool)))
    if task == "captions":
        return CaptionBatch(chosen, [rng.choice(r.captions) for r in chosen])
    if task == "entities":
        per_image = schedule.per_image_counts.get("entities", 4)
        recs, ents = [], []
        for r in chosen:
            for e in rng.sample(r.entities, min(per_image, len(r.entities))):
                recs.append(r)
                ents.append(e)
        return EntityBatch(recs, ents)
    if task == "mrc":
        per_image = schedule.per_image_counts.get("mrc", 2)
        recs, trips = [], []
        for r in chosen:
            for t in rng.sample(r.triplets, min(per_image, len(r.triplets))):
                recs.append(r)
                trips.append(t)
        return MrcBatch(recs, trips)
    if task == "vsg":
        if tokenizer is None:
            raise TrainerError("vsg batches need a tokenizer")
        vcfg = VerbaliserConfig(
            k=schedule.per_image_counts.get("vsg", 16),
            max_tokens_caption=schedule.max_tokens_caption,
            max_tokens_vsg=schedule.max_tokens_vsg,
        )
        captions = [
            make_vsg_caption(r.triplets, r.entities, vcfg, tokenizer, rng).text for r in chosen
        ]
        return VsgBatch(chosen, captions)
    raise TrainerError(f"unknown task {task!r}")


def lr_at(step: int, schedule: TrainSchedule) -> float:
    """Linear warmup from 0 to peak_lr, then constant or cosine decay."""
    if schedule.warmup_steps > 0 and step < schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    if schedule.lr_schedule == "constant":
        return schedule.peak_lr
    span = max(1, schedule.steps - schedule.warmup_steps)
    progress = (step - schedule.warmup_steps) / span
    return schedule.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class CheckpointMeta:
    step: int
    path: str
    eval_metrics: dict[str, float] = field(default_factory=dict)


class Trainer:
    """Owns the model, optimizer and rng streams for one training run."""

    def __init__(
        self,
        records: Sequence[ImageRecord],
        schedule: TrainSchedule,
        model_config: ModelConfig,
        tokenizer: Optional[Tokenizer] = None,
        vocab: Optional[RelationVocab] = None,
    ):
        if not records:
            raise TrainerError("empty training corpus")
        self.records = list(records)
        self.schedule = schedule
        self.tokenizer = tokenizer or build_corpus_tokenizer(records)
        self.vocab = vocab or build_relation_vocab(records, model_config.n_relations)
        self.config = dataclasses.replace(
            model_config,
            vocab_size=self.tokenizer.vocab_size,
            n_relations=self.vocab.size,
        )
        torch.manual_seed(schedule.seed)
        self.model = VlmModel(self.config)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(),
            lr=schedule.peak_lr,
            betas=schedule.adam_betas,
            weight_decay=schedule.weight_decay,
        )
        self.task_rng = random.Random(schedule.seed + 0x5EED1)
        self.data_rng = random.Random(schedule.seed + 0x5EED2)
        self.mask_rng = random.Random(schedule.seed + 0x5EED3)
        self.generator = torch.Generator().manual_seed(schedule.seed + 0x5EED4)

    def _pixels(self, records: Sequence[ImageRecord]) -> torch.Tensor:
        return pixels_to_tensor([r.pixels for r in records])

    def compute_losses(self, task: str, batch: Batch) -> tuple[torch.Tensor, LossBreakdown]:
        s = self.schedule
        w = s.loss_weights
        breakdown = LossBreakdown()
        if isinstance(batch, (CaptionBatch, VsgBatch)):
            max_tokens = s.max_tokens_caption if isinstance(batch, CaptionBatch) else s.max_tokens_vsg
            if isinstance(batch, CaptionBatch):
                toks = [self.tokenizer.encode_caption(c, max_tokens) for c in batch.captions]
            else:
                # VSG strings already carry [CLS]/[SEP] and respect the budget
                toks = [self.tokenizer.encode(c) for c in batch.captions]
            parts = albef_losses(
                self.model,
                self._pixels(batch.records),
                toks,
                rng=self.mask_rng,
                generator=self.generator,
                mlm_ratio=s.mlm_ratio,
                hard_negatives=s.itm_hard_negatives,
            )
            total = w["cl"] * parts["cl"] + w["itm"] * parts["itm"] + w["mlm"] * parts["mlm"]
            breakdown.cl = float(parts["cl"].detach())
            breakdown.itm = float(parts["itm"].detach())
            breakdown.mlm = float(parts["mlm"].detach())
            breakdown.counts = {"pairs": len(batch.records)}
        elif isinstance(batch, EntityBatch):
            pixels = self._pixels(batch.records)
            total = torch.zeros((), dtype=pixels.dtype)
            if "vma" in s.ablation:
                parts = loss_vma(
                    self.model,
                    pixels,
                    batch.entities,
                    self.tokenizer,
                    rng=self.mask_rng,
                    generator=self.generator,
                    mlm_ratio=s.mlm_ratio,
                    hard_negatives=s.itm_hard_negatives,
                    max_tokens=s.max_tokens_caption,
                )
                total = total + w["vma"] * parts["vma"]
                breakdown.vma = float(parts["vma"].detach())
            if "bbox" in s.ablation:
                toks = [
                    self.tokenizer.encode_caption(e.label, s.max_tokens_caption)
                    for e in batch.entities
                ]
                pooled = self.model.forward_pair(pixels, pad_tokenized(toks)).pooled
                targets = torch.tensor(
                    [e.normalized(r.width, r.height) for e, r in zip(batch.entities, batch.records)],
                    dtype=pixels.dtype,
                )
                bbox = loss_bbox(self.model.bbox_predict(pooled), targets)
                total = total + w["bbox"] * bbox
                breakdown.bbox = float(bbox.detach())
            breakdown.counts = {"entities": len(batch.entities)}
        elif isinstance(batch, MrcBatch):
            subjects = [r.entities[t.subject] for r, t in zip(batch.records, batch.triplets)]
            objects = [r.entities[t.object] for r, t in zip(batch.records, batch.triplets)]
            relations = [t.relation for t in batch.triplets]
            mrc = loss_mrc(
                self.model,
                self._pixels(batch.records),
                subjects,
                objects,
                relations,
                self.vocab,
                self.tokenizer,
                max_tokens=s.max_tokens_caption,
            )
            total = w["mrc"] * mrc
            breakdown.mrc = float(mrc.detach())
            breakdown.counts = {"triplets": len(batch.triplets)}
        else:
            raise TrainerError(f"unknown batch type {type(batch).__name__}")
        breakdown.total = float(total.detach())
        return total, breakdown

    def train_step(self, step: int, task: str, batch: Batch) -> LossBreakdown:
        if step >= self.schedule.steps:
            raise TrainerError(f"step {step} beyond schedule ({self.schedule.steps})")
        self.model.train()
        try:
            total, breakdown = self.compute_losses(task, batch)
        except LossError as exc:
            raise TrainerError(f"loss computation failed at step {step} (task {task}): {exc}") from exc
        if not math.isfinite(breakdown.total):
            raise TrainerError(
                f"non-finite loss at step {step} (task {task}): {breakdown.to_dict()}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if self.schedule.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.schedule.grad_clip)
        lr = lr_at(step, self.schedule)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        return breakdown


def build_corpus_tokenizer(records: Sequence[ImageRecord]) -> Tokenizer:
    """Tokenizer over everything the trainer will ever encode: captions,
    entity labels and relation strings."""
    texts: list[str] = []
    for r in records:
        texts.extend(r.captions)
        texts.extend(e.label for e in r.entities)
        texts.extend(t.relation for t in r.triplets)
    return Tokenizer.build(texts)


@dataclass
class TrainResult:
    model: VlmModel
    tokenizer: Tokenizer
    vocab: RelationVocab
    history: list[dict]
    checkpoints: list[CheckpointMeta]
    out_dir: Optional[Path]


def run_training(
    records: Sequence[ImageRecord],
    schedule: TrainSchedule,
    model_config: ModelConfig,
    out_dir: Optional[Path | str] = None,
    data_path: str = "",
    threads: int = 1,
) -> TrainResult:
    """Full run: manifest, tokenizer/vocab artifacts, training log, checkpoints."""
    torch.set_num_threads(threads)
    trainer = Trainer(records, schedule, model_config)

    log_fh = None
    checkpoint_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_dir = out_dir / "checkpoints"
        manifest = {
            "package_version": package_version,
            "checkpoint_format_version": CHECKPOINT_VERSION,
            "seed": schedule.seed,
            "created_unix": time.time(),
            "data": data_path,
            "model_config": dataclasses.asdict(trainer.config),
            "schedule": {
                **dataclasses.asdict(schedule),
                "ablation": sorted(schedule.ablation),
            },
            "artifacts": {
                "tokenizer": "tokenizer.txt",
                "relations": "relations.txt",
                "log": "log.jsonl",
                "checkpoints": "checkpoints",
            },
        }
        (out_dir / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        trainer.tokenizer.save(out_dir / "tokenizer.txt")
        trainer.vocab.save(out_dir / "relations.txt")
        log_fh = (out_dir / "log.jsonl").open("w", encoding="utf-8")

    history: list[dict] = []
    checkpoints: list[CheckpointMeta] = []

    def _checkpoint(step: int) -> None:
        if checkpoint_dir is None:
            return
        path = checkpoint_dir / f"step_{step:06d}.rgvp"
        save_checkpoint(trainer.model, path)
        checkpoints.append(CheckpointMeta(step=step, path=str(path)))

    try:
        for step in range(schedule.steps):
            task = next_task(schedule, trainer.task_rng)
            batch = make_batch(task, trainer.records, schedule, trainer.data_rng, trainer.tokenizer)
            try:
                breakdown = trainer.train_step(step, task, batch)
            except TrainerError:
                if out_dir is not None:
                    (Path(out_dir) / "diagnostics.json").write_text(
                        json.dumps({"step": step, "task": task, "history_tail": history[-5:]})
                    )
                raise
            entry = {"step": step, "task": task, **breakdown.to_dict(), "lr": lr_at(step, schedule)}
            history.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry) + "\n")
            if (
                schedule.checkpoint_every > 0
                and (step + 1) % schedule.checkpoint_every == 0
                and (step + 1) < schedule.steps
            ):
                _checkpoint(step + 1)
        _checkpoint(schedule.steps)
        if checkpoint_dir is not None and out_dir is not None:
            with (Path(out_dir) / "checkpoints.jsonl").open("w", encoding="utf-8") as fh:
                for meta in checkpoints:
                    fh.write(json.dumps({"step": meta.step, "path": meta.path}) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()

    return TrainResult(
        model=trainer.model,
        tokenizer=trainer.tokenizer,
        vocab=trainer.vocab,
        history=history,
        checkpoints=checkpoints,
        out_dir=Path(out_dir) if out_dir is not None else None,
    )
