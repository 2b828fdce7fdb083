"""Command-line entry point wiring all modules.

Subcommands: synth, prepare, verbalise, mask, train, eval, select, study.
Config precedence for train: CLI flag > config file > built-in default.
Log level comes from the RGVP_LOG environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import random
import sys
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .data import (
    DataError,
    RelationVocab,
    build_relation_vocab,
    corpus_stats,
    load_dataset,
)
from .evaluate import (
    EvalError,
    SelectionStudy,
    checkpoint_metrics,
    evaluate_foils,
    evaluate_retrieval,
    evaluate_vsr,
    load_eval_data,
    mrc_probe,
    select_checkpoint,
    spearman,
    split_dev_test,
)
from .model import ModelConfig, ModelError
from .patches import PatchError, PatchGrid, patches_for_bbox
from .synth import SynthConfig, generate
from .tokenizer import Tokenizer, TokenizerError
from .trainer import (
    CheckpointMeta,
    TrainerError,
    TrainSchedule,
    build_corpus_tokenizer,
    run_training,
)
from .verbalise import VerbaliseError, VerbaliserConfig, make_vsg_caption
from .data import EntityBox

log = logging.getLogger("rgvp")

KNOWN_ERRORS = (
    DataError,
    TokenizerError,
    VerbaliseError,
    PatchError,
    ModelError,
    CheckpointError,
    TrainerError,
    EvalError,
    FileNotFoundError,
    ValueError,
)


def _add_synth(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("synth", help="generate a synthetic scene corpus")
    p.add_argument("--n", type=int, required=True, help="number of scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--canvas", type=int, default=64)


def _add_prepare(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("prepare", help="build relation vocab and corpus stats")
    p.add_argument("--data", type=Path, required=True, help="dataset JSONL")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--relations", type=int, default=310, help="vocabulary size V")


def _add_verbalise(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("verbalise", help="print the structured caption for one record")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)


def _add_mask(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("mask", help="print the patch mask for a bbox as an ASCII grid")
    p.add_argument("--bbox", required=True, help="xmin,ymin,xmax,ymax")
    p.add_argument("--grid", required=True, help="image_size,patch_size")


def _add_train(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("train", help="run multi-task pretraining")
    p.add_argument("--config", type=Path, help="JSON file with 'model'/'schedule' sections")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ablation", help="comma-separated subset of vsg,mrc,vma,bbox")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1)


def _add_eval(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("eval", help="evaluate a checkpoint on one task")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="directory from `rgvp synth`")
    p.add_argument("--task", choices=("foils", "vsr", "retrieval", "mrc"), required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--tokenizer", type=Path, help="defaults to tokenizer.txt beside the run")
    p.add_argument("--relations", type=Path, help="defaults to relations.txt beside the run")
    p.add_argument("--threshold", type=float, default=0.5, help="VSR decision threshold")


def _add_select(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("select", help="pick the best checkpoint by a dev metric")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--metric", required=True)


def _add_study(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("study", help="checkpoint-selection study with Spearman report")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--reference", default="tr@1")
    p.add_argument("--out", type=Path, help="defaults to <run>/study.json")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rgvp", description=__doc__)
    parser.add_argument("--version", action="version", version=f"rgvp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (_add_synth, _add_prepare, _add_verbalise, _add_mask, _add_train,
                _add_eval, _add_select, _add_study):
        add(sub)
    return parser


def _find_artifact(checkpoint: Path, name: str, override: Path | None) -> Path:
    if override is not None:
        return override
    for candidate in (checkpoint.parent / name, checkpoint.parent.parent / name):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(
        f"could not find {name} near {checkpoint}; pass it explicitly"
    )


def cmd_synth(args: argparse.Namespace) -> int:
    config = SynthConfig(canvas=args.canvas)
    records, foils, vsr = generate(args.n, args.seed, args.out, config)
    print(
        json.dumps(
            {"images": len(records), "foils": len(foils), "vsr_items": len(vsr),
             "out": str(args.out)}
        )
    )
    return 0


def cmd_prepare(args: argparse.Namespace) -> int:
    records = load_dataset(args.data)
    vocab = build_relation_vocab(records, args.relations)
    stats = corpus_stats(records)
    args.out.mkdir(parents=True, exist_ok=True)
    vocab.save(args.out / "relations.txt")
    (args.out / "stats.json").write_text(json.dumps(stats.to_dict(), indent=2) + "\n")
    print(json.dumps({**stats.to_dict(), "vocab_size": vocab.size}))
    return 0


def cmd_verbalise(args: argparse.Namespace) -> int:
    records = load_dataset(args.data)
    matches = [r for r in records if r.id == args.id]
    if not matches:
        raise DataError(f"record id {args.id!r} not found in {args.data}")
    record = matches[0]
    tokenizer = build_corpus_tokenizer(records)
    caption = make_vsg_caption(
        record.triplets, record.entities, VerbaliserConfig(k=args.k),
        tokenizer, random.Random(args.seed),
    )
    print(caption.text)
    return 0


def cmd_mask(args: argparse.Namespace) -> int:
    image_size, patch_size = (int(v) for v in args.grid.split(","))
    xmin, ymin, xmax, ymax = (float(v) for v in args.bbox.split(","))
    grid = PatchGrid(image_size, patch_size)
    mask = patches_for_bbox(grid, EntityBox("query", xmin, ymin, xmax, ymax))
    print(mask.ascii_grid())
    return 0


def _load_train_config(args: argparse.Namespace) -> tuple[ModelConfig, TrainSchedule]:
    model_kwargs: dict = {}
    schedule_kwargs: dict = {}
    if args.config is not None:
        blob = json.loads(args.config.read_text(encoding="utf-8"))
        model_kwargs.update(blob.get("model", {}))
        schedule_kwargs.update(blob.get("schedule", {}))
    if args.steps is not None:
        schedule_kwargs["steps"] = args.steps
        schedule_kwargs.setdefault(
            "warmup_steps", min(5000, max(1, args.steps // 10))
        )
    if args.seed is not None:
        schedule_kwargs["seed"] = args.seed
    if args.ablation is not None:
        flags = [f for f in args.ablation.split(",") if f]
        schedule_kwargs["ablation"] = frozenset(flags)
    if "adam_betas" in schedule_kwargs:
        schedule_kwargs["adam_betas"] = tuple(schedule_kwargs["adam_betas"])
    return ModelConfig(**model_kwargs), TrainSchedule(**schedule_kwargs)


def cmd_train(args: argparse.Namespace) -> int:
    model_config, schedule = _load_train_config(args)
    records = load_dataset(args.data)
    result = run_training(
        records, schedule, model_config,
        out_dir=args.out, data_path=str(args.data), threads=args.threads,
    )
    final = result.checkpoints[-1] if result.checkpoints else None
    print(
        json.dumps(
            {
                "steps": schedule.steps,
                "final_checkpoint": final.path if final else None,
                "final_loss": result.history[-1]["total"] if result.history else None,
            }
        )
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    tokenizer = Tokenizer.load(_find_artifact(args.checkpoint, "tokenizer.txt", args.tokenizer))
    data = load_eval_data(args.data)
    by_id = data.records_by_id
    if args.task == "foils":
        report = evaluate_foils(model, tokenizer, by_id, data.foils)
    elif args.task == "vsr":
        report = evaluate_vsr(model, tokenizer, by_id, data.vsr_items, threshold=args.threshold)
    elif args.task == "retrieval":
        report = evaluate_retrieval(model, tokenizer, data.records)
    else:
        vocab = RelationVocab.load(
            _find_artifact(args.checkpoint, "relations.txt", args.relations)
        )
        report = mrc_probe(model, tokenizer, vocab, data.records)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(json.dumps(report.to_dict()))
    return 0


def _load_run_checkpoints(run_dir: Path) -> list[CheckpointMeta]:
    listing = run_dir / "checkpoints.jsonl"
    if not listing.exists():
        raise EvalError(f"{listing} not found; train first")
    metas = []
    for line in listing.read_text(encoding="utf-8").splitlines():
        if line.strip():
            obj = json.loads(line)
            metas.append(CheckpointMeta(step=obj["step"], path=obj["path"]))
    return metas


def cmd_select(args: argparse.Namespace) -> int:
    evals_path = args.run / "evals.jsonl"
    if not evals_path.exists():
        raise EvalError(f"{evals_path} not found; run `rgvp study` first")
    metas = []
    for line in evals_path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            obj = json.loads(line)
            metas.append(
                CheckpointMeta(step=obj["step"], path=obj["path"], eval_metrics=obj["metrics"])
            )
    chosen = select_checkpoint(metas, args.metric)
    print(
        json.dumps(
            {"step": chosen.step, "path": chosen.path,
             args.metric: chosen.eval_metrics[args.metric]}
        )
    )
    return 0


def cmd_study(args: argparse.Namespace) -> int:
    from .evaluate import EvalData

    metas = _load_run_checkpoints(args.run)
    tokenizer = Tokenizer.load(args.run / "tokenizer.txt")
    vocab = RelationVocab.load(args.run / "relations.txt")
    data = load_eval_data(args.data)
    dev_records, test_records = split_dev_test(data.records)
    dev_ids = {r.id for r in dev_records}
    dev = EvalData(
        records=dev_records,
        foils=[f for f in data.foils if f.image_id in dev_ids],
        vsr_items=[i for i in data.vsr_items if i.image_id in dev_ids],
    )
    test = EvalData(
        records=test_records,
        foils=[f for f in data.foils if f.image_id not in dev_ids],
        vsr_items=[i for i in data.vsr_items if i.image_id not in dev_ids],
    )

    test_cache: dict[int, dict[str, float]] = {}
    for meta in metas:
        model = load_checkpoint(Path(meta.path))
        meta.eval_metrics = checkpoint_metrics(model, tokenizer, vocab, dev)
        test_cache[meta.step] = checkpoint_metrics(model, tokenizer, vocab, test)

    with (args.run / "evals.jsonl").open("w", encoding="utf-8") as fh:
        for meta in metas:
            fh.write(
                json.dumps({"step": meta.step, "path": meta.path, "metrics": meta.eval_metrics})
                + "\n"
            )

    metric_names = sorted(metas[0].eval_metrics)
    study = SelectionStudy(reference=args.reference)
    reference_series = [m.eval_metrics[args.reference] for m in metas]
    for metric in metric_names:
        chosen = select_checkpoint(metas, metric)
        study.strategies.append({"metric": metric, "step": chosen.step})
        study.cross_matrix[metric] = test_cache[chosen.step]
        series = [m.eval_metrics[metric] for m in metas]
        if len(metas) >= 2:
            try:
                study.spearman[metric] = spearman(series, reference_series)
            except EvalError:
                study.spearman[metric] = float("nan")

    out = args.out or (args.run / "study.json")
    out.write_text(json.dumps(study.to_dict(), indent=2) + "\n", encoding="utf-8")
    csv_path = out.with_suffix(".csv")
    with csv_path.open("w", encoding="utf-8") as fh:
        fh.write("step,metric,value\n")
        for meta in metas:
            for metric in metric_names:
                fh.write(f"{meta.step},{metric},{meta.eval_metrics[metric]}\n")
    print(json.dumps({"study": str(out), "csv": str(csv_path), "checkpoints": len(metas)}))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "verbalise": cmd_verbalise,
    "mask": cmd_mask,
    "train": cmd_train,
    "eval": cmd_eval,
    "select": cmd_select,
    "study": cmd_study,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("RGVP_LOG", "INFO"))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except KNOWN_ERRORS as exc:
        print(f"error class={type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
