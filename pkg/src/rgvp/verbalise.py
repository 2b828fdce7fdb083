"""Turning scene graphs into structured captions.

Pipeline: sample K triplets -> sort by subject-box centre in raster order
(y, then x, stable on ties) -> verbalise as
"[CLS] subj rel obj [SEP] ... subj rel obj [SEP]", truncating at the last
whole triplet that still fits the token budget.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Sequence

from .data import EntityBox, RelationTriplet
from .tokenizer import CLS, SEP, Tokenizer


class VerbaliseError(ValueError):
    pass


@dataclass(frozen=True)
class VerbaliserConfig:
    k: int = 16
    max_tokens_caption: int = 36
    max_tokens_vsg: int = 112
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise VerbaliseError(f"k must be >= 1, got {self.k}")
        if self.max_tokens_vsg < self.max_tokens_caption:
            raise VerbaliseError("max_tokens_vsg must be >= max_tokens_caption")


@dataclass
class VerbalisedCaption:
    text: str
    source: list[RelationTriplet] = field(default_factory=list)


def sample_triplets(
    graph: Sequence[RelationTriplet], k: int, rng: random.Random
) -> list[RelationTriplet]:
    """min(k, |graph|) distinct triplets, uniform without replacement."""
    if not graph:
        raise VerbaliseError("cannot sample triplets from an empty graph")
    return rng.sample(list(graph), min(k, len(graph)))


def sort_triplets(
    triplets: Sequence[RelationTriplet], entities: Sequence[EntityBox]
) -> list[RelationTriplet]:
    """Ascending raster order of subject-box centres (y, then x); stable on ties."""
    for t in triplets:
        if not 0 <= t.subject < len(entities):
            raise VerbaliseError(f"triplet subject index {t.subject} out of range")

    def key(t: RelationTriplet) -> tuple[float, float]:
        cx, cy = entities[t.subject].center
        return (cy, cx)

    return sorted(triplets, key=key)


def verbalise(
    triplets_sorted: Sequence[RelationTriplet],
    entities: Sequence[EntityBox],
    tokenizer: Tokenizer,
    max_tokens: int = 112,
) -> VerbalisedCaption:
    """Template the sorted triplets; drop whole triplets from the tail once the
    tokenized length would exceed max_tokens."""
    parts = [CLS]
    used: list[RelationTriplet] = []
    total = 1
    for t in triplets_sorted:
        segment = f"{entities[t.subject].label} {t.relation} {entities[t.object].label}"
        cost = tokenizer.count_tokens(segment) + 1
        if total + cost > max_tokens:
            break
        parts.append(f"{segment} {SEP}")
        used.append(t)
        total += cost
    return VerbalisedCaption(text=" ".join(parts), source=used)


def make_vsg_caption(
    graph: Sequence[RelationTriplet],
    entities: Sequence[EntityBox],
    config: VerbaliserConfig,
    tokenizer: Tokenizer,
    rng: random.Random,
) -> VerbalisedCaption:
    sampled = sample_triplets(graph, config.k, rng)
    return verbalise(sort_triplets(sampled, entities), entities, tokenizer, config.max_tokens_vsg)


def parse_vsg(text: str, relations: Sequence[str]) -> list[tuple[str, str, str]]:
    """Recover (subject label, relation, object label) triples from a VSG caption.

    Needs the relation vocabulary to split segments, since labels and relations
    may both span several words; longer relations are matched first.
    """
    by_length = sorted((r.split() for r in relations), key=len, reverse=True)
    triples: list[tuple[str, str, str]] = []
    body = text.strip()
    if body.startswith(CLS):
        body = body[len(CLS):]
    for segment in body.split(SEP):
        words = segment.split()
        if not words:
            continue
        match = None
        for rel_words in by_length:
            n = len(rel_words)
            for start in range(1, len(words) - n + 1):
                if words[start : start + n] == rel_words:
                    match = (start, n)
                    break
            if match:
                break
        if match is None:
            raise VerbaliseError(f"no known relation in segment {segment!r}")
        start, n = match
        triples.append(
            (" ".join(words[:start]), " ".join(words[start : start + n]),
             " ".join(words[start + n :]))
        )
    return triples
