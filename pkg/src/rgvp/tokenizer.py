"""Corpus-built subword tokenizer with whole-word masking support.

Words are split on whitespace, then matched greedily against the vocabulary
(longest prefix first). Special tokens have fixed ids 0..4 and are recognised
literally inside text (VSG captions carry their own [CLS]/[SEP]).
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

CLS, SEP, MASK, PAD, UNK = "[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"
SPECIALS = (CLS, SEP, MASK, PAD, UNK)
CLS_ID, SEP_ID, MASK_ID, PAD_ID, UNK_ID = range(5)


class TokenizerError(ValueError):
    pass


@dataclass
class TokenizedText:
    """Token ids plus word alignment; word_ids[i] is None for special tokens."""

    ids: list[int]
    word_ids: list[Optional[int]]

    def __len__(self) -> int:
        return len(self.ids)


class Tokenizer:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:5]) != SPECIALS:
            raise TokenizerError(f"vocabulary must start with the specials {SPECIALS}")
        self.tokens = list(tokens)
        self.vocab = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.vocab) != len(self.tokens):
            raise TokenizerError("duplicate tokens in vocabulary")
        self._max_piece = max(len(t) for t in self.tokens)

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, texts: Iterable[str], extra_tokens: Sequence[str] = ()) -> "Tokenizer":
        """Build from a corpus: whole words ranked by (frequency desc, lexicographic),
        plus every seen character as a subword fallback."""
        from collections import Counter

        word_counts: Counter = Counter()
        chars: set[str] = set()
        for text in texts:
            for word in text.lower().split():
                if word in SPECIALS:
                    continue
                word_counts[word] += 1
                chars.update(word)
        for word in extra_tokens:
            word = word.lower()
            if word and word not in SPECIALS:
                word_counts[word] += 0 if word in word_counts else 1
                chars.update(word)
        ranked = [w for w, _ in sorted(word_counts.items(), key=lambda kv: (-kv[1], kv[0]))]
        tail = sorted(c for c in chars if c not in word_counts)
        return cls(list(SPECIALS) + ranked + tail)

    def save(self, path: Path | str) -> None:
        Path(path).write_text("".join(f"{t}\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "Tokenizer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line])

    def _encode_word(self, word: str) -> list[int]:
        """Greedy longest-match subword split; unknown characters become [UNK]."""
        ids: list[int] = []
        pos = 0
        while pos < len(word):
            end = min(len(word), pos + self._max_piece)
            while end > pos and word[pos:end] not in self.vocab:
                end -= 1
            if end == pos:
                ids.append(UNK_ID)
                pos += 1
            else:
                ids.append(self.vocab[word[pos:end]])
                pos = end
        return ids

    def encode(self, text: str) -> TokenizedText:
        ids: list[int] = []
        word_ids: list[Optional[int]] = []
        word_index = 0
        for raw in text.split():
            if raw in SPECIALS:
                ids.append(self.vocab[raw])
                word_ids.append(None)
                continue
            for tok_id in self._encode_word(raw.lower()):
                ids.append(tok_id)
                word_ids.append(word_index)
            word_index += 1
        return TokenizedText(ids, word_ids)

    def encode_caption(self, text: str, max_tokens: int) -> TokenizedText:
        """[CLS] <tokens> [SEP], truncated to max_tokens."""
        body = self.encode(text)
        keep = max(0, max_tokens - 2)
        ids = [CLS_ID] + body.ids[:keep] + [SEP_ID]
        word_ids = [None] + body.word_ids[:keep] + [None]
        return TokenizedText(ids, word_ids)

    def decode(self, ids: Sequence[int], skip_pad: bool = True) -> str:
        toks = [self.tokens[i] for i in ids if not (skip_pad and i == PAD_ID)]
        return " ".join(toks)

    def count_tokens(self, text: str) -> int:
        return len(self.encode(text).ids)


def mask_for_mlm(
    tokenized: TokenizedText, mask_ratio: float, rng: random.Random
) -> tuple[list[int], list[int]]:
    """Whole-word masking: select words until >= mask_ratio of non-special tokens
    are covered, replace every token of a selected word with [MASK].

    Returns (masked_ids, masked_positions); original ids at those positions are
    the prediction targets.
    """
    if not 0 < mask_ratio < 1:
        raise TokenizerError(f"mask_ratio must be in (0, 1), got {mask_ratio}")
    word_positions: dict[int, list[int]] = {}
    n_maskable = 0
    for pos, word_id in enumerate(tokenized.word_ids):
        if word_id is None:
            continue
        word_positions.setdefault(word_id, []).append(pos)
        n_maskable += 1
    if not word_positions:
        raise TokenizerError("no maskable words in sequence (specials are never masked)")

    order = sorted(word_positions)
    rng.shuffle(order)
    threshold = mask_ratio * n_maskable
    masked_ids = list(tokenized.ids)
    positions: list[int] = []
    for word_id in order:
        if len(positions) >= threshold:
            break
        for pos in word_positions[word_id]:
            masked_ids[pos] = MASK_ID
            positions.append(pos)
    positions.sort()
    return masked_ids, positions
