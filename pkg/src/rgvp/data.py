"""Data model and IO for images annotated with captions, entities and relation triplets.

Dataset files are JSONL, one record per line:

    {"id": str, "width": int, "height": int, "image": <path relative to the JSONL>,
     "captions": [str],
     "entities": [{"label": str, "bbox": [xmin, ymin, xmax, ymax]}],
     "triplets": [{"s": int, "r": str, "o": int}]}

Images are stored in a raw uncompressed RGB format with a 6-line ASCII header:

    P6R            <- magic
    # <comment>    <- free-form, usually the record id
    <width>
    <height>
    3              <- channel count
    255            <- max channel value

followed by width*height*3 binary bytes (row-major, RGB interleaved).
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

IMAGE_MAGIC = "P6R"

_WS = re.compile(r"\s+")


class DataError(ValueError):
    """Raised for malformed dataset files or invariant violations."""


def normalize_label(label: str) -> str:
    """Lowercase and collapse whitespace; the canonical form for labels and relations."""
    return _WS.sub(" ", label.strip()).lower()


@dataclass(frozen=True)
class EntityBox:
    """Labelled axis-aligned box in absolute pixel coordinates, origin top-left."""

    label: str
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def validate(self, width: float, height: float, record_id: str = "?") -> None:
        if not normalize_label(self.label):
            raise DataError(f"record {record_id}: entity label is empty")
        if not (0 <= self.xmin < self.xmax <= width):
            raise DataError(
                f"record {record_id}: entity '{self.label}' x-range "
                f"[{self.xmin}, {self.xmax}] invalid for width {width}"
            )
        if not (0 <= self.ymin < self.ymax <= height):
            raise DataError(
                f"record {record_id}: entity '{self.label}' y-range "
                f"[{self.ymin}, {self.ymax}] invalid for height {height}"
            )

    @property
    def center(self) -> tuple[float, float]:
        return ((self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0)

    def normalized(self, width: float, height: float) -> tuple[float, float, float, float]:
        """Box scaled to [0, 1] coordinates."""
        return (self.xmin / width, self.ymin / height, self.xmax / width, self.ymax / height)


@dataclass(frozen=True)
class RelationTriplet:
    """Directed subject--relation--object edge; indices point into a record's entity list."""

    subject: int
    relation: str
    object: int

    def validate(self, n_entities: int, record_id: str = "?") -> None:
        if self.subject == self.object:
            raise DataError(f"record {record_id}: triplet subject == object ({self.subject})")
        for name, idx in (("subject", self.subject), ("object", self.object)):
            if not (0 <= idx < n_entities):
                raise DataError(
                    f"record {record_id}: triplet {name} index {idx} out of range "
                    f"(entities: {n_entities})"
                )
        if not self.relation:
            raise DataError(f"record {record_id}: triplet relation is empty")


@dataclass
class ImageRecord:
    """One image plus all its annotations. Pixels are float32 H x W x 3 in [0, 1]."""

    id: str
    width: int
    height: int
    pixels: np.ndarray
    captions: list[str] = field(default_factory=list)
    entities: list[EntityBox] = field(default_factory=list)
    triplets: list[RelationTriplet] = field(default_factory=list)

    def validate(self) -> None:
        if not self.captions and not self.entities and not self.triplets:
            raise DataError(f"record {self.id}: no annotations (captions/entities/triplets)")
        if self.pixels.shape != (self.height, self.width, 3):
            raise DataError(
                f"record {self.id}: pixel array shape {self.pixels.shape} does not match "
                f"(height, width, 3) = ({self.height}, {self.width}, 3)"
            )
        for entity in self.entities:
            entity.validate(self.width, self.height, self.id)
        for triplet in self.triplets:
            triplet.validate(len(self.entities), self.id)


def write_raw_image(path: Path | str, pixels: np.ndarray, comment: str = "") -> None:
    """Write pixels (H x W x 3, float in [0,1] or uint8) in the documented raw format."""
    path = Path(path)
    if pixels.dtype != np.uint8:
        pixels = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    h, w, c = pixels.shape
    header = f"{IMAGE_MAGIC}\n# {comment}\n{w}\n{h}\n{c}\n255\n"
    path.write_bytes(header.encode("ascii") + pixels.tobytes())


def read_raw_image(path: Path | str) -> np.ndarray:
    """Read a raw image file back as float32 H x W x 3 in [0, 1]."""
    blob = Path(path).read_bytes()
    offset = 0
    lines = []
    for _ in range(6):
        end = blob.find(b"\n", offset)
        if end < 0:
            raise DataError(f"{path}: truncated image header")
        lines.append(blob[offset:end].decode("ascii", errors="replace"))
        offset = end + 1
    if lines[0] != IMAGE_MAGIC:
        raise DataError(f"{path}: bad image magic {lines[0]!r} (expected {IMAGE_MAGIC!r})")
    try:
        w, h, c, maxval = int(lines[2]), int(lines[3]), int(lines[4]), int(lines[5])
    except ValueError as exc:
        raise DataError(f"{path}: malformed image header: {exc}") from exc
    if c != 3 or maxval != 255:
        raise DataError(f"{path}: unsupported channels/maxval {c}/{maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, offset=offset)
    if data.size != w * h * c:
        raise DataError(f"{path}: expected {w * h * c} pixel bytes, found {data.size}")
    return (data.reshape(h, w, c).astype(np.float32)) / 255.0


def _parse_record(obj: dict, base_dir: Path) -> ImageRecord:
    try:
        record_id = str(obj["id"])
        width, height = int(obj["width"]), int(obj["height"])
        image_path = base_dir / obj["image"]
        captions = [str(c) for c in obj.get("captions", [])]
        entities = [
            EntityBox(normalize_label(e["label"]), *map(float, e["bbox"]))
            for e in obj.get("entities", [])
        ]
        triplets = [
            RelationTriplet(int(t["s"]), normalize_label(t["r"]), int(t["o"]))
            for t in obj.get("triplets", [])
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"record {obj.get('id', '?')}: malformed field: {exc}") from exc
    record = ImageRecord(
        id=record_id,
        width=width,
        height=height,
        pixels=read_raw_image(image_path),
        captions=captions,
        entities=entities,
        triplets=triplets,
    )
    record.validate()
    return record


def load_dataset(path: Path | str, limit: Optional[int] = None) -> list[ImageRecord]:
    """Load and validate a JSONL dataset; records are returned in file order."""
    path = Path(path)
    records: list[ImageRecord] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if limit is not None and len(records) >= limit:
                break
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: malformed JSON: {exc.msg}") from exc
            records.append(_parse_record(obj, path.parent))
    return records


def save_dataset(records: Sequence[ImageRecord], path: Path | str) -> None:
    """Write records as JSONL plus raw images under <dir>/images/."""
    path = Path(path)
    image_dir = path.parent / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            rel_image = f"images/{record.id}.p6r"
            write_raw_image(path.parent / rel_image, record.pixels, comment=record.id)
            obj = {
                "id": record.id,
                "width": record.width,
                "height": record.height,
                "image": rel_image,
                "captions": record.captions,
                "entities": [
                    {"label": e.label, "bbox": [e.xmin, e.ymin, e.xmax, e.ymax]}
                    for e in record.entities
                ],
                "triplets": [
                    {"s": t.subject, "r": t.relation, "o": t.object} for t in record.triplets
                ],
            }
            fh.write(json.dumps(obj) + "\n")


@dataclass(frozen=True)
class RelationVocab:
    """Frequency-ranked relation vocabulary; relations outside it map to a reserved
    OUT_OF_VOCAB index equal to len(entries), so classifiers output V+1 classes."""

    entries: tuple[str, ...]

    @property
    def index(self) -> dict[str, int]:
        return {rel: i for i, rel in enumerate(self.entries)}

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def n_classes(self) -> int:
        return len(self.entries) + 1

    @property
    def oov_index(self) -> int:
        return len(self.entries)

    def index_of(self, relation: str) -> int:
        return self.index.get(normalize_label(relation), self.oov_index)

    def save(self, path: Path | str) -> None:
        Path(path).write_text("".join(f"{r}\n" for r in self.entries), encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "RelationVocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(entries=tuple(line for line in lines if line))


def relation_counts(records: Iterable[ImageRecord]) -> Counter:
    counts: Counter = Counter()
    for record in records:
        for triplet in record.triplets:
            counts[triplet.relation] += 1
    return counts


def build_relation_vocab(records: Sequence[ImageRecord], v: int) -> RelationVocab:
    """Top-v relations by corpus frequency, ties broken lexicographically ascending."""
    if v < 1:
        raise DataError(f"vocabulary size must be >= 1, got {v}")
    counts = relation_counts(records)
    if not counts:
        raise DataError("cannot build a relation vocabulary: corpus has zero triplets")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return RelationVocab(entries=tuple(rel for rel, _ in ranked[:v]))


@dataclass(frozen=True)
class CorpusStats:
    n_images: int
    n_captions: int
    n_entities: int
    n_triplets: int
    n_distinct_relations: int

    def to_dict(self) -> dict[str, int]:
        return {
            "images": self.n_images,
            "captions": self.n_captions,
            "entities": self.n_entities,
            "triplets": self.n_triplets,
            "distinct_relations": self.n_distinct_relations,
        }


def corpus_stats(records: Sequence[ImageRecord]) -> CorpusStats:
    counts = relation_counts(records)
    return CorpusStats(
        n_images=len(records),
        n_captions=sum(len(r.captions) for r in records),
        n_entities=sum(len(r.entities) for r in records),
        n_triplets=sum(len(r.triplets) for r in records),
        n_distinct_relations=len(counts),
    )
