"""Deterministic generator of fully-annotated toy scenes.

Each scene is a 64x64 canvas with 2-4 filled shapes (circle/square/triangle in
an 8-colour palette) on a black background. Every object gets a tight bbox and
the label "<colour> <shape>"; relation triplets are derived from bbox geometry
under strict rules so an independent verifier can recompute them:

    left of        a.xmax <= b.xmin
    right of       a.xmin >= b.xmax
    above          a.ymax <= b.ymin and x-projections overlap by >= 1 px
    below          a.ymin >= b.ymax and x-projections overlap by >= 1 px
    overlapping    intersection area > 0 and neither box contains the other
    inside         a strictly within b on all four sides
    same row as    each centre-y lies within the other box's y-range
    same column as each centre-x lies within the other box's x-range

Captions use the closed template "a <colour> <shape> <relation> a <colour>
<shape>". Foils edit a caption by exactly one move: swapping the relation for
one that is geometrically false (relation_swap) or swapping the object entity
for a descriptor absent from the scene (entity_swap).
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import EntityBox, ImageRecord, RelationTriplet, save_dataset

COLORS: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 90, 230),
    "yellow": (235, 220, 50),
    "cyan": (60, 220, 220),
    "magenta": (220, 60, 210),
    "orange": (240, 150, 40),
    "white": (245, 245, 245),
}
SHAPES = ("circle", "square", "triangle")

RELATIONS = (
    "left of",
    "right of",
    "above",
    "below",
    "overlapping",
    "inside",
    "same row as",
    "same column as",
)


def _x_overlap(a: EntityBox, b: EntityBox) -> float:
    return min(a.xmax, b.xmax) - max(a.xmin, b.xmin)


def _y_overlap(a: EntityBox, b: EntityBox) -> float:
    return min(a.ymax, b.ymax) - max(a.ymin, b.ymin)


def _inside(a: EntityBox, b: EntityBox) -> bool:
    return b.xmin < a.xmin and a.xmax < b.xmax and b.ymin < a.ymin and a.ymax < b.ymax


def _overlapping(a: EntityBox, b: EntityBox) -> bool:
    positive = _x_overlap(a, b) > 0 and _y_overlap(a, b) > 0
    return positive and not _inside(a, b) and not _inside(b, a)


RELATION_PREDICATES: dict[str, Callable[[EntityBox, EntityBox], bool]] = {
    "left of": lambda a, b: a.xmax <= b.xmin,
    "right of": lambda a, b: a.xmin >= b.xmax,
    "above": lambda a, b: a.ymax <= b.ymin and _x_overlap(a, b) >= 1,
    "below": lambda a, b: a.ymin >= b.ymax and _x_overlap(a, b) >= 1,
    "overlapping": _overlapping,
    "inside": _inside,
    "same row as": lambda a, b: (b.ymin <= a.center[1] <= b.ymax)
    and (a.ymin <= b.center[1] <= a.ymax),
    "same column as": lambda a, b: (b.xmin <= a.center[0] <= b.xmax)
    and (a.xmin <= b.center[0] <= a.xmax),
}


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    xmin: int
    ymin: int
    xmax: int
    ymax: int

    @property
    def label(self) -> str:
        return f"{self.color} {self.shape}"

    @property
    def box(self) -> EntityBox:
        return EntityBox(self.label, self.xmin, self.ymin, self.xmax, self.ymax)


@dataclass
class SceneSpec:
    canvas: int
    objects: list[SceneObject]
    relations: list[RelationTriplet] = field(default_factory=list)


@dataclass(frozen=True)
class FoilPair:
    image_id: str
    positive: str
    foil: str
    foil_type: str  # relation_swap | entity_swap


@dataclass(frozen=True)
class VsrItem:
    image_id: str
    sentence: str
    label: bool


@dataclass(frozen=True)
class SynthConfig:
    canvas: int = 64
    min_objects: int = 2
    max_objects: int = 4
    min_side: int = 12
    max_side: int = 26
    nested_prob: float = 0.15
    overlap_prob: float = 0.15
    align_prob: float = 0.3
    max_captions: int = 3


def scene_relations(objects: Sequence[SceneObject]) -> list[RelationTriplet]:
    """All geometrically true relations over ordered object pairs."""
    triplets = []
    for i, a in enumerate(objects):
        for j, b in enumerate(objects):
            if i == j:
                continue
            for rel, pred in RELATION_PREDICATES.items():
                if pred(a.box, b.box):
                    triplets.append(RelationTriplet(i, rel, j))
    return triplets


def _place_free(
    rng: random.Random, placed: list[SceneObject], side: int, canvas: int, align_prob: float
) -> Optional[tuple[int, int]]:
    """Random non-overlapping placement; occasionally aligns centres with an
    earlier object so same-row/column relations occur."""
    for _ in range(60):
        x = rng.randrange(0, canvas - side + 1)
        y = rng.randrange(0, canvas - side + 1)
        if placed and rng.random() < align_prob:
            other = rng.choice(placed)
            if rng.random() < 0.5:
                y = int((other.ymin + other.ymax) // 2 - side // 2)
            else:
                x = int((other.xmin + other.xmax) // 2 - side // 2)
            x = min(max(x, 0), canvas - side)
            y = min(max(y, 0), canvas - side)
        candidate = (x, y, x + side, y + side)
        clear = all(
            min(candidate[2], o.xmax) - max(candidate[0], o.xmin) <= 0
            or min(candidate[3], o.ymax) - max(candidate[1], o.ymin) <= 0
            for o in placed
        )
        if clear:
            return x, y
    return None


def make_scene(rng: random.Random, config: SynthConfig = SynthConfig()) -> SceneSpec:
    n = rng.randint(config.min_objects, config.max_objects)
    descriptors = rng.sample([(c, s) for c in COLORS for s in SHAPES], n)
    objects: list[SceneObject] = []

    mode_roll = rng.random()
    if mode_roll < config.nested_prob and n >= 2:
        # one nested pair: big first, small strictly inside
        big_side = rng.randrange(32, 45, 2)
        bx = rng.randrange(0, config.canvas - big_side + 1)
        by = rng.randrange(0, config.canvas - big_side + 1)
        color, shape = descriptors[0]
        objects.append(SceneObject("square", color, bx, by, bx + big_side, by + big_side))
        small_side = rng.randrange(config.min_side, big_side - 8, 2)
        sx = rng.randrange(bx + 2, bx + big_side - small_side - 1)
        sy = rng.randrange(by + 2, by + big_side - small_side - 1)
        color2, shape2 = descriptors[1]
        objects.append(SceneObject(shape2, color2, sx, sy, sx + small_side, sy + small_side))
        rest = descriptors[2:]
    elif mode_roll < config.nested_prob + config.overlap_prob and n >= 2:
        # one partially overlapping pair
        side = rng.randrange(16, 27, 2)
        x = rng.randrange(0, config.canvas - 2 * side)
        y = rng.randrange(0, config.canvas - 2 * side)
        color, shape = descriptors[0]
        objects.append(SceneObject(shape, color, x, y, x + side, y + side))
        dx = rng.randrange(4, side - 2)
        dy = rng.randrange(4, side - 2)
        color2, shape2 = descriptors[1]
        objects.append(
            SceneObject(shape2, color2, x + dx, y + dy, x + dx + side, y + dy + side)
        )
        rest = descriptors[2:]
    else:
        rest = descriptors

    for color, shape in rest:
        side = rng.randrange(config.min_side, config.max_side + 1, 2)
        spot = _place_free(rng, objects, side, config.canvas, config.align_prob)
        if spot is None:
            continue
        x, y = spot
        objects.append(SceneObject(shape, color, x, y, x + side, y + side))

    return SceneSpec(config.canvas, objects, scene_relations(objects))


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Rasterize filled shapes (draw order = object order) on black, uint8 HxWx3."""
    canvas = np.zeros((spec.canvas, spec.canvas, 3), dtype=np.uint8)
    ys, xs = np.mgrid[0 : spec.canvas, 0 : spec.canvas]
    for obj in spec.objects:
        rgb = COLORS[obj.color]
        if obj.shape == "square":
            mask = (xs >= obj.xmin) & (xs < obj.xmax) & (ys >= obj.ymin) & (ys < obj.ymax)
        elif obj.shape == "circle":
            cx = (obj.xmin + obj.xmax) / 2.0
            cy = (obj.ymin + obj.ymax) / 2.0
            r = (obj.xmax - obj.xmin) / 2.0
            mask = (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= r * r
        else:  # triangle: apex top-centre, base bottom
            h = obj.ymax - obj.ymin
            w = obj.xmax - obj.xmin
            cx = (obj.xmin + obj.xmax) / 2.0
            frac = (ys + 0.5 - obj.ymin) / h
            half = frac * (w / 2.0)
            mask = (
                (ys >= obj.ymin)
                & (ys < obj.ymax)
                & (np.abs(xs + 0.5 - cx) <= half)
            )
        canvas[mask] = rgb
    return canvas


def caption_for(
    triplet: RelationTriplet, objects: Sequence[SceneObject]
) -> str:
    return (
        f"a {objects[triplet.subject].label} {triplet.relation} "
        f"a {objects[triplet.object].label}"
    )


def _false_relations(a: EntityBox, b: EntityBox, exclude: str) -> list[str]:
    return [
        rel
        for rel in RELATIONS
        if rel != exclude and not RELATION_PREDICATES[rel](a, b)
    ]


def build_scene_annotations(
    spec: SceneSpec, image_id: str, rng: random.Random, config: SynthConfig
) -> tuple[list[str], list[FoilPair], list[VsrItem]]:
    """Captions, foils and VSR-style items for one scene."""
    if not spec.relations:
        return [], [], []
    n_captions = rng.randint(1, min(config.max_captions, len(spec.relations)))
    caption_triplets = rng.sample(spec.relations, n_captions)
    captions = [caption_for(t, spec.objects) for t in caption_triplets]

    foils: list[FoilPair] = []
    vsr: list[VsrItem] = []
    t0 = caption_triplets[0]
    positive = captions[0]
    subj, obj = spec.objects[t0.subject], spec.objects[t0.object]

    false_rels = _false_relations(subj.box, obj.box, t0.relation)
    if false_rels:
        wrong = rng.choice(false_rels)
        foil = f"a {subj.label} {wrong} a {obj.label}"
        foils.append(FoilPair(image_id, positive, foil, "relation_swap"))
        vsr.append(VsrItem(image_id, positive, True))
        vsr.append(VsrItem(image_id, foil, False))

    present = {(o.color, o.shape) for o in spec.objects}
    absent = [(c, s) for c in COLORS for s in SHAPES if (c, s) not in present]
    if absent:
        color, shape = rng.choice(absent)
        foil = f"a {subj.label} {t0.relation} a {color} {shape}"
        foils.append(FoilPair(image_id, positive, foil, "entity_swap"))

    return captions, foils, vsr


def _scene_rng(seed: int, index: int) -> random.Random:
    digest = hashlib.sha256(f"{seed}/{index}".encode()).hexdigest()
    return random.Random(int(digest[:16], 16))


def generate(
    n_images: int,
    seed: int,
    out_dir: Path | str,
    config: SynthConfig = SynthConfig(),
) -> tuple[list[ImageRecord], list[FoilPair], list[VsrItem]]:
    """Generate a corpus and write dataset.jsonl, foils.jsonl, vsr.jsonl under out_dir.

    Output is byte-identical for a fixed (n_images, seed, config).
    """
    if n_images < 1:
        raise ValueError(f"n_images must be >= 1, got {n_images}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records: list[ImageRecord] = []
    all_foils: list[FoilPair] = []
    all_vsr: list[VsrItem] = []
    index = 0
    while len(records) < n_images:
        rng = _scene_rng(seed, index)
        index += 1
        spec = make_scene(rng, config)
        if len(spec.objects) < 2 or not spec.relations:
            continue
        image_id = f"scene_{seed}_{len(records):06d}"
        captions, foils, vsr = build_scene_annotations(spec, image_id, rng, config)
        if not captions or not foils:
            continue
        pixels = render_scene(spec).astype(np.float32) / 255.0
        record = ImageRecord(
            id=image_id,
            width=spec.canvas,
            height=spec.canvas,
            pixels=pixels,
            captions=captions,
            entities=[o.box for o in spec.objects],
            triplets=list(spec.relations),
        )
        record.validate()
        records.append(record)
        all_foils.extend(foils)
        all_vsr.extend(vsr)

    save_dataset(records, out_dir / "dataset.jsonl")
    with (out_dir / "foils.jsonl").open("w", encoding="utf-8") as fh:
        for f in all_foils:
            fh.write(
                json.dumps(
                    {
                        "image_id": f.image_id,
                        "positive": f.positive,
                        "foil": f.foil,
                        "foil_type": f.foil_type,
                    }
                )
                + "\n"
            )
    with (out_dir / "vsr.jsonl").open("w", encoding="utf-8") as fh:
        for item in all_vsr:
            fh.write(
                json.dumps(
                    {"image_id": item.image_id, "sentence": item.sentence, "label": item.label}
                )
                + "\n"
            )
    return records, all_foils, all_vsr


def load_foils(path: Path | str) -> list[FoilPair]:
    items = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            obj = json.loads(line)
            items.append(FoilPair(obj["image_id"], obj["positive"], obj["foil"], obj["foil_type"]))
    return items


def load_vsr_items(path: Path | str) -> list[VsrItem]:
    items = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            obj = json.loads(line)
            items.append(VsrItem(obj["image_id"], obj["sentence"], bool(obj["label"])))
    return items


def verify_scene(record: ImageRecord) -> list[str]:
    """Recompute every triplet's relation from bbox geometry; return mismatches."""
    violations = []
    for t in record.triplets:
        pred = RELATION_PREDICATES.get(t.relation)
        if pred is None:
            violations.append(f"{record.id}: unknown relation {t.relation!r}")
            continue
        if not pred(record.entities[t.subject], record.entities[t.object]):
            violations.append(
                f"{record.id}: '{record.entities[t.subject].label}' {t.relation} "
                f"'{record.entities[t.object].label}' is geometrically false"
            )
    return violations
