import json

import numpy as np
import pytest

from rgvp.data import (
    CorpusStats,
    DataError,
    EntityBox,
    ImageRecord,
    RelationTriplet,
    RelationVocab,
    build_relation_vocab,
    corpus_stats,
    load_dataset,
    normalize_label,
    read_raw_image,
    relation_counts,
    save_dataset,
    write_raw_image,
)
from conftest import make_record


def write_jsonl(path, objects):
    path.write_text("".join(json.dumps(o) + "\n" for o in objects), encoding="utf-8")


def record_json(tmp_path, record_id="r1", bbox=(2, 2, 10, 10), width=16, height=16):
    image_rel = f"{record_id}.p6r"
    pixels = np.zeros((height, width, 3), dtype=np.uint8)
    write_raw_image(tmp_path / image_rel, pixels, comment=record_id)
    return {
        "id": record_id,
        "width": width,
        "height": height,
        "image": image_rel,
        "captions": ["a thing"],
        "entities": [{"label": "Thing  One", "bbox": list(bbox)}],
        "triplets": [],
    }


class TestLoadDataset:
    def test_empty_file_gives_empty_list(self, tmp_path):
        path = tmp_path / "data.jsonl"
        path.write_text("")
        assert load_dataset(path) == []

    def test_single_record_round_trip(self, tmp_path):
        path = tmp_path / "data.jsonl"
        write_jsonl(path, [record_json(tmp_path)])
        records = load_dataset(path)
        assert len(records) == 1
        assert records[0].id == "r1"
        assert records[0].entities[0].label == "thing one"  # normalized at load

    def test_invalid_bbox_names_record(self, tmp_path):
        path = tmp_path / "data.jsonl"
        write_jsonl(path, [record_json(tmp_path, record_id="bad", bbox=(10, 2, 10, 12))])
        with pytest.raises(DataError, match="bad"):
            load_dataset(path)

    def test_malformed_json_names_line(self, tmp_path):
        path = tmp_path / "data.jsonl"
        valid = record_json(tmp_path)
        path.write_text(json.dumps(valid) + "\n{not json\n", encoding="utf-8")
        with pytest.raises(DataError, match="line 2"):
            load_dataset(path)

    def test_limit(self, tmp_path):
        path = tmp_path / "data.jsonl"
        write_jsonl(path, [record_json(tmp_path, f"r{i}") for i in range(5)])
        assert len(load_dataset(path, limit=3)) == 3

    def test_no_annotations_rejected(self, tmp_path):
        path = tmp_path / "data.jsonl"
        obj = record_json(tmp_path)
        obj["captions"] = []
        obj["entities"] = []
        write_jsonl(path, [obj])
        with pytest.raises(DataError, match="no annotations"):
            load_dataset(path)

    def test_triplet_self_loop_rejected(self, tmp_path):
        path = tmp_path / "data.jsonl"
        obj = record_json(tmp_path)
        obj["triplets"] = [{"s": 0, "r": "beside", "o": 0}]
        write_jsonl(path, [obj])
        with pytest.raises(DataError, match="subject == object"):
            load_dataset(path)


class TestRoundTrip:
    def test_save_load_identity(self, tmp_path, corpus):
        path = tmp_path / "copy.jsonl"
        save_dataset(corpus[:5], path)
        reloaded = load_dataset(path)
        assert len(reloaded) == 5
        for a, b in zip(corpus[:5], reloaded):
            assert a.id == b.id
            assert a.captions == b.captions
            assert a.entities == b.entities
            assert a.triplets == b.triplets
            np.testing.assert_array_equal(a.pixels, b.pixels)


class TestRawImage:
    def test_round_trip(self, tmp_path):
        pixels = (np.arange(4 * 6 * 3).reshape(4, 6, 3) % 256).astype(np.uint8)
        write_raw_image(tmp_path / "x.p6r", pixels)
        back = read_raw_image(tmp_path / "x.p6r")
        np.testing.assert_array_equal(np.rint(back * 255).astype(np.uint8), pixels)

    def test_header_is_six_lines(self, tmp_path):
        write_raw_image(tmp_path / "x.p6r", np.zeros((2, 2, 3), dtype=np.uint8), comment="c")
        blob = (tmp_path / "x.p6r").read_bytes()
        header, _, _ = blob.partition(b"255\n")
        assert (header + b"255\n").count(b"\n") == 6

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.p6r").write_bytes(b"P6\n# c\n2\n2\n3\n255\n" + b"\0" * 12)
        with pytest.raises(DataError, match="magic"):
            read_raw_image(tmp_path / "x.p6r")

    def test_truncated_pixels(self, tmp_path):
        (tmp_path / "x.p6r").write_bytes(b"P6R\n# c\n2\n2\n3\n255\n" + b"\0" * 5)
        with pytest.raises(DataError, match="pixel bytes"):
            read_raw_image(tmp_path / "x.p6r")


def corpus_with_relations(counts):
    entities = [EntityBox("a a", 0, 0, 4, 4), EntityBox("b b", 8, 8, 12, 12)]
    triplets = []
    for rel, n in counts.items():
        triplets.extend([RelationTriplet(0, rel, 1)] * n)
    return [
        make_record("rc", size=16, captions=["x"], entities=entities, triplets=triplets)
    ]


class TestRelationVocab:
    def test_frequency_ranking(self):
        records = corpus_with_relations({"on": 5, "left of": 3, "under": 1})
        vocab = build_relation_vocab(records, 2)
        assert vocab.entries == ("on", "left of")

    def test_lexicographic_tie_break(self):
        records = corpus_with_relations({"b": 2, "a": 2})
        vocab = build_relation_vocab(records, 1)
        assert vocab.entries == ("a",)

    def test_oov_bucket(self):
        vocab = build_relation_vocab(corpus_with_relations({"on": 1}), 4)
        assert vocab.size == 1
        assert vocab.index_of("on") == 0
        assert vocab.index_of("never seen") == vocab.oov_index == 1
        assert vocab.n_classes == 2

    def test_zero_triplets_errors(self):
        record = make_record("nt", triplets=())
        with pytest.raises(DataError, match="zero triplets"):
            build_relation_vocab([record], 4)

    def test_paper_scale_vocab_is_310(self):
        # a corpus with 310 distinct relation strings yields V = 310
        counts = {f"rel_{i:03d}": 1 + (i % 3) for i in range(310)}
        records = corpus_with_relations(counts)
        assert corpus_stats(records).n_distinct_relations == 310
        assert build_relation_vocab(records, 310).size == 310

    def test_deterministic_file(self, tmp_path, corpus):
        v1 = build_relation_vocab(corpus, 8)
        v2 = build_relation_vocab(list(corpus), 8)
        v1.save(tmp_path / "a.txt")
        v2.save(tmp_path / "b.txt")
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
        assert RelationVocab.load(tmp_path / "a.txt") == v1


class TestCorpusStats:
    def test_empty(self):
        assert corpus_stats([]) == CorpusStats(0, 0, 0, 0, 0)

    def test_direct_counts(self):
        record = make_record(
            "s1",
            captions=("one", "two"),
            entities=(
                EntityBox("a a", 0, 0, 4, 4),
                EntityBox("b b", 8, 8, 12, 12),
                EntityBox("c c", 20, 20, 30, 30),
            ),
            triplets=(RelationTriplet(0, "above", 1), RelationTriplet(1, "below", 0)),
        )
        stats = corpus_stats([record])
        assert (stats.n_images, stats.n_captions, stats.n_entities, stats.n_triplets) == (
            1, 2, 3, 2,
        )
        assert stats.n_distinct_relations <= 2

    def test_per_relation_counts_sum_to_total(self, corpus):
        counts = relation_counts(corpus)
        assert sum(counts.values()) == corpus_stats(corpus).n_triplets


def test_normalize_label():
    assert normalize_label("  Red\t Circle ") == "red circle"
