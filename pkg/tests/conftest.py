import numpy as np
import pytest
import torch

from rgvp.data import EntityBox, ImageRecord, RelationTriplet
from rgvp.model import ModelConfig, build_model
from rgvp.synth import generate
from rgvp.trainer import build_corpus_tokenizer

torch.set_num_threads(2)


def make_record(
    record_id="r0",
    size=64,
    captions=("a red circle above a blue square",),
    entities=(
        EntityBox("red circle", 8, 4, 24, 20),
        EntityBox("blue square", 10, 40, 30, 60),
    ),
    triplets=(RelationTriplet(0, "above", 1),),
):
    rng = np.random.default_rng(abs(hash(record_id)) % (2**32))
    pixels = rng.random((size, size, 3)).astype(np.float32)
    record = ImageRecord(
        id=record_id,
        width=size,
        height=size,
        pixels=pixels,
        captions=list(captions),
        entities=list(entities),
        triplets=list(triplets),
    )
    record.validate()
    return record


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    generate(30, 123, out)
    return out


@pytest.fixture(scope="session")
def corpus(corpus_dir):
    from rgvp.data import load_dataset

    return load_dataset(corpus_dir / "dataset.jsonl")


@pytest.fixture(scope="session")
def tokenizer(corpus):
    return build_corpus_tokenizer(corpus)


@pytest.fixture(scope="session")
def tiny_config(tokenizer):
    return ModelConfig(
        d_model=32,
        n_heads=4,
        depth_vision=1,
        depth_text=1,
        depth_xmodal=1,
        vocab_size=tokenizer.vocab_size,
        proj_dim=16,
        max_text_len=112,
    )


@pytest.fixture()
def tiny_model(tiny_config):
    model = build_model(tiny_config, seed=0)
    model.eval()
    return model
