import struct

import pytest
import torch

from rgvp.checkpoint import (
    MAGIC,
    VERSION,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from rgvp.losses import pad_tokenized
from rgvp.model import build_model, pixels_to_tensor


@pytest.fixture()
def saved(tmp_path, tiny_model):
    path = tmp_path / "model.rgvp"
    save_checkpoint(tiny_model, path)
    return path


class TestRoundTrip:
    def test_bitwise_parameter_equality(self, saved, tiny_model):
        loaded = load_checkpoint(saved)
        assert loaded.config == tiny_model.config
        state_a, state_b = tiny_model.state_dict(), loaded.state_dict()
        assert state_a.keys() == state_b.keys()
        for key in state_a:
            assert torch.equal(state_a[key], state_b[key]), key

    def test_forward_pass_identical_after_reload(self, saved, tiny_model, tokenizer, corpus):
        loaded = load_checkpoint(saved)
        loaded.eval()
        pixels = pixels_to_tensor([corpus[0].pixels])
        ids = pad_tokenized([tokenizer.encode_caption(corpus[0].captions[0], 36)])
        with torch.no_grad():
            before = tiny_model.forward_pair(pixels, ids).pooled
            after = loaded.forward_pair(pixels, ids).pooled
        assert torch.equal(before, after)

    def test_no_temp_file_left_behind(self, saved):
        assert not saved.with_suffix(saved.suffix + ".tmp").exists()


class TestRejection:
    def test_corrupted_magic(self, saved):
        blob = bytearray(saved.read_bytes())
        blob[:4] = b"JUNK"
        saved.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(saved)

    def test_unknown_version(self, saved):
        blob = bytearray(saved.read_bytes())
        blob[4:8] = struct.pack("<I", VERSION + 7)
        saved.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(saved)

    def test_truncated_file(self, saved):
        blob = saved.read_bytes()
        saved.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(saved)

    def test_trailing_garbage(self, saved):
        saved.write_bytes(saved.read_bytes() + b"extra")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(saved)

    def test_not_a_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "missing.rgvp")


def test_magic_constant():
    assert MAGIC == b"RGVP"
