import struct

import numpy as np
import pytest

from mmrl.checkpoint import (
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from mmrl.errors import CheckpointError
from mmrl.model import init_model
from mmrl.numeric.tree import tree_flatten


@pytest.fixture
def model(run_config):
    return init_model(np.random.default_rng(4), run_config.task, run_config.model)


def test_save_load_save_is_byte_identical(model, run_config, tmp_path):
    first = save_checkpoint(tmp_path / "a.mmrl", model, run_config, seed=4, alpha_ema=0.3)
    loaded = load_checkpoint(first)
    second = save_checkpoint(tmp_path / "b.mmrl", loaded.model, loaded.run, **loaded.meta)
    assert first.read_bytes() == second.read_bytes()
    assert loaded.alpha_ema == pytest.approx(0.3)
    assert loaded.run == run_config


def test_arrays_survive_at_float32_precision(model, run_config):
    restored = decode_checkpoint(encode_checkpoint(model, run_config, {}))
    original, back = tree_flatten(model), tree_flatten(restored.model)
    assert set(original) == set(back)
    for name, arr in original.items():
        np.testing.assert_allclose(back[name], arr, rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize(
    "corrupt, message",
    [
        (lambda b: b"XXXX" + b[4:], "bad magic"),
        (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "format version 2"),
        (lambda b: b[:-3], "truncated"),
        (lambda b: b + b"\x00", "trailing bytes"),
    ],
)
def test_corrupt_files_are_rejected(model, run_config, corrupt, message):
    data = encode_checkpoint(model, run_config, {})
    with pytest.raises(CheckpointError, match=message):
        decode_checkpoint(corrupt(data))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="does not exist"):
        load_checkpoint(tmp_path / "nope.mmrl")
