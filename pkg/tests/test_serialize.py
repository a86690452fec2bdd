import struct

import numpy as np
import pytest

from tfd.serialize import (
    CheckpointError,
    load_checkpoint,
    load_tensor,
    save_checkpoint,
    save_tensor,
    tensor_from_bytes,
    tensor_to_bytes,
)
from tfd.tensor import Tensor


def test_header_layout():
    buf = tensor_to_bytes(np.arange(6.0).reshape(1, 1, 2, 3))
    assert struct.unpack("<4I", buf[:16]) == (1, 1, 2, 3)
    assert len(buf) == 16 + 6 * 8
    assert struct.unpack("<d", buf[16 + 8:16 + 16])[0] == 1.0


@pytest.mark.parametrize("shape", [(2, 3, 4, 5), (7,), (3, 3), (1, 1, 1, 1)])
def test_round_trip(tmp_path, rng, shape):
    arr = rng.normal(size=shape)
    save_tensor(tmp_path / "t.bin", Tensor(arr))
    np.testing.assert_array_equal(load_tensor(tmp_path / "t.bin", shape), arr)


def test_float32_stored_as_double(rng):
    arr = rng.normal(size=(2, 2)).astype(np.float32)
    assert tensor_from_bytes(tensor_to_bytes(arr)).dtype == np.float64


def test_truncated():
    with pytest.raises(ValueError):
        tensor_from_bytes(tensor_to_bytes(np.ones(4))[:-3])


def test_shape_mismatch_on_load(tmp_path):
    save_tensor(tmp_path / "t.bin", np.ones((2, 3)))
    with pytest.raises(ValueError):
        load_tensor(tmp_path / "t.bin", (3, 2))


class TestCheckpoint:
    @pytest.fixture
    def params(self, rng):
        return {"a.kernel": Tensor(rng.normal(size=(3, 3, 2, 4))), "a.bias": Tensor(np.zeros(4))}

    def test_round_trip_with_extra(self, tmp_path, params):
        save_checkpoint(tmp_path, params, {"model_config": {"n": 2}})
        loaded = load_checkpoint(tmp_path, {k: v.shape for k, v in params.items()})
        for k in params:
            np.testing.assert_array_equal(loaded[k], params[k].data)

    def test_rejects_shape_mismatch(self, tmp_path, params):
        save_checkpoint(tmp_path, params)
        with pytest.raises(CheckpointError, match="a.bias"):
            load_checkpoint(tmp_path, {"a.kernel": (3, 3, 2, 4), "a.bias": (5,)})

    def test_rejects_missing_and_extra(self, tmp_path, params):
        save_checkpoint(tmp_path, params)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path, {"a.kernel": (3, 3, 2, 4)})
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path, {**{k: v.shape for k, v in params.items()}, "b.bias": (1,)})

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path)
