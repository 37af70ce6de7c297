import struct

import numpy as np
import pytest

from centeratt.errors import WeightFileError
from centeratt.tensor import Precision, Tensor, quantize_fp16
from centeratt.weights import dump_weights, load_weights, read_weights, write_weights


def test_header_layout():
    blob = dump_weights({"a": Tensor([1.0, 2.0])})
    assert blob[:4] == b"CATW"
    assert struct.unpack("<II", blob[4:12]) == (1, 1)
    assert struct.unpack("<H", blob[12:14]) == (1,)
    assert blob[14:15] == b"a"
    assert blob[15] == 1 and struct.unpack("<I", blob[16:20]) == (2,)
    assert blob[20] == 0
    assert np.frombuffer(blob[21:], "<f4").tolist() == [1.0, 2.0]


def test_round_trip_mixed_precision(tmp_path, rng):
    store = {
        "conv.weight": Tensor(rng.standard_normal((2, 3, 3, 3))),
        "conv.bias": quantize_fp16(Tensor(rng.standard_normal(2))),
        "scalar": Tensor([7.5]),
    }
    path = tmp_path / "w.catw"
    write_weights(path, store)
    back = read_weights(path)
    assert list(back) == list(store)
    for k in store:
        assert back[k].precision is store[k].precision
        assert back[k].shape == store[k].shape
        np.testing.assert_array_equal(back[k].data, store[k].data)
    assert back["conv.bias"].precision is Precision.FP16E
    assert dump_weights(back) == dump_weights(store)


@pytest.mark.parametrize("blob", [b"", b"XXXX" + bytes(8), dump_weights({"a": Tensor([1.0])})[:-2]])
def test_corrupt_files_raise(blob):
    with pytest.raises(WeightFileError):
        load_weights(blob)
