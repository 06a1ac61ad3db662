import numpy as np
import pytest

from fedretina.errors import ShapeError
from fedretina.tensor_utils import ParameterSet


def make_set(offset=0.0, dtype=np.float32):
    return ParameterSet([
        ("00.dense.weight", np.arange(6, dtype=dtype).reshape(2, 3) + offset),
        ("00.dense.bias", np.zeros(3, dtype=dtype) + offset),
    ])


def test_names_keep_insertion_order():
    params = make_set()
    assert params.names == ["00.dense.weight", "00.dense.bias"]
    assert len(params) == 2
    assert params.num_elements() == 9


def test_duplicate_names_rejected():
    with pytest.raises(ShapeError):
        ParameterSet([("a", np.zeros(1)), ("a", np.ones(1))])


def test_integer_tensors_rejected():
    with pytest.raises(ShapeError):
        ParameterSet([("a", np.zeros(2, dtype=np.int32))])


def test_equality_is_bitwise():
    assert make_set() == make_set()
    assert make_set() != make_set(offset=1e-7)
    assert make_set() != make_set(dtype=np.float64)


def test_copy_is_independent():
    params = make_set()
    clone = params.copy()
    clone["00.dense.bias"][0] = 5.0
    assert params["00.dense.bias"][0] == 0.0


def test_check_aligned_names_the_tensor():
    other = ParameterSet([("00.dense.weight", np.zeros((3, 2), np.float32)),
                          ("00.dense.bias", np.zeros(3, np.float32))])
    with pytest.raises(ShapeError, match="00.dense.weight"):
        make_set().check_aligned(other)


def test_checksum_tracks_content():
    assert make_set().checksum() == make_set().checksum()
    assert make_set().checksum() != make_set(offset=1.0).checksum()
    assert len(make_set().checksum()) == 64


def test_split_inverts_concat():
    a, b = make_set(), ParameterSet([("01.batchnorm.running_mean", np.zeros(3, np.float32))])
    head, tail = a.concat(b).split(len(a))
    assert head == a and tail == b


def test_all_finite():
    assert make_set().all_finite()
    bad = ParameterSet([("x", np.array([1.0, np.nan]))])
    assert not bad.all_finite()
