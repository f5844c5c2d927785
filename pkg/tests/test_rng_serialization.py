import numpy as np
import pytest
from numpy.testing import assert_array_equal

from numerics.rng import make_rng
from numerics.serialization import BLOB_FILE, MANIFEST_FILE, load_tensors, save_tensors


def test_same_path_gives_same_stream():
    assert_array_equal(make_rng(7, "train", 3).random(5), make_rng(7, "train", 3).random(5))


@pytest.mark.parametrize("other", [(8, "train", 3), (7, "eval", 3), (7, "train", 4), (7,)])
def test_different_paths_give_different_streams(other):
    assert not np.array_equal(make_rng(7, "train", 3).random(5), make_rng(*other).random(5))


def test_negative_labels_are_rejected():
    with pytest.raises(ValueError):
        make_rng(0, -1)


def test_save_and_load_keep_order_shapes_and_bits(tmp_path):
    rng = make_rng(0, "ser")
    tensors = {"b": rng.standard_normal((2, 3)), "a": np.array(1.5), "c": rng.standard_normal(4)}
    save_tensors(str(tmp_path / "ckpt"), tensors)
    assert (tmp_path / "ckpt" / MANIFEST_FILE).exists()
    assert (tmp_path / "ckpt" / BLOB_FILE).stat().st_size == 8 * 11

    loaded = load_tensors(str(tmp_path / "ckpt"))
    assert list(loaded) == ["b", "a", "c"]
    for name, value in tensors.items():
        assert loaded[name].shape == value.shape
        assert_array_equal(loaded[name], value)
