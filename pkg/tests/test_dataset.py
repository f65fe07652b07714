import numpy as np
import pytest

from hgnet.dataset import (
    INDEX_NAME, DatasetFormatError, read_dataset, read_shard, write_dataset, write_shard,
)
from hgnet.scenegen import FIELD_NAMES, SceneConfig, simulate_scene

CFG = SceneConfig(num_agents=4, min_agents=2, grid_size=32, history=2, horizon=1)


def test_single_sample_roundtrip(tmp_path):
    s = simulate_scene(3)
    write_dataset([s], tmp_path / "ds")
    (back,) = read_dataset(tmp_path / "ds")
    for name in FIELD_NAMES:
        a, b = getattr(s, name), getattr(back, name)
        assert a.dtype == b.dtype and a.shape == b.shape
        np.testing.assert_array_equal(a, b)


def test_many_samples_keep_order_across_shards(tmp_path):
    samples = [simulate_scene(i, CFG) for i in range(100)]
    shards = write_dataset(samples, tmp_path / "ds", shard_size=16)
    assert len(shards) == 7
    assert (tmp_path / "ds" / INDEX_NAME).read_text().split() == [p.name for p in shards]
    back = read_dataset(tmp_path / "ds")
    assert len(back) == 100
    assert all(a.equals(b) for a, b in zip(samples, back))


def test_wrong_magic(tmp_path):
    path = tmp_path / "bad.hgn"
    write_shard([simulate_scene(0, CFG)], path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError, match="bad.hgn"):
        read_shard(path)


def test_truncated_payload_names_file(tmp_path):
    path = tmp_path / "cut.hgn"
    write_shard([simulate_scene(0, CFG)], path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(DatasetFormatError, match="cut.hgn"):
        read_shard(path)


def test_header_layout(tmp_path):
    path = tmp_path / "one.hgn"
    write_shard([simulate_scene(0, CFG)] * 2, path)
    raw = path.read_bytes()
    assert raw[:4] == b"HGN1"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 2


def test_identical_bytes_for_identical_seed(tmp_path):
    for d in ("a", "b"):
        write_dataset([simulate_scene(i, CFG) for i in range(3)], tmp_path / d)
    assert (tmp_path / "a" / "shard_00000.hgn").read_bytes() == (tmp_path / "b" / "shard_00000.hgn").read_bytes()
