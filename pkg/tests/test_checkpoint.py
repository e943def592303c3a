import numpy as np
import pytest

from gwainet.checkpoint import load_checkpoint, save_checkpoint
from gwainet.networks import init_model, preset
from gwainet.tensor import ValidationError

NANO = preset("nano")


def test_load_save_round_trip_is_byte_identical(tmp_path):
    bundle = init_model(NANO, seed=1)
    bundle.meta["stage"] = "content"
    bundle.meta["mean"] = {"r": 0.25, "g": 0.5, "b": 0.75}
    p1 = tmp_path / "a.gwai"
    p2 = tmp_path / "b.gwai"
    save_checkpoint(bundle, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_round_trip_preserves_values_and_meta(tmp_path):
    bundle = init_model(NANO, seed=2)
    bundle.meta["step"] = 123
    path = tmp_path / "m.gwai"
    save_checkpoint(bundle, path)
    loaded = load_checkpoint(path)
    assert loaded.arch == NANO
    assert loaded.meta["step"] == 123
    assert set(loaded.params) == set(bundle.params)
    for k in bundle.params:
        assert loaded.params[k].dtype == bundle.params[k].dtype
        assert np.array_equal(loaded.params[k].data, bundle.params[k].data)


def test_float64_tensors_round_trip(tmp_path):
    bundle = init_model(NANO, seed=3, dtype=np.float64)
    path = tmp_path / "d.gwai"
    save_checkpoint(bundle, path)
    loaded = load_checkpoint(path)
    assert all(p.dtype == np.float64 for p in loaded.params.values())


def test_crc_corruption_rejected(tmp_path):
    bundle = init_model(NANO, seed=4)
    path = tmp_path / "c.gwai"
    save_checkpoint(bundle, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ValidationError, match="CRC"):
        load_checkpoint(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.gwai"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValidationError, match="not a GWAI"):
        load_checkpoint(path)


def test_missing_parameter_rejected(tmp_path):
    bundle = init_model(NANO, seed=5)
    dropped = dict(bundle.params)
    dropped.pop("gnet.out.w")
    bundle.params = dropped
    path = tmp_path / "x.gwai"
    save_checkpoint(bundle, path)
    with pytest.raises(ValidationError, match="gnet.out.w"):
        load_checkpoint(path)


def test_wrong_shape_rejected(tmp_path):
    bundle = init_model(NANO, seed=6)
    from gwainet.tensor import Tensor
    bundle.params["cnet.fc.b"] = Tensor(np.zeros(2, np.float32))
    path = tmp_path / "y.gwai"
    save_checkpoint(bundle, path)
    with pytest.raises(ValidationError, match="cnet.fc.b"):
        load_checkpoint(path)
