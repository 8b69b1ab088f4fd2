import struct

import numpy as np
import pytest

from gammt.checkpoint import (MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint,
                              read_checkpoint, save_checkpoint)
from gammt.errors import CheckpointFormatError

from oracles import tiny_config, tiny_model


def _as_stored(w):
    return w.astype("<f4")


def test_round_trip_is_bit_exact_at_float32(tmp_path):
    params = tiny_model(M=2, seed=4)
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, path, {"seed": 4})
    loaded, header = read_checkpoint(path)
    assert header["heads"] == "2" and header["seed"] == "4"
    for a, b in zip(params.heads, loaded.heads):
        assert a.config == b.config
        for k in a.weights:
            assert _as_stored(a.weights[k]).tobytes() == _as_stored(b.weights[k]).tobytes()


def test_second_round_trip_is_identical(tmp_path):
    params = tiny_model(M=1, seed=1)
    first = encode_checkpoint(params)
    again = encode_checkpoint(decode_checkpoint(first)[0])
    assert first == again


def test_layout_starts_with_magic_and_version():
    data = encode_checkpoint(tiny_model(M=1, seed=0))
    assert data[:6] == MAGIC == b"GAMMT\0"
    assert struct.unpack("<I", data[6:10]) == (1,)
    (n,) = struct.unpack("<I", data[10:14])
    header = data[14:14 + n].decode()
    assert "n_vocab=5\n" in header and "tensors=" in header


def test_heterogeneous_heads_round_trip():
    from gammt.ensemble import init_gammt

    params = init_gammt([tiny_config(n_layers=1), tiny_config(n_layers=2, n_heads=4)], 3)
    loaded, header = decode_checkpoint(encode_checkpoint(params))
    assert header["layers"] == "1,2" and header["attn_heads"] == "2,4"
    assert [h.config.n_layers for h in loaded.heads] == [1, 2]


@pytest.mark.parametrize("cut", [0, 3, 8, 13, 40, -1])
def test_truncation_names_an_offset(cut):
    data = encode_checkpoint(tiny_model(M=1, seed=0))
    with pytest.raises(CheckpointFormatError) as info:
        decode_checkpoint(data[:cut] if cut >= 0 else data[:-1])
    assert "byte offset" in str(info.value)
    assert info.value.offset <= len(data)


def test_bad_magic():
    data = bytearray(encode_checkpoint(tiny_model(M=1, seed=0)))
    data[0:1] = b"X"
    with pytest.raises(CheckpointFormatError) as info:
        decode_checkpoint(bytes(data))
    assert info.value.offset == 0


def test_bad_version():
    data = bytearray(encode_checkpoint(tiny_model(M=1, seed=0)))
    data[6:10] = struct.pack("<I", 9)
    with pytest.raises(CheckpointFormatError) as info:
        decode_checkpoint(bytes(data))
    assert "version 9" in str(info.value) and info.value.offset == 6


def test_trailing_tensor_is_rejected():
    data = encode_checkpoint(tiny_model(M=1, seed=0))
    extra = struct.pack("<H", 3) + b"foo" + struct.pack("<BQ", 1, 1) + np.float32(1).tobytes()
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(data + extra)


def test_save_is_atomic_and_leaves_no_temp_files(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model(M=1, seed=0), path)
    save_checkpoint(tiny_model(M=1, seed=1), path)
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]
    assert load_checkpoint(path).n_heads == 1
