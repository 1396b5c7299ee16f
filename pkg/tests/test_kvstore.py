import json

import numpy as np
import pytest

from clusterattn.clustering import build_index
from clusterattn.errors import FormatError, InvariantError
from clusterattn.kvstore import INDEX_MAGIC, KeyStore, load_index, load_tensors, save_index, save_tensors


def _store(calib=True, seed=0):
    rng = np.random.default_rng(seed)
    k = rng.normal(size=(2, 3, 64, 8)).astype(np.float32)
    v = rng.normal(size=k.shape).astype(np.float32)
    q = rng.normal(size=(2, 3, 5, 8)).astype(np.float32) if calib else None
    return KeyStore(k, v, q)


@pytest.mark.parametrize("calib", [True, False])
def test_tensor_roundtrip(tmp_path, calib):
    s = _store(calib)
    save_tensors(s, tmp_path / "h.json", tmp_path / "b.bin")
    assert load_tensors(tmp_path / "h.json", tmp_path / "b.bin") == s
    assert (tmp_path / "b.bin").stat().st_size == 4 * (2 * s.keys.size + (s.calib_queries.size if calib else 0))


def test_keystore_invariants():
    s = _store()
    assert (s.num_layers, s.num_heads, s.seq_len, s.head_dim) == (2, 3, 64, 8)
    assert list(s.heads())[:2] == [(0, 0), (0, 1)]
    with pytest.raises(InvariantError):
        KeyStore(s.keys, s.values[:, :, :10])
    with pytest.raises(InvariantError):
        KeyStore(s.keys[0], s.values[0])
    with pytest.raises(InvariantError):
        KeyStore(s.keys, s.values, s.calib_queries[..., :4])


def _write(tmp_path, header, blob: bytes):
    (tmp_path / "h.json").write_text(json.dumps(header))
    (tmp_path / "b.bin").write_bytes(blob)
    return tmp_path / "h.json", tmp_path / "b.bin"


def _header(**kw):
    h = {"num_layers": 1, "num_heads": 1, "head_dim": 2, "seq_len": 3, "dtype": "f32",
         "layout": "layer,head,token,dim", "tensors": ["keys", "values"]}
    h.update(kw)
    return h


def test_tensor_format_errors_name_the_field(tmp_path):
    good = np.zeros(12, dtype="<f4").tobytes()
    with pytest.raises(FormatError, match="size mismatch"):
        load_tensors(*_write(tmp_path, _header(), good[:-4]))
    with pytest.raises(FormatError, match="dtype"):
        load_tensors(*_write(tmp_path, _header(dtype="f16"), good))
    with pytest.raises(FormatError, match="head_dim"):
        load_tensors(*_write(tmp_path, _header(head_dim=0), good))
    with pytest.raises(FormatError, match="layout"):
        load_tensors(*_write(tmp_path, _header(layout="token,dim"), good))
    bad = np.zeros(12, dtype="<f4")
    bad[7] = np.nan
    with pytest.raises(FormatError, match="'values'"):
        load_tensors(*_write(tmp_path, _header(), bad.tobytes()))
    (tmp_path / "h.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_tensors(tmp_path / "h.json", tmp_path / "b.bin")


def test_index_roundtrip_is_byte_stable(tmp_path):
    s = _store()
    idx = build_index(s, [0.05, 0.25], seed=1)
    save_index(idx, tmp_path / "a.idx")
    back = load_index(tmp_path / "a.idx")
    assert back == idx
    save_index(back, tmp_path / "b.idx")
    assert (tmp_path / "a.idx").read_bytes() == (tmp_path / "b.idx").read_bytes()
    assert (tmp_path / "a.idx").read_bytes()[:8] == INDEX_MAGIC


def test_index_corruption(tmp_path):
    s = _store()
    idx = build_index(s, [0.25], seed=1)
    save_index(idx, tmp_path / "a.idx")
    data = bytearray((tmp_path / "a.idx").read_bytes())

    def load(blob):
        (tmp_path / "x.idx").write_bytes(bytes(blob))
        return load_index(tmp_path / "x.idx")

    with pytest.raises(FormatError, match="magic"):
        load(b"NOTANIDX" + data[8:])
    with pytest.raises(FormatError, match="truncated"):
        load(data[:-3])
    with pytest.raises(FormatError, match="trailing"):
        load(data + b"\0\0\0\0")
    # first member id of the first head's only level: offset past header, n_levels, c, centroids, sizes
    c = idx[0, 0].finest.c
    off = 8 + 16 + 4 + 4 + 4 * c * 8 + 4 * c
    dup = bytearray(data)
    dup[off:off + 4] = data[off + 4:off + 8]
    with pytest.raises(InvariantError):
        load(dup)
    oob = bytearray(data)
    oob[off:off + 4] = np.uint32(10_000).tobytes()
    with pytest.raises(InvariantError):
        load(oob)
