"""Fixed-context key/value storage and persistence.

Tensor interchange is a JSON header plus a raw little-endian float32 blob laid
out as ``layer, head, token, dim``: the keys tensor, then the values tensor,
then optionally a ``calib_queries`` tensor of shape
``(num_layers, num_heads, calib_window, head_dim)``.

Index files start with the 8-byte magic ``SQZIDX1\\0`` followed by
little-endian u32 fields::

    num_layers num_heads seq_len head_dim
    for each (layer, head), row-major:
        n_levels
        for each level, coarsest first:
            c
            f32 centroids[c * head_dim]
            u32 sizes[c]
            u32 members[sum(sizes)]      concatenated in cluster order
            u32 parents[c]               omitted on the coarsest level
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clustering import ClusterIndex, HierarchicalIndex, IndexSet, validate_hierarchy
from .errors import FormatError, InvariantError

__all__ = [
    "INDEX_MAGIC",
    "KeyStore",
    "load_index",
    "load_tensors",
    "save_index",
    "save_tensors",
]

INDEX_MAGIC = b"SQZIDX1\x00"
LAYOUT = "layer,head,token,dim"
_U32 = np.dtype("<u4")
_F32 = np.dtype("<f4")


@dataclass(eq=False)
class KeyStore:
    """Keys and values for every (layer, head) of a fixed context.

    ``keys`` and ``values`` have shape ``(num_layers, num_heads, seq_len, head_dim)``.
    """

    keys: np.ndarray
    values: np.ndarray
    calib_queries: np.ndarray | None = None

    def __post_init__(self):
        self.keys = np.ascontiguousarray(self.keys, dtype=np.float32)
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.keys.ndim != 4:
            raise InvariantError(f"keys must be 4-D, got shape {self.keys.shape}")
        if self.values.shape != self.keys.shape:
            raise InvariantError(
                f"values shape {self.values.shape} != keys shape {self.keys.shape}"
            )
        if self.seq_len < 1:
            raise InvariantError("seq_len must be at least 1")
        for name, arr in (("keys", self.keys), ("values", self.values)):
            if not np.all(np.isfinite(arr)):
                raise InvariantError(f"{name} contain non-finite values")
        if self.calib_queries is not None:
            q = np.ascontiguousarray(self.calib_queries, dtype=np.float32)
            if q.ndim != 4 or q.shape[:2] != self.keys.shape[:2] or q.shape[3] != self.head_dim:
                raise InvariantError(f"calib_queries has incompatible shape {q.shape}")
            if not np.all(np.isfinite(q)):
                raise InvariantError("calib_queries contain non-finite values")
            self.calib_queries = q

    @property
    def num_layers(self) -> int:
        return self.keys.shape[0]

    @property
    def num_heads(self) -> int:
        return self.keys.shape[1]

    @property
    def seq_len(self) -> int:
        return self.keys.shape[2]

    @property
    def head_dim(self) -> int:
        return self.keys.shape[3]

    def heads(self):
        for layer in range(self.num_layers):
            for head in range(self.num_heads):
                yield layer, head

    def __eq__(self, other):
        if not isinstance(other, KeyStore):
            return NotImplemented
        same_calib = (self.calib_queries is None and other.calib_queries is None) or (
            self.calib_queries is not None
            and other.calib_queries is not None
            and np.array_equal(self.calib_queries, other.calib_queries)
        )
        return (
            np.array_equal(self.keys, other.keys)
            and np.array_equal(self.values, other.values)
            and same_calib
        )


def _header_int(header: dict, name: str, minimum: int = 1) -> int:
    if name not in header:
        raise FormatError(f"header is missing {name!r}")
    value = header[name]
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise FormatError(f"header field {name!r} must be an integer >= {minimum}, got {value!r}")
    return value


def load_tensors(header_path, blob_path) -> KeyStore:
    try:
        header = json.loads(Path(header_path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object")
    layers = _header_int(header, "num_layers")
    heads = _header_int(header, "num_heads")
    dim = _header_int(header, "head_dim")
    L = _header_int(header, "seq_len")
    if header.get("dtype") != "f32":
        raise FormatError(f"unsupported dtype {header.get('dtype')!r} (field 'dtype')")
    if header.get("layout", LAYOUT) != LAYOUT:
        raise FormatError(f"unsupported layout {header.get('layout')!r} (field 'layout')")
    tensors = header.get("tensors", ["keys", "values"])
    if tensors not in (["keys", "values"], ["keys", "values", "calib_queries"]):
        raise FormatError(f"unsupported tensor list {tensors!r} (field 'tensors')")
    shapes = [(layers, heads, L, dim)] * 2
    if len(tensors) == 3:
        shapes.append((layers, heads, _header_int(header, "calib_window"), dim))

    blob = Path(blob_path).read_bytes()
    expected = sum(int(np.prod(s)) for s in shapes) * 4
    if len(blob) != expected:
        raise FormatError(
            f"blob size mismatch: {len(blob)} bytes, header implies {expected}"
        )
    flat = np.frombuffer(blob, dtype=_F32)
    arrays = {}
    offset = 0
    for name, shape in zip(tensors, shapes):
        n = int(np.prod(shape))
        arr = flat[offset:offset + n].reshape(shape).astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"tensor {name!r} contains non-finite values")
        arrays[name] = arr
        offset += n
    return KeyStore(arrays["keys"], arrays["values"], arrays.get("calib_queries"))


def save_tensors(store: KeyStore, header_path, blob_path, extra: dict | None = None) -> None:
    tensors = ["keys", "values"]
    header = {
        "num_layers": store.num_layers,
        "num_heads": store.num_heads,
        "head_dim": store.head_dim,
        "seq_len": store.seq_len,
        "dtype": "f32",
        "layout": LAYOUT,
    }
    parts = [store.keys, store.values]
    if store.calib_queries is not None:
        tensors.append("calib_queries")
        header["calib_window"] = store.calib_queries.shape[2]
        parts.append(store.calib_queries)
    header["tensors"] = tensors
    if extra:
        header.update(extra)
    Path(header_path).write_text(json.dumps(header, indent=2) + "\n")
    with open(blob_path, "wb") as fh:
        for arr in parts:
            fh.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())


def save_index(index: IndexSet, path) -> None:
    for _, h in index.items():
        validate_hierarchy(h, index.seq_len)
    chunks = [
        INDEX_MAGIC,
        np.array(
            [index.num_layers, index.num_heads, index.seq_len, index.head_dim], dtype=_U32
        ).tobytes(),
    ]
    for _, h in index.items():
        chunks.append(struct.pack("<I", h.depth))
        for depth, level in enumerate(h.levels):
            chunks.append(struct.pack("<I", level.c))
            chunks.append(level.centroids.astype(_F32).tobytes())
            chunks.append(level.sizes.astype(_U32).tobytes())
            chunks.append(np.concatenate(level.members).astype(_U32).tobytes())
            if depth > 0:
                chunks.append(level.parents.astype(_U32).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, dtype: np.dtype, count: int) -> np.ndarray:
        nbytes = dtype.itemsize * count
        if self.pos + nbytes > len(self.data):
            raise FormatError("index file is truncated")
        out = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.pos)
        self.pos += nbytes
        return out

    def u32(self) -> int:
        return int(self.take(_U32, 1)[0])


def load_index(path) -> IndexSet:
    data = Path(path).read_bytes()
    if data[:8] != INDEX_MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}; not an index file")
    r = _Reader(data)
    r.pos = 8
    layers, heads, L, dim = (int(x) for x in r.take(_U32, 4))
    grid = []
    for layer in range(layers):
        row = []
        for head in range(heads):
            n_levels = r.u32()
            if n_levels == 0:
                raise InvariantError(f"head ({layer}, {head}) has no levels")
            raw = []
            for depth in range(n_levels):
                c = r.u32()
                cents = r.take(_F32, c * dim).reshape(c, dim).astype(np.float32)
                sizes = r.take(_U32, c).astype(np.int64)
                flat = r.take(_U32, int(sizes.sum())).astype(np.int64)
                members = np.split(flat, np.cumsum(sizes)[:-1]) if c else []
                parents = r.take(_U32, c).astype(np.int64) if depth > 0 else None
                raw.append((cents, members, parents))
            levels = _with_key_weights(raw, L, (layer, head))
            h = HierarchicalIndex(levels)
            validate_hierarchy(h, L)
            row.append(h)
        grid.append(row)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after index data")
    return IndexSet(layers, heads, L, dim, grid)


def _with_key_weights(raw, L: int, where) -> list[ClusterIndex]:
    weights = None
    out = []
    for depth in range(len(raw) - 1, -1, -1):
        cents, members, parents = raw[depth]
        n_below = L if weights is None else weights.size
        for m in members:
            if m.size and (m.min() < 0 or m.max() >= n_below):
                raise InvariantError(f"head {where}: level {depth + 1} member out of range")
        if weights is None:
            kw = np.array([m.size for m in members], dtype=np.int64)
        else:
            kw = np.array([weights[m].sum() for m in members], dtype=np.int64)
        out.append(ClusterIndex(cents, members, kw, parents))
        weights = kw
    out.reverse()
    return out
