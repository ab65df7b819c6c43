"""Named parameter arrays with gradient buffers and the ``HBNP`` binary format."""
from __future__ import annotations

import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"HBNP"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """A binary blob could not be decoded."""


class _Slot:
    __slots__ = ("owner", "name")

    def __init__(self, owner: "ParamSet", name: str):
        self.owner = owner
        self.name = name

    def accumulate(self, g: np.ndarray) -> None:
        self.owner.grads[self.name] += g


class ParamSet:
    """Ordered mapping of parameter name -> float64 array, plus same-shaped grads.

    Indexing returns a leaf :class:`Tensor` whose gradient is accumulated into
    ``grads[name]`` by :func:`heightbev.tensor.backward`.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self.values: OrderedDict[str, np.ndarray] = OrderedDict()
        self.grads: OrderedDict[str, np.ndarray] = OrderedDict()
        self.frozen: set[str] = set()
        for k, v in (arrays or {}).items():
            self.add(k, v)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> Tensor:
        return Tensor(self.values[name], requires_grad=name not in self.frozen, param=_Slot(self, name))

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def names(self, prefix: str = "") -> list[str]:
        return [k for k in self.values if k.startswith(prefix)]

    def count(self, prefix: str = "") -> int:
        return int(sum(self.values[k].size for k in self.names(prefix)))

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def copy(self) -> "ParamSet":
        out = ParamSet(self.values)
        out.frozen = set(self.frozen)
        return out

    def equal(self, other: "ParamSet") -> bool:
        return list(self.values) == list(other.values) and all(
            np.array_equal(self.values[k], other.values[k]) for k in self.values
        )

    # serialization ---------------------------------------------------

    def to_bytes(self) -> bytes:
        return encode_arrays(self.values)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamSet":
        return cls(decode_arrays(blob))

    def save(self, path: str | os.PathLike) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ParamSet":
        return cls.from_bytes(Path(path).read_bytes())


def encode_arrays(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote rank 0 to 1
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_arrays(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError(f"bad magic bytes {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    pos = 8
    mv = memoryview(blob)
    while pos < len(blob):
        try:
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            if pos + nlen > len(blob):
                raise struct.error("name")
            name = bytes(mv[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
        except struct.error as exc:
            raise FormatError(f"truncated header at byte {pos}") from exc
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise FormatError(
                f"truncated data for {name!r}: need {nbytes} bytes at {pos}, have {len(blob) - pos}"
            )
        out[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims).astype(np.float64)
        pos += nbytes
    return out


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
