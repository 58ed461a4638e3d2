"""Named parameter storage, SGD with momentum, and the binary checkpoint format.

Checkpoint layout::

    b"RCN1" | uint64 LE header length | UTF-8 JSON header | float64 LE payload

The header lists every stored array (name, shape, frozen flag) in payload
order, plus a free-form ``meta`` dict (config echo, iteration, ...).
"""

import json
import os
import struct
from collections import OrderedDict
from typing import Dict, Iterable, Optional

import numpy as np

from ..errors import FormatError, InvalidArgument, InvalidState
from .tensor import DTYPE, Tensor

MAGIC = b"RCN1"
FORMAT_VERSION = 1


class ParamStore:
    """Ordered map from a slash-separated path to a trainable Tensor."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.frozen = set()
        self.velocity: Dict[str, np.ndarray] = {}

    def add(self, name, data, frozen=False) -> Tensor:
        if name in self._params:
            raise InvalidArgument(f"duplicate parameter name {name!r}")
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        if frozen:
            self.frozen.add(name)
        return t

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def freeze(self, prefix=""):
        for name in self._params:
            if name.startswith(prefix):
                self.frozen.add(name)

    def unfreeze(self, prefix=""):
        self.frozen = {n for n in self.frozen if not n.startswith(prefix)}

    def trainable(self):
        return [n for n in self._params if n not in self.frozen]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def num_parameters(self):
        return int(sum(t.data.size for t in self._params.values()))

    def snapshot(self):
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        for n, t in self._params.items():
            if n in arrays:
                src = np.asarray(arrays[n], dtype=DTYPE)
                if src.shape != t.data.shape:
                    raise InvalidArgument(f"{n}: shape {src.shape} != {t.data.shape}")
                t.data = src.copy()


def sgd_step(params: ParamStore, lr: float, momentum: float = 0.9):
    """One SGD update: ``v <- momentum*v + grad``, ``p <- p - lr*v``.

    Frozen parameters are never touched. All grads are cleared afterwards.
    """
    if not lr > 0:
        raise InvalidArgument(f"learning rate must be positive, got {lr}")
    for name, p in params.items():
        if name in params.frozen:
            continue
        if p.grad is None:
            raise InvalidState(f"parameter {name!r} has no gradient")
    for name, p in params.items():
        if name in params.frozen:
            continue
        v = params.velocity.get(name)
        v = p.grad.copy() if v is None else momentum * v + p.grad
        params.velocity[name] = v
        p.data = p.data - lr * v
    params.zero_grad()


# ---------------------------------------------------------------------------
# checkpoint IO


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def write_checkpoint(path, params: ParamStore, meta: Optional[dict] = None,
                     extra: Optional[Dict[str, np.ndarray]] = None):
    """Write ``params`` (and optional extra arrays, e.g. momentum) atomically."""
    entries, blobs = [], []
    for name, t in params.items():
        entries.append({"name": name, "shape": list(t.data.shape), "frozen": name in params.frozen})
        blobs.append(t.data)
    for name, arr in (extra or {}).items():
        arr = np.asarray(arr, dtype=DTYPE)
        entries.append({"name": name, "shape": list(arr.shape), "frozen": False, "extra": True})
        blobs.append(arr)
    header = _canonical_json({"format_version": FORMAT_VERSION, "params": entries, "meta": meta or {}})
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in blobs:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_checkpoint(path):
    """Return ``(header, arrays)``; raises FormatError on any inconsistency."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header length")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    if len(raw) < 12 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {header.get('format_version')!r}")
    arrays = OrderedDict()
    offset = 12 + hlen
    for entry in header.get("params", []):
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: payload truncated at {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).astype(DTYPE).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, arrays


def params_from_checkpoint(header, arrays) -> ParamStore:
    store = ParamStore()
    for entry in header["params"]:
        if entry.get("extra"):
            continue
        store.add(entry["name"], Tensor(arrays[entry["name"]].copy()), frozen=entry["frozen"])
    return store


def extras_from_checkpoint(header, arrays) -> Dict[str, np.ndarray]:
    return {e["name"]: arrays[e["name"]] for e in header["params"] if e.get("extra")}


def named_arrays(params: Iterable):
    return {n: t.data for n, t in params}
