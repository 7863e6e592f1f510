"""NSCP1 weight container.

Layout::

    b"NSCP1"
    uint64 little-endian header length
    UTF-8 JSON header: {"config": {...}, "<tensor>": {"shape": [...], "offset": n}, ...}
    raw little-endian float32 payloads, in header order

Offsets count bytes from the first payload byte.
"""

import json
import struct

import numpy as np

from .model import ModelBundle, ModelConfig

MAGIC = b"NSCP1"


def dumps_model(model: ModelBundle) -> bytes:
    header: dict = {"config": model.config.to_dict()}
    payloads = []
    offset = 0
    for name, arr in model.named().items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        header[name] = {"shape": list(arr.shape), "offset": offset}
        payloads.append(data)
        offset += len(data)
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<Q", len(head)), head, *payloads])


def loads_model(blob: bytes) -> ModelBundle:
    if blob[:5] != MAGIC:
        raise ValueError("not an NSCP1 weight container")
    (hlen,) = struct.unpack("<Q", blob[5:13])
    header = json.loads(blob[13 : 13 + hlen].decode("utf-8"))
    base = 13 + hlen
    config = ModelConfig.from_dict(header.pop("config"))
    tensors = {}
    for name, meta in header.items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + meta["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise ValueError(f"{name}: payload truncated")
        tensors[name] = np.frombuffer(blob[start:end], dtype="<f4").astype(np.float32).reshape(shape)
    return ModelBundle.from_named(config, tensors)


def save_model(path, model: ModelBundle) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_model(model))


def load_model(path) -> ModelBundle:
    with open(path, "rb") as fh:
        return loads_model(fh.read())
