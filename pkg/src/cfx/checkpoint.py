"""Binary checkpoint format.

Layout::

    b"CFXK" | u32 version | u32 header length | UTF-8 JSON header | f64 arrays

All integers and floats are little-endian.  Arrays follow the header's
``arrays`` list in order.  The header carries the SHA-256 of the array
payload and of the vocabulary file the model was trained with.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .cfd_head import CfdModel
from .encoder import EncoderConfig
from .qa_head import QaModel
from .tokenizer import Vocab

MAGIC = b"CFXK"
VERSION = 1
_LE_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointVersionError(CheckpointError):
    pass


class VocabMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_kind: str
    encoder: dict
    head: dict
    vocab_sha256: str
    vocab_lowercase: bool
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def checkpoint_from_model(model: CfdModel | QaModel, vocab: Vocab, meta: dict | None = None) -> Checkpoint:
    return Checkpoint(
        model_kind=model.kind,
        encoder=model.enc.to_dict(),
        head=model.head_config(),
        vocab_sha256=vocab.content_hash(),
        vocab_lowercase=vocab.lowercase,
        arrays={name: p.data.copy() for name, p in model.params.items()},
        meta=dict(meta or {}),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> CfdModel | QaModel:
    enc = EncoderConfig(**ckpt.encoder)
    params = {name: nc.parameter(arr.copy(), name) for name, arr in ckpt.arrays.items()}
    if ckpt.model_kind == "cfd":
        return CfdModel(enc, params, **ckpt.head)
    if ckpt.model_kind == "qa":
        return QaModel(enc, params, **ckpt.head)
    raise CheckpointError(f"unknown model kind {ckpt.model_kind!r}")


def dumps(ckpt: Checkpoint) -> bytes:
    names = list(ckpt.arrays)
    payload = b"".join(np.ascontiguousarray(ckpt.arrays[n], dtype=_LE_F64).tobytes() for n in names)
    header = {
        "model_kind": ckpt.model_kind,
        "encoder": ckpt.encoder,
        "head": ckpt.head,
        "vocab_sha256": ckpt.vocab_sha256,
        "vocab_lowercase": ckpt.vocab_lowercase,
        "arrays": [{"name": n, "shape": list(ckpt.arrays[n].shape)} for n in names],
        "meta": ckpt.meta,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<II", ckpt.version, len(blob)) + blob + payload


def loads(data: bytes) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointFormatError("bad magic bytes", 0)
    if len(data) < 12:
        raise CheckpointFormatError("truncated preamble", len(data))
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if len(data) < 12 + hlen:
        raise CheckpointFormatError("truncated header", len(data))
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
        specs = [(a["name"], tuple(int(x) for x in a["shape"])) for a in header["arrays"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}", 12) from None
    offset = 12 + hlen
    start = offset
    arrays = {}
    for name, shape in specs:
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + nbytes > len(data):
            raise CheckpointFormatError(f"truncated array {name!r}", len(data))
        arrays[name] = np.frombuffer(data, _LE_F64, nbytes // 8, offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(data):
        raise CheckpointFormatError(f"{len(data) - offset} trailing bytes", offset)
    if hashlib.sha256(data[start:offset]).hexdigest() != header.get("payload_sha256"):
        raise CheckpointFormatError("array payload checksum mismatch", start)
    return Checkpoint(
        model_kind=header["model_kind"],
        encoder=header["encoder"],
        head=header["head"],
        vocab_sha256=header["vocab_sha256"],
        vocab_lowercase=bool(header.get("vocab_lowercase", True)),
        arrays=arrays,
        meta=header.get("meta", {}),
        version=version,
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    tmp.replace(path)


def load_checkpoint(path, vocab: Vocab | None = None) -> Checkpoint:
    ckpt = loads(Path(path).read_bytes())
    if vocab is not None and vocab.content_hash() != ckpt.vocab_sha256:
        raise VocabMismatchError(f"{path}: vocabulary hash does not match the checkpoint")
    return ckpt
