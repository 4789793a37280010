"""Versioned binary checkpoint container.

Layout (little-endian)::

    b"LEGOCKPT"  u16 version  u32 meta_len  meta (UTF-8 JSON)
    u32 n_blocks, then per block:
        u16 name_len  name  u8 kind  u8 ndim  u32 dims[ndim]  u64 nbytes  payload

``kind`` 0 is a float32 tensor in C order; kind 1 is a boolean mask packed as
a little-endian bitset.  Block names are ``param/<key>``, ``mask/<key>``,
``lora_A/<key>``, ``lora_B/<key>``, ``lora_mask_A/<key>``, ``lora_mask_B/<key>``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, MissingInputError, UnsupportedVersionError
from .model import LoraAdapter, ModelConfig, SlmModel

MAGIC = b"LEGOCKPT"
VERSION = 1
KIND_F32, KIND_BITS = 0, 1


def _block(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == bool:
        kind, payload = KIND_BITS, np.packbits(arr.reshape(-1), bitorder="little").tobytes()
    else:
        kind, payload = KIND_F32, np.ascontiguousarray(arr, dtype="<f4").tobytes()
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", kind, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + struct.pack("<Q", len(payload)) + payload


def dumps(model: SlmModel) -> bytes:
    ad = model.adapter
    meta = {
        "config": model.config.to_dict(),
        "sparsity_level": model.sparsity_level,
        "layer_ids": list(model.layer_ids),
        "adapter": None if ad is None else {"rank": ad.rank, "alpha": ad.alpha, "keys": ad.keys()},
    }
    blocks = []
    for k in sorted(model.params):
        blocks.append(_block("param/" + k, model.params[k]))
    for k in sorted(model.masks):
        blocks.append(_block("mask/" + k, model.masks[k].astype(bool)))
    if ad is not None:
        for k in ad.keys():
            blocks.append(_block("lora_A/" + k, ad.A[k]))
            blocks.append(_block("lora_B/" + k, ad.B[k]))
            if ad.mask_A.get(k) is not None:
                blocks.append(_block("lora_mask_A/" + k, ad.mask_A[k]))
            if ad.mask_B.get(k) is not None:
                blocks.append(_block("lora_mask_B/" + k, ad.mask_B[k]))
    mb = json.dumps(meta, sort_keys=True).encode()
    out = MAGIC + struct.pack("<HI", VERSION, len(mb)) + mb + struct.pack("<I", len(blocks))
    return out + b"".join(blocks)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes) -> SlmModel:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    (mlen,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(mlen).decode())
        cfg = meta["config"]
        config = ModelConfig(**cfg)
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"corrupt checkpoint metadata: {e}") from None
    (n_blocks,) = r.unpack("<I")
    blocks = {}
    for _ in range(n_blocks):
        (nl,) = r.unpack("<H")
        name = r.take(nl).decode()
        kind, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        payload = r.take(nbytes)
        n = int(np.prod(shape)) if shape else 1
        if kind == KIND_F32:
            if nbytes != 4 * n:
                raise CheckpointError(f"block {name}: {nbytes} bytes for shape {shape}")
            arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
        elif kind == KIND_BITS:
            arr = np.unpackbits(np.frombuffer(payload, np.uint8), count=n, bitorder="little").astype(bool).reshape(shape)
        else:
            raise CheckpointError(f"block {name}: unknown kind {kind}")
        blocks[name] = arr
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last block")

    def group(prefix):
        return {k[len(prefix) :]: v for k, v in blocks.items() if k.startswith(prefix)}

    adapter = None
    if meta.get("adapter") is not None:
        a = meta["adapter"]
        adapter = LoraAdapter(a["rank"], a["alpha"])
        A, B, mA, mB = group("lora_A/"), group("lora_B/"), group("lora_mask_A/"), group("lora_mask_B/")
        for k in a["keys"]:
            if k not in A or k not in B:
                raise CheckpointError(f"adapter block for {k} missing")
            adapter.A[k], adapter.B[k] = A[k], B[k]
            adapter.mask_A[k], adapter.mask_B[k] = mA.get(k), mB.get(k)
    return SlmModel(
        config,
        group("param/"),
        group("mask/"),
        adapter,
        float(meta["sparsity_level"]),
        list(meta["layer_ids"]),
    )


def save_checkpoint(model: SlmModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_bytes(dumps(model))
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e
    return path


def load_checkpoint(path) -> SlmModel:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"checkpoint not found: {path}")
    try:
        return loads(path.read_bytes())
    except CheckpointError as e:
        raise type(e)(f"{path}: {e}") from None
