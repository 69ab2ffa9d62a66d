"""Binary checkpoint format shared by the model and the experiment harness.

Layout: the magic bytes ``PERP1``, a u32 record count, then one record
per tensor:

    u16 name length, utf-8 name bytes,
    u8 group tag, u8 dtype (0=f32, 1=f64, 2=u8), u8 rank,
    rank x i64 dims (little-endian),
    raw little-endian tensor data.

Model parameters use their group tag.  Two auxiliary record kinds share
the container: sparsity masks (tag 6, dtype u8, named
``<weight>.mask[<pattern>]`` so the pattern descriptor rides in the
name) and a metadata record ``__config__`` (tag 7) holding the model
config as canonical JSON.  Round-trips are byte-identical.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import DataError
from .model import GROUP_TAGS, MiniGPT, MiniGPTConfig
from .sparsity import SparsityMask, parse_pattern
from .tensor import Parameter

__all__ = ["save_checkpoint", "load_checkpoint"]

MAGIC = b"PERP1"

_TAG_CODE = {tag: i for i, tag in enumerate(GROUP_TAGS)}
_TAG_CODE["mask"] = 6
_TAG_CODE["meta"] = 7
_CODE_TAG = {v: k for k, v in _TAG_CODE.items()}

_DTYPE_CODE = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}


def _write_record(buf: io.BytesIO, name: str, tag: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    dtype = np.dtype(arr.dtype).newbyteorder("<")
    buf.write(struct.pack("<BBB", _TAG_CODE[tag], _DTYPE_CODE[dtype], arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<q", d))
    buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_record(buf: io.BufferedReader) -> Tuple[str, str, np.ndarray]:
    (nlen,) = struct.unpack("<H", buf.read(2))
    name = buf.read(nlen).decode("utf-8")
    tag_code, dtype_code, rank = struct.unpack("<BBB", buf.read(3))
    dims = [struct.unpack("<q", buf.read(8))[0] for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    dtype = _CODE_DTYPE[dtype_code]
    data = np.frombuffer(buf.read(count * dtype.itemsize), dtype=dtype).reshape(dims)
    return name, _CODE_TAG[tag_code], data.copy()


_KIND_CODE = {"lora": 0, "lora_prune": 1, "mult_lora": 2, "masked_lora": 3}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


def save_checkpoint(path, model: MiniGPT, masks: Optional[Dict[str, SparsityMask]] = None):
    """Write model parameters, registered masks, and attached adapters."""
    records = []
    cfg_json = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    records.append(("__config__", "meta", np.frombuffer(cfg_json, dtype=np.uint8)))
    for name, p in model.named_parameters():
        records.append((name, p.tag, p.data))
    for wname, mask in (masks or {}).items():
        records.append((f"{wname}.mask[{mask.pattern}]", "mask", mask.values))
    for wname, pair in model.adapters.items():
        records.append((f"{wname}.lora.B", "adapter", pair.b.data))
        records.append((f"{wname}.lora.A", "adapter", pair.a.data))
        meta = np.array([_KIND_CODE[pair.kind], pair.alpha], dtype=np.float32)
        records.append((f"{wname}.lora.meta", "adapter", meta))

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(records)))
    for name, tag, arr in records:
        _write_record(buf, name, tag, arr)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> Tuple[MiniGPT, Dict[str, SparsityMask]]:
    """Rebuild a model (with any stored masks and adapters) from a file."""
    from .adapters import AdapterPair

    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise DataError(f"{path} is not a checkpoint (bad magic)")
        (count,) = struct.unpack("<I", f.read(4))
        records = [_read_record(f) for _ in range(count)]

    config = None
    tensors: Dict[str, Tuple[str, np.ndarray]] = {}
    masks: Dict[str, SparsityMask] = {}
    lora: Dict[str, Dict[str, np.ndarray]] = {}
    for name, tag, arr in records:
        if tag == "meta" and name == "__config__":
            config = MiniGPTConfig(**json.loads(arr.tobytes().decode("utf-8")))
        elif tag == "mask":
            owner, _, pat = name.partition(".mask[")
            masks[owner] = SparsityMask(arr.astype(np.uint8), parse_pattern(pat.rstrip("]")), owner)
        elif tag == "adapter" and ".lora." in name:
            owner, _, part = name.rpartition(".lora.")
            lora.setdefault(owner, {})[part] = arr
        else:
            tensors[name] = (tag, arr)
    if config is None:
        raise DataError(f"{path} has no __config__ record")

    params = {name: Parameter(arr, tag, trainable=False) for name, (tag, arr) in tensors.items()}
    model = MiniGPT(config, params)
    for owner, parts in lora.items():
        kind = _CODE_KIND[int(parts["meta"][0])]
        b, a = parts["B"], parts["A"]
        model.adapters[owner] = AdapterPair(
            kind=kind,
            weight=model.params[owner],
            b=Parameter(b, "adapter", trainable=False),
            a=Parameter(a, "adapter", trainable=False),
            rank=b.shape[1],
            alpha=float(parts["meta"][1]),
            owner=owner,
            mask=masks.get(owner) if kind != "lora" else None,
        )
    return model, masks
