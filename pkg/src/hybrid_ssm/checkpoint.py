"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"HSSMCKPT"
    version      u32       currently 1
    header_len   u64
    header       header_len bytes of UTF-8 JSON (model config, quantization
                 and adapter layout, free-form "extra" metadata)
    n_records    u32
    record * n_records:
        name_len u16, name (UTF-8)
        tag      u8        0=f64 1=f32 2=f16 3=u8 4=i64 5=i32 6=i8 7=bool, 255=alias
        tag 255: target_len u16, target name   (tensor shares storage with an earlier record)
        else:    rank u8, dims u64 * rank, raw little-endian data (numel * itemsize bytes)

Records appear in ``state_dict`` declaration order followed by any auxiliary
tensors (optimizer moments, ...) under a ``"aux/"`` prefix.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .attention import LoraAdapter
from .errors import ContractError
from .model import HybridLM, ModelConfig, PureTransformerLM
from .numerics import resolve_dtype
from .quantize import QuantLinear, QuantLoraAdapter

MAGIC = b"HSSMCKPT"
VERSION = 1
ALIAS = 255
_TAGS = {
    torch.float64: 0, torch.float32: 1, torch.float16: 2, torch.uint8: 3,
    torch.int64: 4, torch.int32: 5, torch.int8: 6, torch.bool: 7,
}
_DTYPES = {v: k for k, v in _TAGS.items()}
_NP = {
    torch.float64: "<f8", torch.float32: "<f4", torch.float16: "<f2", torch.uint8: "u1",
    torch.int64: "<i8", torch.int32: "<i4", torch.int8: "i1", torch.bool: "?",
}


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def write_container(path, header: dict, tensors: dict[str, torch.Tensor]) -> None:
    buf = io.BytesIO()
    head = json.dumps(header, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(tensors)))
    seen: dict[tuple, str] = {}
    for name, t in tensors.items():
        t = t.detach()
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb)
        key = (t.data_ptr(), t.dtype, tuple(t.shape), tuple(t.stride())) if t.numel() else None
        if key is not None and key in seen:
            target = seen[key].encode()
            buf.write(struct.pack("<BH", ALIAS, len(target)) + target)
            continue
        if key is not None:
            seen[key] = name
        if t.dtype not in _TAGS:
            raise ContractError(f"cannot serialize dtype {t.dtype} ({name})")
        buf.write(struct.pack("<BB", _TAGS[t.dtype], t.dim()))
        buf.write(struct.pack(f"<{t.dim()}Q", *t.shape))
        buf.write(t.contiguous().cpu().numpy().astype(_NP[t.dtype], copy=False).tobytes())
    atomic_write_bytes(path, buf.getvalue())


def read_container(path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    off = 20
    header = json.loads(data[off : off + hlen])
    off += hlen
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nl].decode()
        off += nl
        (tag,) = struct.unpack_from("<B", data, off)
        off += 1
        if tag == ALIAS:
            (tl,) = struct.unpack_from("<H", data, off)
            off += 2
            tensors[name] = tensors[data[off : off + tl].decode()]
            off += tl
            continue
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        dtype = _DTYPES[tag]
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype=_NP[dtype], count=count, offset=off)
        off += arr.nbytes
        tensors[name] = torch.from_numpy(arr.copy()).reshape(dims)
    return header, tensors


def _layout(model: nn.Module) -> dict:
    qmods = {
        name: {"in": m.in_features, "out": m.out_features, "block_size": m.block_size,
               "scheme": m.scheme, "bias": m.bias is not None}
        for name, m in model.named_modules() if isinstance(m, QuantLinear)
    }
    adapters = {}
    for name, m in model.named_modules():
        if isinstance(m, (LoraAdapter, QuantLoraAdapter)):
            adapters[name] = {
                "kind": "int4" if isinstance(m, QuantLoraAdapter) else "float",
                "target": m.target, "d_in": m.d_in, "d_out": m.d_out, "r": m.r, "alpha": m.alpha,
                "block_size": getattr(m, "block_size", None),
            }
    return {"quantized_modules": qmods, "adapters": adapters}


def save_checkpoint(path, model: nn.Module, extra: dict | None = None,
                    aux: dict[str, torch.Tensor] | None = None) -> None:
    header = {
        "format": "hybrid-ssm-checkpoint",
        "kind": "pure" if isinstance(model, PureTransformerLM) else "hybrid",
        "config": model.config.to_dict(),
        **_layout(model),
        "quantization": getattr(model, "quantization", None),
        "extra": extra or {},
    }
    tensors = dict(model.state_dict(keep_vars=False))
    for k, v in (aux or {}).items():
        tensors[f"aux/{k}"] = v
    write_container(path, header, tensors)


def load_checkpoint(path) -> tuple[nn.Module, dict, dict[str, torch.Tensor]]:
    """Returns ``(model, extra, aux_tensors)``; the model is rebuilt with the saved structure."""
    header, tensors = read_container(path)
    config = ModelConfig.from_dict(header["config"])
    cls = PureTransformerLM if header["kind"] == "pure" else HybridLM
    model = cls(config).to(resolve_dtype(config.dtype))
    for name, meta in header.get("quantized_modules", {}).items():
        parent, _, attr = name.rpartition(".")
        bias = torch.zeros(meta["out"]) if meta["bias"] else None
        setattr(model.get_submodule(parent) if parent else model, attr,
                QuantLinear(meta["in"], meta["out"], meta["block_size"], bias, meta["scheme"]))
    for name, meta in header.get("adapters", {}).items():
        parent, _, attr = name.rpartition(".")
        group = model.get_submodule(parent)
        if meta["kind"] == "int4":
            ad = QuantLoraAdapter(meta["target"], meta["d_in"], meta["d_out"], meta["r"], meta["alpha"],
                                  meta["block_size"])
        else:
            ad = LoraAdapter(meta["target"], meta["d_in"], meta["d_out"], meta["r"], meta["alpha"])
        group[attr] = ad.to(model.dtype) if meta["kind"] == "float" else ad
    if header.get("quantization"):
        model.quantization = header["quantization"]
    state = {k: v for k, v in tensors.items() if not k.startswith("aux/")}
    model.load_state_dict(state, strict=True)
    aux = {k[4:]: v for k, v in tensors.items() if k.startswith("aux/")}
    return model, header.get("extra", {}), aux


def read_header(path) -> dict:
    header, _ = read_container(path)
    return header
