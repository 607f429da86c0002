"""Binary checkpoint fragments for masked parameters.

Fragment layout (all integers little-endian):

    u16 name length, utf-8 name
    u8  ndim, then ndim x u32 shape
    f8[size] weight (row-major)
    u8[ceil(size/8)] mask, bit-packed row-major, little-endian bit order
    f8[size] first moment, f8[size] second moment
    u64 step_count

Weights are always written as float64, so float32 models round-trip exactly.
"""
from __future__ import annotations

import io
import struct

import numpy as np

from .params import MaskedParameter


def write_fragment(buf: io.BufferedIOBase, p: MaskedParameter) -> None:
    name = p.name.encode("utf-8")
    buf.write(struct.pack("<H", len(name)))
    buf.write(name)
    buf.write(struct.pack("<B", p.weight.ndim))
    buf.write(struct.pack(f"<{p.weight.ndim}I", *p.weight.shape))
    buf.write(np.ascontiguousarray(p.weight, dtype="<f8").tobytes())
    buf.write(np.packbits(p.mask.ravel(), bitorder="little").tobytes())
    buf.write(np.ascontiguousarray(p.m1, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(p.m2, dtype="<f8").tobytes())
    buf.write(struct.pack("<Q", p.step_count))


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise ValueError("truncated checkpoint fragment")
    return data


def read_fragment(buf) -> dict:
    (n,) = struct.unpack("<H", _read_exact(buf, 2))
    name = _read_exact(buf, n).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(buf, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
    size = int(np.prod(shape, dtype=np.int64))
    weight = np.frombuffer(_read_exact(buf, 8 * size), dtype="<f8").reshape(shape)
    packed = np.frombuffer(_read_exact(buf, (size + 7) // 8), dtype=np.uint8)
    mask = np.unpackbits(packed, count=size, bitorder="little").astype(bool).reshape(shape)
    m1 = np.frombuffer(_read_exact(buf, 8 * size), dtype="<f8").reshape(shape)
    m2 = np.frombuffer(_read_exact(buf, 8 * size), dtype="<f8").reshape(shape)
    (step,) = struct.unpack("<Q", _read_exact(buf, 8))
    return {"name": name, "shape": tuple(shape), "weight": weight, "mask": mask,
            "m1": m1, "m2": m2, "step_count": step}


def load_fragment_into(p: MaskedParameter, frag: dict) -> None:
    if frag["shape"] != p.weight.shape:
        raise ValueError(f"{p.name}: checkpoint shape {frag['shape']} != {p.weight.shape}")
    dt = p.weight.dtype
    p.weight[...] = frag["weight"].astype(dt)
    p.mask = frag["mask"].copy()
    p.m1[...] = frag["m1"].astype(dt)
    p.m2[...] = frag["m2"].astype(dt)
    p.step_count = int(frag["step_count"])


def params_to_bytes(params) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        write_fragment(buf, p)
    return buf.getvalue()


def params_from_bytes(params, data: bytes) -> None:
    buf = io.BytesIO(data)
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    if count != len(params):
        raise ValueError(f"checkpoint holds {count} parameters, model has {len(params)}")
    for p in params:
        frag = read_fragment(buf)
        if frag["name"] != p.name:
            raise ValueError(f"checkpoint parameter {frag['name']!r} where {p.name!r} expected")
        load_fragment_into(p, frag)
