"""Flat binary model format (see docs/formats.md).

    magic    5 bytes  b"GSEC1"
    u32      layer count L
    u32 x3   input shape (h, w, c)
    L records:
        u8   kind tag (0 dense, 1 conv2d, 2 maxpool2)
        u8   activation tag (0 identity, 1 sigmoid, 2 relu, 3 tanh)
        u32  units, filters, kernel, stride, pad
        u32  weight element count E
        E    little-endian float32 values, row-major

All integers are little-endian.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .nn import ACTIVATIONS, KINDS, LayerSpec, Model, output_shape, weight_shape

MAGIC = b"GSEC1"
_LAYER = struct.Struct("<BB5II")


class FormatError(ValueError):
    pass


def dumps(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<4I", len(model.specs), *model.input_shape))
    for spec, w in zip(model.specs, model.weights):
        count = 0 if w is None else w.size
        buf.write(_LAYER.pack(KINDS.index(spec.kind), ACTIVATIONS.index(spec.activation),
                              spec.units, spec.filters, spec.kernel, spec.stride, spec.pad,
                              count))
        if w is not None:
            buf.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> Model:
    if data[:5] != MAGIC:
        raise FormatError("not a model file (bad magic)")
    try:
        n_layers, h, w, c = struct.unpack_from("<4I", data, 5)
        off = 5 + 16
        specs, weights = [], []
        shape: tuple = (h, w, c)
        for _ in range(n_layers):
            kind, act, units, filters, kernel, stride, pad, count = _LAYER.unpack_from(data, off)
            off += _LAYER.size
            spec = LayerSpec(KINDS[kind], units=units, filters=filters, kernel=kernel,
                             stride=stride, pad=pad, activation=ACTIVATIONS[act])
            wshape = weight_shape(spec, shape)
            if count:
                arr = np.frombuffer(data, dtype="<f4", count=count, offset=off)
                off += 4 * count
                weights.append(arr.astype(np.float32).reshape(wshape))
            else:
                weights.append(None)
            specs.append(spec)
            shape = output_shape(spec, shape)
    except (struct.error, ValueError, IndexError) as exc:
        raise FormatError(f"corrupt model file: {exc}") from None
    if off != len(data):
        raise FormatError("trailing bytes after last layer")
    return Model((h, w, c), tuple(specs), tuple(weights))


def save(model: Model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(model))
    return path


def load(path) -> Model:
    return loads(Path(path).read_bytes())
