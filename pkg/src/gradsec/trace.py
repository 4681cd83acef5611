"""Per-step records of everything a client's training computes, and their file format.

A trace is keyed by ``(step, layer, field)``. Layers are 1-based block
numbers; field meanings for layer ``l``:

    W       weights after the step
    DW      dLoss/dW
    Z       pre-activation output
    A       block output (input of layer l + 1); layer 0 holds A_0 = X
    DELTA   dLoss/dZ
    BDELTA  dLoss/dA, the error handed down to layer l (l < n)

File layout (little-endian)::

    b"GSTR1"  u32 cycle  u32 client  u32 n_layers
    records:  u32 payload_len, then
              u32 step, u16 layer, u8 field id, u8 ndim, ndim x u32 dims, float32 data
    u32 0                               end of records
    b"MASK"   u32 count, count x (u32 step, u16 layer, u8 field id, u8 0)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

FIELDS = ("W", "DW", "Z", "A", "DELTA", "BDELTA")
FIELD_ID = {name: i for i, name in enumerate(FIELDS)}
MAGIC = b"GSTR1"
MASK_MAGIC = b"MASK"

Key = tuple  # (step, layer, field)


class TraceFormatError(ValueError):
    pass


@dataclass
class RawTrace:
    """Complete record of a client's local training in one cycle."""

    n_layers: int
    cycle: int = 0
    client: int = 0
    records: dict = field(default_factory=dict)

    @property
    def steps(self) -> list[int]:
        return sorted({k[0] for k in self.records})

    def get(self, step: int, layer: int, name: str):
        return self.records.get((step, layer, name))

    def keys(self) -> set:
        return set(self.records)

    def expected_keys(self, steps=None) -> set:
        """Key set of a complete trace over ``steps``."""
        out = set()
        for s in (self.steps if steps is None else steps):
            out.add((s, 0, "A"))
            for l in range(1, self.n_layers + 1):
                out.update((s, l, f) for f in ("W", "DW", "Z", "A", "DELTA"))
                if l < self.n_layers:
                    out.add((s, l, "BDELTA"))
        return out


@dataclass
class AttackerView:
    """What the normal world can observe: a trace minus the enclave's buffers."""

    n_layers: int
    cycle: int
    client: int
    records: dict
    mask: frozenset  # keys removed by redaction
    protected: frozenset = frozenset()

    @property
    def steps(self) -> list[int]:
        return sorted({k[0] for k in self.records} | {k[0] for k in self.mask})

    def get(self, step: int, layer: int, name: str):
        return self.records.get((step, layer, name))

    def observable_layers(self) -> list[int]:
        return [l for l in range(1, self.n_layers + 1) if l not in self.protected]

    def gradients(self, step: int | None = None) -> dict:
        """``{layer: dW}`` for the observable layers at ``step`` (first step by default)."""
        if step is None:
            step = self.steps[0]
        return {l: self.records[(step, l, "DW")] for l in range(1, self.n_layers + 1)
                if (step, l, "DW") in self.records}


def record_step(trace: RawTrace, step: int, model, cache, grads, new_model) -> None:
    """Store one SGD step, regrouping per-spec buffers into layer blocks."""
    recs = trace.records
    recs[(step, 0, "A")] = cache.A[0]
    new_w = new_model.weights
    n = model.n
    for l, block in enumerate(model.blocks, start=1):
        i, last = block[0], block[-1]
        recs[(step, l, "W")] = new_w[i]
        recs[(step, l, "DW")] = grads.dW[i]
        recs[(step, l, "Z")] = cache.Z[i]
        recs[(step, l, "A")] = cache.A[last + 1]
        recs[(step, l, "DELTA")] = grads.delta[i]
        if l < n:
            recs[(step, l, "BDELTA")] = grads.dA[last + 1]


# ---------------------------------------------------------------------------
# file IO

def _iter_sorted(records: dict) -> Iterator:
    for key in sorted(records, key=lambda k: (k[0], k[1], FIELD_ID[k[2]])):
        yield key, records[key]


def write_trace(path, trace, mask=()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<3I", trace.cycle, trace.client, trace.n_layers))
        for (step, layer, name), arr in _iter_sorted(trace.records):
            arr = np.ascontiguousarray(arr, dtype="<f4")
            head = struct.pack("<IHBB", step, layer, FIELD_ID[name], arr.ndim)
            head += struct.pack(f"<{arr.ndim}I", *arr.shape)
            body = arr.tobytes()
            fh.write(struct.pack("<I", len(head) + len(body)))
            fh.write(head)
            fh.write(body)
        fh.write(struct.pack("<I", 0))
        mask = sorted(mask, key=lambda k: (k[0], k[1], FIELD_ID[k[2]]))
        fh.write(MASK_MAGIC)
        fh.write(struct.pack("<I", len(mask)))
        for step, layer, name in mask:
            fh.write(struct.pack("<IHBB", step, layer, FIELD_ID[name], 0))
    return path


def read_trace(path):
    """Return ``(header, records, mask)`` from a trace file."""
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise TraceFormatError("not a trace file")
    try:
        cycle, client, n_layers = struct.unpack_from("<3I", raw, 5)
        off = 17
        records = {}
        while True:
            (size,) = struct.unpack_from("<I", raw, off)
            off += 4
            if size == 0:
                break
            step, layer, fid, ndim = struct.unpack_from("<IHBB", raw, off)
            dims = struct.unpack_from(f"<{ndim}I", raw, off + 8)
            start = off + 8 + 4 * ndim
            count = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
            records[(step, layer, FIELDS[fid])] = arr.astype(np.float32).reshape(dims)
            off += size
        if raw[off:off + 4] != MASK_MAGIC:
            raise TraceFormatError("missing mask footer")
        (count,) = struct.unpack_from("<I", raw, off + 4)
        off += 8
        mask = set()
        for _ in range(count):
            step, layer, fid, _ = struct.unpack_from("<IHBB", raw, off)
            mask.add((step, layer, FIELDS[fid]))
            off += 8
    except struct.error as exc:
        raise TraceFormatError(f"truncated trace file: {exc}") from None
    header = {"cycle": cycle, "client": client, "n_layers": n_layers}
    return header, records, mask
