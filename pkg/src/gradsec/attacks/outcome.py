from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("DRIA", "MIA", "DPIA")


@dataclass
class AttackOutcome:
    kind: str
    metric: str  # "ImageLoss" or "AUC"
    value: float
    seed: int = 0
    policy: str = "none"
    curve: list | None = None
    artifacts: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    tensor: np.ndarray | None = field(default=None, repr=False)  # not serialised

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.metric == "AUC" and not 0.0 <= self.value <= 1.0:
            raise ValueError("AUC must lie in [0, 1]")
        if self.metric == "ImageLoss" and not self.value >= 0.0:
            raise ValueError("ImageLoss must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        del d["tensor"]
        if d["curve"] is None:
            del d["curve"]
        return d

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (set, frozenset, tuple)):
        return sorted(obj) if isinstance(obj, (set, frozenset)) else list(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_preview(image: np.ndarray, path) -> Path:
    """8-bit PGM (one channel) or PPM (three channels) of an (h, w, c) image in [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    h, w, c = img.shape
    if c not in (1, 3):
        raise ValueError("preview needs 1 or 3 channels")
    pix = np.rint(img * 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    path = Path(path)
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + pix.tobytes())
    return path
