"""Datasets: CIFAR binary loader, synthetic blob images with a planted property,
and deterministic splitting across federated clients.

Images are float32 ``(N, h, w, c)`` in [0, 1]; labels are one-hot float32.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_PIXELS = 3 * 32 * 32
CIFAR_VARIANTS = {
    # variant: (label bytes per record, which label byte to use, classes)
    "cifar10": (1, 0, 10),
    "cifar100": (2, 1, 100),
}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    property_flags: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.images)
        if len(self.labels) != n or (self.property_flags is not None and len(self.property_flags) != n):
            raise DataError("images, labels and property flags disagree on N")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def classes(self) -> int:
        return self.labels.shape[1]

    @property
    def label_index(self) -> np.ndarray:
        return self.labels.argmax(axis=1)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        flags = None if self.property_flags is None else self.property_flags[idx]
        return Dataset(self.images[idx], self.labels[idx], flags)


def one_hot(idx, classes: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((len(idx), classes), dtype=np.float32)
    out[np.arange(len(idx)), idx] = 1.0
    return out


def concat(parts: list[Dataset]) -> Dataset:
    flags = None
    if all(p.property_flags is not None for p in parts):
        flags = np.concatenate([p.property_flags for p in parts])
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]), flags)


# ---------------------------------------------------------------------------
# CIFAR binary

def load_cifar(path, variant: str = "cifar10") -> Dataset:
    """Read a CIFAR-10/100 binary batch file.

    Each record is the label byte(s) followed by 3072 pixel bytes stored
    channel-planar (R, G, B planes of 32x32, row-major). CIFAR-100 records
    carry a coarse then a fine label; the fine one is used.
    """
    try:
        n_label, which, classes = CIFAR_VARIANTS[variant]
    except KeyError:
        raise DataError(f"unknown CIFAR variant {variant!r}") from None
    raw = np.fromfile(Path(path), dtype=np.uint8)
    rec = n_label + CIFAR_PIXELS
    if raw.size == 0 or raw.size % rec:
        raise DataError(f"truncated {variant} file: {raw.size} bytes is not a multiple of {rec}")
    raw = raw.reshape(-1, rec)
    labels = raw[:, which].astype(np.int64)
    if labels.max() >= classes:
        raise DataError(f"label {labels.max()} out of range for {variant}")
    if n_label == 2 and raw[:, 0].max() >= 20:
        raise DataError("coarse label out of range for cifar100")
    pix = raw[:, n_label:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    images = pix.astype(np.float32) / np.float32(255.0)
    return Dataset(images, one_hot(labels, classes))


def write_cifar(dataset: Dataset, path, variant: str = "cifar10") -> Path:
    """Inverse of :func:`load_cifar`; pixels are rounded to the nearest byte."""
    n_label, which, classes = CIFAR_VARIANTS[variant]
    if dataset.images.shape[1:] != (32, 32, 3):
        raise DataError("CIFAR records hold 32x32x3 images")
    n = len(dataset)
    out = np.zeros((n, n_label + CIFAR_PIXELS), dtype=np.uint8)
    out[:, which] = dataset.label_index
    pix = np.clip(np.rint(dataset.images * 255), 0, 255).astype(np.uint8)
    out[:, n_label:] = pix.transpose(0, 3, 1, 2).reshape(n, -1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out.tofile(path)
    return path


# ---------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class PropertySpec:
    pattern: np.ndarray | None = None  # defaults to a checkerboard stamp
    alpha: float = 0.5
    prevalence: float = 0.5

    def __post_init__(self):
        if not 0 <= self.alpha <= 1 or not 0 <= self.prevalence <= 1:
            raise DataError("property blend alpha and prevalence must lie in [0, 1]")


@dataclass(frozen=True)
class SynthSpec:
    classes: int = 10
    shape: tuple[int, int, int] = (32, 32, 3)
    prototype_seed: int = 0
    sigma: float = 0.1
    blobs: int = 3
    prop: PropertySpec | None = None

    def __post_init__(self):
        if self.classes < 1 or self.sigma < 0 or self.blobs < 1:
            raise DataError("synthetic spec needs classes >= 1, sigma >= 0, blobs >= 1")


def class_prototypes(spec: SynthSpec) -> np.ndarray:
    """One image per class made of a few coloured Gaussian blobs."""
    rng = np.random.default_rng(spec.prototype_seed)
    h, w, c = spec.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    protos = np.zeros((spec.classes, h, w, c))
    for k in range(spec.classes):
        img = np.full((h, w, c), 0.15)
        for _ in range(spec.blobs):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            rad = rng.uniform(0.12, 0.3) * max(h, w)
            colour = rng.uniform(0.2, 1.0, size=c)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad ** 2))
            img += blob[..., None] * colour
        protos[k] = np.clip(img, 0, 1)
    return protos.astype(np.float32)


def default_pattern(shape, cell: int = 2) -> np.ndarray:
    """Checkerboard of ``cell`` x ``cell`` squares; larger cells reach deeper layers."""
    if cell < 1:
        raise DataError("checkerboard cell must be >= 1")
    h, w, c = shape
    yy, xx = np.mgrid[0:h, 0:w]
    board = ((yy // cell + xx // cell) % 2).astype(np.float32)
    return np.repeat(board[..., None], c, axis=2)


def synth_generate(spec: SynthSpec, n: int, seed: int) -> Dataset:
    """Class prototypes plus Gaussian noise, clipped to [0, 1].

    With a property spec, exactly ``round(prevalence * n)`` examples chosen at
    random get the pattern blended in at weight ``alpha``.
    """
    if n < 1:
        raise DataError("need at least one example")
    rng = np.random.default_rng(seed)
    protos = class_prototypes(spec)
    labels = rng.integers(0, spec.classes, size=n)
    images = protos[labels] + rng.normal(0, 1, size=(n,) + tuple(spec.shape)).astype(np.float32) * np.float32(spec.sigma)
    flags = None
    if spec.prop is not None:
        pattern = spec.prop.pattern if spec.prop.pattern is not None else default_pattern(spec.shape)
        pattern = np.asarray(pattern, dtype=np.float32)
        if pattern.shape != tuple(spec.shape):
            raise DataError(f"property pattern shape {pattern.shape} != image shape {spec.shape}")
        flags = np.zeros(n, dtype=bool)
        flags[rng.permutation(n)[:int(round(spec.prop.prevalence * n))]] = True
        a = np.float32(spec.prop.alpha)
        images[flags] = (1 - a) * images[flags] + a * pattern
    images = np.clip(images, 0, 1).astype(np.float32)
    return Dataset(images, one_hot(labels, spec.classes), flags)


def with_property(dataset: Dataset, prop: PropertySpec, flags: np.ndarray) -> Dataset:
    """Blend the property pattern into the flagged rows of an existing dataset."""
    flags = np.asarray(flags, dtype=bool)
    pattern = prop.pattern if prop.pattern is not None else default_pattern(dataset.images.shape[1:])
    images = dataset.images.copy()
    a = np.float32(prop.alpha)
    images[flags] = np.clip((1 - a) * images[flags] + a * pattern, 0, 1)
    return Dataset(images, dataset.labels, flags)


# ---------------------------------------------------------------------------
# partitioning

def partition(dataset: Dataset, k: int, mode: str = "iid", seed: int = 0) -> list[Dataset]:
    """Split into ``k`` disjoint, exhaustive client datasets.

    ``iid`` shuffles then cuts contiguous, near-equal pieces. ``by_property``
    puts every property-positive example on client 0 and tops the clients up
    with the remaining examples.
    """
    n = len(dataset)
    if k < 1 or k > n:
        raise DataError(f"cannot split {n} examples across {k} clients")
    rng = np.random.default_rng(seed)
    if mode == "iid":
        return [dataset.subset(ix) for ix in np.array_split(rng.permutation(n), k)]
    if mode != "by_property":
        raise DataError(f"unknown partition mode {mode!r}")
    if dataset.property_flags is None:
        raise DataError("by_property partition needs property flags")
    pos = rng.permutation(np.flatnonzero(dataset.property_flags))
    neg = rng.permutation(np.flatnonzero(~dataset.property_flags))
    sizes = [len(a) for a in np.array_split(np.arange(n), k)]
    fill0 = max(sizes[0] - len(pos), 0)
    parts = [np.concatenate([pos, neg[:fill0]])]
    rest = np.array_split(neg[fill0:], k - 1) if k > 1 else []
    parts.extend(rest)
    return [dataset.subset(ix) for ix in parts]


# ---------------------------------------------------------------------------
# native cache format
#   magic b"GSDS1", then u32 N, h, w, c, classes, has_property,
#   N*h*w*c little-endian float32 pixels, N label bytes, N property bytes (if any)

_DS_MAGIC = b"GSDS1"


def save_dataset(dataset: Dataset, path) -> Path:
    n, h, w, c = dataset.images.shape
    if dataset.classes > 256:
        raise DataError("label bytes hold at most 256 classes")
    has_prop = dataset.property_flags is not None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_DS_MAGIC)
        fh.write(struct.pack("<6I", n, h, w, c, dataset.classes, int(has_prop)))
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
        fh.write(dataset.label_index.astype(np.uint8).tobytes())
        if has_prop:
            fh.write(dataset.property_flags.astype(np.uint8).tobytes())
    return path


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:5] != _DS_MAGIC:
        raise DataError("not a dataset cache file")
    n, h, w, c, classes, has_prop = struct.unpack_from("<6I", raw, 5)
    off = 5 + 24
    count = n * h * w * c
    expect = off + 4 * count + n + (n if has_prop else 0)
    if len(raw) != expect:
        raise DataError(f"dataset cache has {len(raw)} bytes, expected {expect}")
    images = np.frombuffer(raw, dtype="<f4", count=count, offset=off).astype(np.float32)
    off += 4 * count
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off)
    off += n
    flags = None
    if has_prop:
        flags = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off).astype(bool)
    return Dataset(images.reshape(n, h, w, c), one_hot(labels, classes), flags)
