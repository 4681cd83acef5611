"""Tables of leaked gradients, grouped into per-layer column blocks.

Masked entries hold NaN. A row's mask is per layer group, so a protected
layer blanks its whole block.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GradDataset:
    features: np.ndarray  # (rows, width) float64, NaN where masked
    labels: np.ndarray  # (rows,) int
    groups: dict  # layer -> (start, stop)
    mask: np.ndarray  # (rows, len(groups)) bool, columns in sorted layer order

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2:
            f = f.reshape(len(f), self.width_of(self.groups))
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64).ravel())
        m = np.asarray(self.mask, dtype=bool).reshape(len(f), len(self.groups))
        object.__setattr__(self, "mask", m)
        if len(self.labels) != len(f):
            raise ValueError("one label per row is required")
        if f.shape[1] != self.width_of(self.groups):
            raise ValueError("row width does not match the column groups")

    @staticmethod
    def width_of(groups: dict) -> int:
        return max((stop for _, stop in groups.values()), default=0)

    @property
    def layers(self) -> list[int]:
        return sorted(self.groups)

    @property
    def width(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "GradDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return GradDataset(self.features[idx], self.labels[idx], self.groups, self.mask[idx])

    def with_mask(self, mask: np.ndarray) -> "GradDataset":
        """Apply an additional per-row, per-group mask (sentinel written in)."""
        mask = np.asarray(mask, dtype=bool) | self.mask
        feats = self.features.copy()
        for j, layer in enumerate(self.layers):
            a, b = self.groups[layer]
            feats[mask[:, j], a:b] = np.nan
        return GradDataset(feats, self.labels, self.groups, mask)

    def column_means(self) -> np.ndarray:
        """Mean of the observed entries per column; 0 where nothing is observed."""
        f = self.features
        observed = ~np.isnan(f)
        count = observed.sum(axis=0)
        total = np.where(observed, f, 0.0).sum(axis=0)
        return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def groups_from_sizes(sizes: dict) -> dict:
    """``{layer: size}`` -> ``{layer: (start, stop)}`` in layer order."""
    out, pos = {}, 0
    for layer in sorted(sizes):
        out[layer] = (pos, pos + int(sizes[layer]))
        pos += int(sizes[layer])
    return out


def build_rows(row_grads: list, labels, groups: dict) -> GradDataset:
    """Assemble a dataset from per-row ``{layer: array}`` dicts; absent layers are masked."""
    layers = sorted(groups)
    width = GradDataset.width_of(groups)
    feats = np.full((len(row_grads), width), np.nan)
    mask = np.ones((len(row_grads), len(layers)), dtype=bool)
    for r, grads in enumerate(row_grads):
        for j, layer in enumerate(layers):
            g = grads.get(layer)
            if g is None:
                continue
            a, b = groups[layer]
            flat = np.asarray(g, dtype=np.float64).ravel()
            if flat.size != b - a:
                raise ValueError(f"layer {layer}: {flat.size} values for a {b - a}-wide group")
            feats[r, a:b] = flat
            mask[r, j] = False
    return GradDataset(feats, labels, groups, mask)


def impute_mean(data: GradDataset, means: np.ndarray | None = None) -> GradDataset:
    """Replace masked entries by column means and clear the mask.

    ``means`` defaults to the observed means of ``data`` itself; pass the
    training set's means to fill a test set.
    """
    if means is None:
        means = data.column_means()
    feats = data.features
    holes = np.isnan(feats)
    if holes.any():
        feats = np.where(holes, np.broadcast_to(means, feats.shape), feats)
    return GradDataset(feats, data.labels, data.groups, np.zeros_like(data.mask))


def simulate_window_missingness(data: GradDataset, vmw, size: int,
                                rng: np.random.Generator) -> GradDataset:
    """Mask each row as if a fresh moving window had been drawn for it."""
    layers = data.layers
    v = np.asarray(vmw, dtype=np.float64)
    locs = rng.choice(len(v), size=len(data), p=v / v.sum())
    mask = np.zeros_like(data.mask)
    for r, loc in enumerate(locs):
        for j in range(loc, loc + size):
            mask[r, j] = True
    return data.with_mask(mask) if len(layers) else data


def schedule_mask(data: GradDataset, row_cycles, schedule) -> GradDataset:
    """Mask each row's groups that were protected in the row's cycle."""
    layers = data.layers
    col = {l: j for j, l in enumerate(layers)}
    mask = np.zeros_like(data.mask)
    for r, t in enumerate(np.asarray(row_cycles, dtype=np.int64)):
        for l in getattr(schedule[t], "protected", schedule[t]):
            mask[r, col[l]] = True
    return data.with_mask(mask)
