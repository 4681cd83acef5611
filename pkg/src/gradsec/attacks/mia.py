"""Membership inference from per-example gradients."""
from __future__ import annotations

import numpy as np

from .. import nn
from ..nn import Model
from ..trace import RawTrace, record_step
from .gradset import GradDataset, build_rows, groups_from_sizes


def layer_groups(arch: Model) -> dict:
    return groups_from_sizes({l: n for l, n in enumerate(arch.param_counts(), start=1)})


def probe_trace(model: Model, x, y, cycle: int = 0, client: int = 0) -> RawTrace:
    """Trace of one forward/backward pass of a single example (no update applied)."""
    X = np.asarray(x, dtype=np.float32).reshape((1,) + model.input_shape)
    Y = np.asarray(y, dtype=np.float32).reshape(1, -1)
    cache, grads = nn.gradients(model, X, Y)
    trace = RawTrace(model.n, cycle, client)
    record_step(trace, 0, model, cache, grads, model)
    return trace


def mia_build_dataset(views, member_flags, arch: Model) -> GradDataset:
    """One row per probe: the flattened dW of every observable layer."""
    views = list(views)
    flags = np.asarray(member_flags, dtype=np.int64).ravel()
    if len(flags) != len(views):
        raise ValueError("one membership flag per probe view is required")
    seen: dict = {}
    for v in views:
        if seen.setdefault(v.cycle, v.protected) != v.protected:
            raise ValueError(f"probe views of cycle {v.cycle} disagree on observable layers")
    rows = [v.gradients() for v in views]
    return build_rows(rows, flags, layer_groups(arch))
