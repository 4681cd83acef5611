"""Property inference from consecutive global-model snapshots.

The attacker knows the aggregation composition: each cycle the update is
the mean gradient of a union batch in which one client (the victim) holds
``victim_share`` of the examples. For each snapshot it computes reference
gradients of union batches built from its own data, with and without the
property in the victim's share, and trains a classifier on them. The
classifier is then applied to the observed update ``(W_t - W_{t+1}) / lr``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import nn
from ..fl import snapshot_delta
from ..nn import Model
from .gradset import GradDataset, build_rows, impute_mean
from .metrics import auc
from .mia import layer_groups
from .models import train_attack_model
from .outcome import AttackOutcome


def _protected(pset) -> frozenset:
    return frozenset(getattr(pset, "protected", pset) or ())


def _batches_at(source, t: int) -> Sequence:
    return source(t) if callable(source) else source


def block_gradients(model: Model, X, Y) -> dict:
    _, g = nn.gradients(model, X, Y)
    return {l: g.dW[i] for l, i in enumerate(model.weighted_index, start=1)}


def dpia_build_dataset(snapshots, lr: float, aux_prop, aux_nonprop, schedule) -> GradDataset:
    """Attacker training rows: reference gradients of auxiliary batches at each snapshot.

    ``aux_prop``/``aux_nonprop`` are sequences of ``(X, Y)`` batches or
    callables ``t -> batches``. Layers protected at cycle ``t`` are masked
    in that cycle's rows, since their update is not observable then.
    """
    snapshots = list(snapshots)
    if len(snapshots) < 2:
        raise ValueError("need at least two snapshots")
    if len(schedule) != len(snapshots) - 1:
        raise ValueError(f"schedule has {len(schedule)} entries for {len(snapshots) - 1} snapshot pairs")
    if not lr > 0:
        raise ValueError("lr must be positive")
    arch = snapshots[0]
    rows, labels = [], []
    for t, pset in enumerate(schedule):
        hidden = _protected(pset)
        for label, source in ((1, aux_prop), (0, aux_nonprop)):
            for X, Y in _batches_at(source, t):
                g = block_gradients(snapshots[t], X, Y)
                rows.append({l: v for l, v in g.items() if l not in hidden})
                labels.append(label)
    return build_rows(rows, labels, layer_groups(arch))


def snapshot_rows(snapshots, lr: float, schedule, labels) -> GradDataset:
    """Rows of observed updates ``(W_t - W_{t+1}) / lr`` restricted to unprotected layers."""
    snapshots = list(snapshots)
    if len(schedule) != len(snapshots) - 1 or len(labels) != len(schedule):
        raise ValueError("schedule, labels and snapshot pairs must align")
    arch = snapshots[0]
    idx = arch.weighted_index
    rows = []
    for t, pset in enumerate(schedule):
        hidden = _protected(pset)
        delta = snapshot_delta(snapshots[t], snapshots[t + 1], lr)
        rows.append({l: delta[i] for l, i in enumerate(idx, start=1) if l not in hidden})
    return build_rows(rows, labels, layer_groups(arch))


def dpia_run(train: GradDataset, test: GradDataset, family: str = "forest", seed: int = 0,
             policy: str = "none") -> AttackOutcome:
    """Impute, fit on ``train``, score ``test``; the outcome carries the test AUC."""
    if train.groups != test.groups:
        raise ValueError("train and test rows have different column groups")
    model = train_attack_model(train, family, seed)
    filled = impute_mean(test, means=train.column_means())
    scores = model.score(filled.features)
    value = auc(scores, filled.labels)
    return AttackOutcome("DPIA", "AUC", value, seed, policy,
                         extra={"family": family, "train_rows": len(train), "test_rows": len(test)})


def union_batch(parts: Sequence) -> tuple:
    """Concatenate ``(X, Y)`` parts into one batch."""
    return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))


