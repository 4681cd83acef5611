"""Federated training: clients, local SGD, FedAvg, and the snapshot history.

Clients are trained from the same broadcast weights each cycle. With
``workers > 1`` they run on a thread pool; the result is identical because
each client owns its random stream and aggregation order is fixed.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .data import Dataset
from .nn import Model
from .shield import ProtectedSet, ShieldPolicy, resolve_policy, validate_policy
from .trace import RawTrace, record_step

TRACE_MODES = ("all", "first", "none")


class FLError(ValueError):
    pass


@dataclass(frozen=True)
class ClientState:
    id: int
    data: Dataset
    tee_capable: bool = True
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    epochs_per_cycle: int = 1
    batch_size: int = 0  # 0 means full batch
    seed: int = 0
    trace_mode: str = "all"  # which steps the trace keeps: every one, the first, or none

    def __post_init__(self):
        if not self.lr > 0:
            raise FLError("lr must be positive")
        if self.epochs_per_cycle < 1:
            raise FLError("epochs_per_cycle must be at least 1")
        if self.batch_size < 0:
            raise FLError("batch_size must be >= 0")
        if self.trace_mode not in TRACE_MODES:
            raise FLError(f"trace_mode must be one of {TRACE_MODES}")


@dataclass(frozen=True)
class ServerState:
    model: Model
    cycle: int = 0
    history: tuple = ()  # ((t, Model), ...), snapshot t taken before cycle t trains

    @classmethod
    def start(cls, model: Model) -> "ServerState":
        return cls(model, 0, ((0, model),))


@dataclass
class CycleReport:
    cycle: int
    pset: ProtectedSet
    traces: dict = field(default_factory=dict)  # client id -> RawTrace
    updates: dict = field(default_factory=dict)  # client id -> (Model, sample count)
    losses: dict = field(default_factory=dict)  # client id -> mean loss over steps
    global_model: Model | None = None


def client_rng(client: ClientState, cycle: int) -> np.random.Generator:
    return np.random.default_rng([int(client.seed), 0xC1, int(client.id), int(cycle)])


def local_train(model: Model, client: ClientState, train: TrainConfig, cycle: int = 0):
    """Mini-batch SGD on one client's data. Returns ``(model, trace, mean_loss)``."""
    data = client.data
    n = len(data)
    if n == 0:
        raise FLError(f"client {client.id} has no data")
    bs = n if train.batch_size in (0, None) or train.batch_size >= n else train.batch_size
    rng = client_rng(client, cycle)
    trace = RawTrace(model.n, cycle, client.id)
    step, losses = 0, []
    for _ in range(train.epochs_per_cycle):
        order = np.arange(n) if bs == n else rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            X, Y = data.images[idx], data.labels[idx]
            cache, grads = nn.gradients(model, X, Y)
            new = nn.sgd_step(model, grads, train.lr)
            if train.trace_mode == "all" or (train.trace_mode == "first" and step == 0):
                record_step(trace, step, model, cache, grads, new)
            losses.append(grads.loss)
            model = new
            step += 1
    return model, trace, float(np.mean(losses))


def aggregate(updates) -> Model | list:
    """Sample-count-weighted mean of client weights (FedAvg).

    ``updates`` holds ``(weights, count)`` pairs where ``weights`` is a
    :class:`Model` or a list of arrays (``None`` entries pass through).
    """
    updates = list(updates)
    if not updates:
        raise FLError("nothing to aggregate")
    counts = np.array([float(c) for _, c in updates])
    if np.any(counts <= 0):
        raise FLError("sample counts must be positive")
    frac = counts / counts.sum()
    first = updates[0][0]
    as_model = isinstance(first, Model)
    lists = [list(w.weights) if isinstance(w, Model) else list(w) for w, _ in updates]
    width = len(lists[0])
    if any(len(ws) != width for ws in lists):
        raise FLError("updates have different layer counts")
    out = []
    for i in range(width):
        parts = [ws[i] for ws in lists]
        if parts[0] is None:
            if any(p is not None for p in parts):
                raise FLError(f"layer {i}: weighted and unweighted updates mixed")
            out.append(None)
            continue
        shape = np.shape(parts[0])
        if any(np.shape(p) != shape for p in parts):
            raise FLError(f"layer {i}: update shapes differ")
        acc = np.zeros(shape, dtype=np.float64)
        for f, p in zip(frac, parts):
            acc += f * np.asarray(p, dtype=np.float64)
        lo = np.min(parts, axis=0)
        hi = np.max(parts, axis=0)
        # keep the mean inside the convex hull despite rounding
        out.append(np.clip(acc, lo, hi).astype(np.float32))
    if as_model:
        return Model(first.input_shape, first.specs, tuple(out))
    return out


def snapshot_delta(w_t, w_t1, lr: float):
    """``(W_t - W_{t+1}) / lr``: the gradient that moved ``W_t`` to ``W_{t+1}``.

    Sign chosen so the result equals the gradient SGD applied; the plain
    difference ``W_{t+1} - W_t`` over ``lr`` would be its negation.
    Accepts two Models (returns a per-spec list) or two arrays.
    """
    if not lr > 0:
        raise FLError("lr must be positive")
    if isinstance(w_t, Model):
        return [None if a is None else snapshot_delta(a, b, lr)
                for a, b in zip(w_t.weights, w_t1.weights)]
    a = np.asarray(w_t, dtype=np.float64)
    b = np.asarray(w_t1, dtype=np.float64)
    if a.shape != b.shape:
        raise FLError(f"snapshot shapes differ: {a.shape} vs {b.shape}")
    return (a - b) / lr


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("GRADSEC_THREADS", "1")))
    except ValueError:
        return 1


def run_cycle(server: ServerState, clients, train: TrainConfig, policy: ShieldPolicy,
              rng: np.random.Generator, workers: int | None = None):
    """One broadcast, local-training, aggregation round."""
    validate_policy(policy, server.model.n)
    selected = [c for c in clients if c.tee_capable]
    if not selected:
        raise FLError("no TEE-capable client available for this cycle")
    pset = resolve_policy(policy, server.cycle, rng)
    workers = thread_count() if workers is None else workers

    def job(c):
        return local_train(server.model, c, train, server.cycle)

    if workers > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, selected))
    else:
        results = [job(c) for c in selected]

    report = CycleReport(server.cycle, pset)
    for c, (model, trace, loss) in zip(selected, results):
        report.traces[c.id] = trace
        report.updates[c.id] = (model, len(c.data))
        report.losses[c.id] = loss
    new_global = aggregate(report.updates.values())
    report.global_model = new_global
    t = server.cycle + 1
    new_server = replace(server, model=new_global, cycle=t,
                         history=server.history + ((t, new_global),))
    return new_server, report
