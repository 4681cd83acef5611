"""End-to-end attack pipelines.

Shielding never changes what a client computes, only what leaves the
enclave, so one federated run can be evaluated under several protection
policies. Each ``*_points`` function trains once and returns one result per
policy; ``run_experiment`` uses them with a single policy.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import nn
from ..attacks.dpia import block_gradients, dpia_run, snapshot_rows, union_batch
from ..attacks.dria import DriaConfig, attacker_model, dria
from ..attacks.gradset import build_rows, schedule_mask
from ..attacks.metrics import auc
from ..attacks.mia import layer_groups, mia_build_dataset, probe_trace
from ..attacks.models import train_attack_model, trainer
from ..attacks.outcome import AttackOutcome
from ..data import (Dataset, PropertySpec, SynthSpec, default_pattern, load_cifar, partition,
                    synth_generate)
from ..fl import ClientState, ServerState, TrainConfig, run_cycle
from ..shield import (DynamicPolicy, NoPolicy, ProtectedSet, redact, schedule, simplex_grid,
                      tune_vmw, window_locations)
from .config import ExperimentConfig

# independent random streams, combined with the run seed
STREAM_DATA, STREAM_PROBE, STREAM_SPLIT, STREAM_ATTACKER, STREAM_DPIA, STREAM_TUNE = range(1, 7)


@dataclass
class PointResult:
    policy: str
    outcome: AttackOutcome
    schedule: list
    vmw: tuple | None = None


@dataclass
class Simulation:
    server: ServerState
    reports: list
    clients: list = field(default_factory=list)


def _seed(cfg: ExperimentConfig, stream: int, *more) -> list:
    return [int(cfg.seed), stream, *[int(m) for m in more]]


def synth_spec(cfg: ExperimentConfig, prop: PropertySpec | None = None) -> SynthSpec:
    specs, shape = cfg.arch()
    classes = specs[-1].units
    return SynthSpec(classes=classes, shape=shape, prototype_seed=cfg.synth_prototype_seed,
                     sigma=cfg.synth_sigma, prop=prop)


def make_data(cfg: ExperimentConfig, n: int, stream: int = 0) -> Dataset:
    """``n`` examples from the configured source; CIFAR files are sampled without replacement."""
    seed = int(np.random.default_rng(_seed(cfg, STREAM_DATA, stream)).integers(2**31))
    if cfg.dataset == "synth":
        return synth_generate(synth_spec(cfg), n, seed)
    variant, _, path = cfg.dataset.partition(":")
    full = load_cifar(path, variant)
    if n > len(full):
        raise ValueError(f"{path} holds {len(full)} records, {n} requested")
    return full.subset(np.random.default_rng(seed).permutation(len(full))[:n])


def simulate(cfg: ExperimentConfig, data: Dataset, policy=None, train: TrainConfig | None = None):
    """Run ``cfg.cycles`` federated cycles over ``data`` split across ``cfg.clients``."""
    from ..shield import policy_rng

    policy = NoPolicy() if policy is None else policy
    train = train or TrainConfig(cfg.lr, cfg.epochs_per_cycle, cfg.batch_size, cfg.seed,
                                 cfg.trace_mode)
    parts = partition(data, cfg.clients, "iid", cfg.seed) if cfg.clients > 1 else [data]
    clients = [ClientState(i, p, True, cfg.seed) for i, p in enumerate(parts)]
    server = ServerState.start(cfg.initial_model())
    reports = []
    for t in range(cfg.cycles):
        server, report = run_cycle(server, clients, train, policy, policy_rng(cfg.seed, t))
        reports.append(report)
    return Simulation(server, reports, clients)


# ---------------------------------------------------------------------------
# DRIA

def dria_points(cfg: ExperimentConfig, policies, sim: Simulation | None = None) -> list[PointResult]:
    """Reconstruct the victim's first training example of cycle 0 under each policy."""
    if sim is None:
        data = make_data(cfg, cfg.clients * cfg.examples_per_client)
        sim = simulate(cfg, data)
    victim = sim.clients[0]
    trace = sim.reports[0].traces[victim.id]
    broadcast = sim.server.history[0][1]
    x_true = victim.data.images[0]
    if cfg.examples_per_client != 1 and (cfg.batch_size in (0, None) or cfg.batch_size > 1):
        x_true = None  # batch gradients: no single ground truth to score against
    out = []
    dcfg = DriaConfig(cfg.dria_optimizer, cfg.dria_iterations, cfg.dria_step, cfg.seed)
    for policy in policies:
        sched = schedule(policy, cfg.cycles, cfg.seed)
        view = redact(trace, sched[0])
        arch = attacker_model(broadcast, view.protected,
                              int(np.random.default_rng(_seed(cfg, STREAM_ATTACKER)).integers(2**31)))
        outcome = dria(view, arch, view.gradients(), dcfg, x_true=x_true, policy=policy.describe())
        out.append(PointResult(policy.describe(), outcome, sched))
    return out


# ---------------------------------------------------------------------------
# MIA

def mia_points(cfg: ExperimentConfig, policies, sim: Simulation | None = None,
               family: str | None = None) -> list[PointResult]:
    """Members are every client's training data; non-members are fresh draws."""
    family = family or cfg.family()
    n = cfg.mia_members
    if sim is None:
        sim = simulate(cfg, make_data(cfg, n))
    members = _concat_client_data(sim.clients)
    outsiders = make_data(cfg, len(members), stream=1)
    model = sim.server.model
    last = cfg.cycles - 1
    probes = [probe_trace(model, x, y, cycle=last)
              for d in (members, outsiders) for x, y in zip(d.images, d.labels)]
    flags = np.r_[np.ones(len(members)), np.zeros(len(outsiders))].astype(np.int64)
    order = np.random.default_rng(_seed(cfg, STREAM_SPLIT)).permutation(len(flags))
    train_idx, test_idx = order[: len(order) // 2], order[len(order) // 2:]
    out = []
    for policy in policies:
        sched = schedule(policy, cfg.cycles, cfg.seed)
        views = [redact(p, sched[last]) for p in probes]
        data = mia_build_dataset(views, flags, model)
        train, test = data.subset(train_idx), data.subset(test_idx)
        value = _fit_and_score(train, test, family, cfg.seed)
        outcome = AttackOutcome("MIA", "AUC", value, cfg.seed, policy.describe(),
                                extra={"family": family, "members": len(members),
                                       "protected": sorted(sched[last].protected)})
        out.append(PointResult(policy.describe(), outcome, sched))
    return out


def _concat_client_data(clients) -> Dataset:
    from ..data import concat

    return concat([c.data for c in clients]) if len(clients) > 1 else clients[0].data


def _fit_and_score(train, test, family, seed) -> float:
    from ..attacks.gradset import impute_mean

    model = train_attack_model(train, family, seed)
    filled = impute_mean(test, means=train.column_means())
    return auc(model.score(filled.features), filled.labels)


# ---------------------------------------------------------------------------
# DPIA

@dataclass
class DpiaRun:
    snapshots: list
    labels: np.ndarray  # victim batch carried the property at cycle t
    aux: object  # unmasked attacker reference rows (GradDataset)
    aux_cycles: np.ndarray
    reports: list = field(default_factory=list)


def dpia_simulate(cfg: ExperimentConfig, keep_traces: bool = False) -> DpiaRun:
    """Federated run with a property-bearing victim plus the attacker's reference rows.

    Each cycle every client trains one full-batch step on a fresh batch of
    ``dpia_batch`` examples. The victim (client 0) draws its batch from its
    property-positive pool with probability ``dpia_prevalence``.
    """
    from ..shield import policy_rng

    b, k = cfg.dpia_batch, cfg.clients
    if k < 1:
        raise ValueError("DPIA needs at least one client")
    pool = max(4 * b, 32)
    pattern = default_pattern(cfg.arch()[1], cfg.property_cell)
    prop = PropertySpec(pattern, cfg.property_alpha, 0.5 / k)
    spec = synth_spec(cfg, prop)
    population = synth_generate(spec, k * pool, int(np.random.default_rng(
        _seed(cfg, STREAM_DATA)).integers(2**31)))
    parts = partition(population, k, "by_property", cfg.seed)
    victim_pos = parts[0].subset(np.flatnonzero(parts[0].property_flags))
    victim_neg = parts[0].subset(np.flatnonzero(~parts[0].property_flags))
    aux_spec = synth_spec(cfg, PropertySpec(pattern, cfg.property_alpha, 0.5))
    aux = synth_generate(aux_spec, 16 * b, int(np.random.default_rng(
        _seed(cfg, STREAM_ATTACKER)).integers(2**31)))
    aux_pos = aux.subset(np.flatnonzero(aux.property_flags))
    aux_neg = aux.subset(np.flatnonzero(~aux.property_flags))

    train = TrainConfig(cfg.lr, 1, 0, cfg.seed, cfg.trace_mode if keep_traces else "none")
    server = ServerState.start(cfg.initial_model())
    labels = np.zeros(cfg.cycles, dtype=np.int64)
    rows, row_labels, row_cycles, reports = [], [], [], []
    for t in range(cfg.cycles):
        rng = np.random.default_rng(_seed(cfg, STREAM_DPIA, t))
        labels[t] = int(rng.random() < cfg.dpia_prevalence)
        src = victim_pos if labels[t] else victim_neg
        batches = [_draw(src, b, rng)] + [_draw(parts[i], b, rng) for i in range(1, k)]
        clients = [ClientState(i, d, True, cfg.seed) for i, d in enumerate(batches)]
        # attacker reference gradients at the broadcast snapshot
        for label, share in ((1, aux_pos), (0, aux_neg)):
            for _ in range(cfg.dpia_aux):
                parts_xy = [_xy(_draw(share, b, rng))] + [_xy(_draw(aux_neg, b, rng)) for _ in range(1, k)]
                X, Y = union_batch(parts_xy)
                rows.append(block_gradients(server.model, X, Y))
                row_labels.append(label)
                row_cycles.append(t)
        server, report = run_cycle(server, clients, train, NoPolicy(), policy_rng(cfg.seed, t),
                                   workers=1)
        reports.append(report)
    snapshots = [m for _, m in server.history]
    aux_rows = build_rows(rows, row_labels, layer_groups(server.model))
    return DpiaRun(snapshots, labels, aux_rows, np.asarray(row_cycles), reports)


def _draw(data: Dataset, b: int, rng) -> Dataset:
    return data.subset(rng.choice(len(data), size=b, replace=len(data) < b))


def _xy(d: Dataset):
    return d.images, d.labels


def tuned_policy(cfg: ExperimentConfig, run: DpiaRun, size: int, family: str):
    """Dynamic policy whose V_MW leaves the attack weakest on held-out reference rows."""
    n = len(run.aux.groups)
    cands = simplex_grid(window_locations(n, size), cfg.dpia_candidates,
                         int(np.random.default_rng(_seed(cfg, STREAM_TUNE)).integers(2**31)))
    order = np.random.default_rng(_seed(cfg, STREAM_TUNE, 1)).permutation(len(run.aux))
    half = len(order) // 2
    train, val = run.aux.subset(order[:half]), run.aux.subset(order[half:])
    vmw, aucs = tune_vmw(cands, train, val, trainer(family, cfg.seed), size, cfg.seed)
    return DynamicPolicy(size, vmw), cands, aucs


def dpia_points(cfg: ExperimentConfig, policies, run: DpiaRun | None = None,
                family: str | None = None) -> list[PointResult]:
    """``policies`` may hold ``("auto", size)`` to tune a moving window for this run."""
    family = family or cfg.family()
    run = run or dpia_simulate(cfg)
    out = []
    for policy in policies:
        vmw = None
        tuning = {}
        if isinstance(policy, tuple) and policy[0] == "auto":
            policy, cands, aucs = tuned_policy(cfg, run, policy[1], family)
            vmw = policy.vmw
            tuning = {"candidates": [list(c) for c in cands], "validation_auc": aucs}
        sched = schedule(policy, cfg.cycles, cfg.seed)
        train = schedule_mask(run.aux, run.aux_cycles, sched)
        test = snapshot_rows(run.snapshots, cfg.lr, sched, run.labels)
        outcome = dpia_run(train, test, family, cfg.seed, policy.describe())
        outcome.extra.update(tuning)
        out.append(PointResult(policy.describe(), outcome, sched, vmw))
    return out
