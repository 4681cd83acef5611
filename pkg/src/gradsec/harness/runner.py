"""Single experiment runs and their on-disk artifacts.

A run directory holds::

    meta.json        resolved configuration, seeds, policy (re-runnable)
    metrics.csv      one row per cycle, attack metric on the evaluation cycle
    outcome.json     attack outcome (absent for attack "none")
    snapshots/cycle_<t>.bin      global model before cycle t (and after the last)
    traces/cycle_<t>_client_<id>.trace   redacted client traces, when kept
    reconstruction.f32, preview.pgm|ppm, curve.csv   DRIA only
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__, serialize
from ..attacks.outcome import AttackOutcome, write_preview
from ..shield import DynamicPolicy, memory_footprint, redact
from ..trace import write_trace
from . import experiments as ex
from .config import ExperimentConfig

METRIC_COLUMNS = ["cycle", "protected", "location", "train_loss", "footprint_bytes",
                  "metric", "value"]


@dataclass
class RunReport:
    run_dir: Path
    rows: list
    manifest: list = field(default_factory=list)
    outcome: AttackOutcome | None = None
    meta: dict = field(default_factory=dict)


def run_id(cfg: ExperimentConfig) -> str:
    return f"{cfg.name}-seed{cfg.seed}"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def _tuning_size(cfg: ExperimentConfig) -> int | None:
    text = cfg.policy.strip().lower()
    if text.startswith("dynamic:") and text.endswith(":auto"):
        return int(text.split(":")[1])
    return None


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None) -> RunReport:
    """Validate, simulate, attack, and persist; nothing is written if validation fails."""
    cfg = cfg.validate()
    run_dir = Path(out if out is not None else cfg.out) / run_id(cfg)
    auto = _tuning_size(cfg)
    policy = None if auto else cfg.shield_policy()

    outcome = None
    vmw = None
    if cfg.attack == "dpia":
        dp = ex.dpia_simulate(cfg, keep_traces=cfg.save_traces)
        point = ex.dpia_points(cfg, [("auto", auto) if auto else policy], dp)[0]
        outcome, sched, vmw = point.outcome, point.schedule, point.vmw
        reports, history = dp.reports, [(t, m) for t, m in enumerate(dp.snapshots)]
        batch = cfg.dpia_batch
    else:
        if cfg.attack == "mia":
            data = ex.make_data(cfg, cfg.mia_members)
        else:
            data = ex.make_data(cfg, cfg.clients * cfg.examples_per_client)
        sim = ex.simulate(cfg, data, policy)
        reports, history = sim.reports, list(sim.server.history)
        sched = [r.pset for r in reports]
        batch = cfg.batch_size or cfg.examples_per_client
        if cfg.attack == "mia":
            batch = cfg.batch_size or cfg.mia_members
            point = ex.mia_points(cfg, [policy], sim)[0]
            outcome = point.outcome
        elif cfg.attack == "dria":
            point = ex.dria_points(cfg, [policy], sim)[0]
            outcome = point.outcome

    run_dir.mkdir(parents=True, exist_ok=True)
    manifest: list[Path] = []
    model0 = history[0][1]
    eval_cycle = {"dria": 0}.get(cfg.attack, cfg.cycles - 1)
    rows = []
    for t, pset in enumerate(sched):
        losses = reports[t].losses if t < len(reports) else {}
        loss = float(np.mean(list(losses.values()))) if losses else None
        row = {
            "cycle": t,
            "protected": " ".join(str(l) for l in pset.sorted()),
            "location": pset.location,
            "train_loss": loss,
            "footprint_bytes": memory_footprint(model0, pset, batch).bytes_total,
            "metric": outcome.metric if outcome and t == eval_cycle else None,
            "value": outcome.value if outcome and t == eval_cycle else None,
        }
        rows.append(row)
    manifest.append(_write_metrics(run_dir / "metrics.csv", rows))

    snap_dir = run_dir / "snapshots"
    for t, model in history:
        manifest.append(serialize.save(model, snap_dir / f"cycle_{t}.bin"))
    if cfg.save_traces:
        for report in reports:
            for cid, trace in report.traces.items():
                if not trace.records:
                    continue
                view = redact(trace, sched[report.cycle])
                path = run_dir / "traces" / f"cycle_{report.cycle}_client_{cid}.trace"
                manifest.append(_write_view(path, view))

    if outcome is not None:
        if cfg.attack == "dria" and outcome.tensor is not None:
            manifest.extend(_write_dria(run_dir, outcome))
        outcome.artifacts = {p.name: str(p.relative_to(run_dir)) for p in manifest
                             if p.parent == run_dir}
        manifest.append(outcome.save(run_dir / "outcome.json"))

    meta = {
        "config": cfg.to_dict(),
        "run_id": run_id(cfg),
        "seed": cfg.seed,
        "policy": cfg.policy,
        "resolved_policy": (DynamicPolicy(auto, vmw).describe() if vmw is not None
                            else (policy.describe() if policy is not None else cfg.policy)),
        "schedule": [{"cycle": p.cycle, "protected": p.sorted(), "location": p.location}
                     for p in sched],
        "version": __version__,
    }
    if vmw is not None:
        meta["vmw"] = list(vmw)
    meta_path = run_dir / "meta.json"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    manifest.append(meta_path)
    return RunReport(run_dir, rows, manifest, outcome, meta)


def _write_metrics(path: Path, rows: list) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
    path.write_text(buf.getvalue())
    return path


def _write_view(path: Path, view) -> Path:
    from ..trace import RawTrace

    shell = RawTrace(view.n_layers, view.cycle, view.client, view.records)
    return write_trace(path, shell, view.mask)


def _write_dria(run_dir: Path, outcome: AttackOutcome) -> list[Path]:
    rec = np.asarray(outcome.tensor, dtype="<f4")
    paths = []
    p = run_dir / "reconstruction.f32"
    p.write_bytes(rec.tobytes())
    paths.append(p)
    suffix = "pgm" if rec.shape[-1] == 1 else "ppm"
    if rec.shape[-1] in (1, 3):
        paths.append(write_preview(rec, run_dir / f"preview.{suffix}"))
    p = run_dir / "curve.csv"
    p.write_text("iteration,match_loss\n" + "".join(
        f"{i},{v:.9g}\n" for i, v in enumerate(outcome.curve or [])))
    paths.append(p)
    return paths
