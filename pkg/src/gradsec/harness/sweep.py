"""Protected-layer sweeps: one row per protection point, metric mean and sd over seeds."""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..fl import thread_count
from ..shield import DynamicPolicy, NoPolicy, StaticPolicy, window_locations
from . import experiments as ex
from .config import ExperimentConfig

AXES = ("static_single", "static_prefix", "static_suffix", "dynamic_size")


@dataclass
class SweepRow:
    point: str
    values: list
    errors: list

    @property
    def status(self) -> str:
        if not self.errors:
            return "ok"
        return "error: " + "; ".join(sorted(set(self.errors)))

    @property
    def mean(self):
        return float(np.mean(self.values)) if self.values else None

    @property
    def sd(self):
        return float(np.std(self.values, ddof=1)) if len(self.values) > 1 else (0.0 if self.values else None)


def axis_points(axis: str, n: int, attack: str = "none") -> list:
    """Policies along a sweep axis; ``("auto", size)`` marks a tuned moving window."""
    if axis == "static_single":
        return [StaticPolicy([l]) for l in range(1, n + 1)]
    if axis == "static_prefix":
        return [NoPolicy()] + [StaticPolicy(range(1, k + 1)) for k in range(1, n + 1)]
    if axis == "static_suffix":
        return [NoPolicy()] + [StaticPolicy(range(n - k + 1, n + 1)) for k in range(1, n + 1)]
    if axis == "dynamic_size":
        sizes = range(2, n) if n > 2 else range(1, n + 1)
        if attack == "dpia":
            return [("auto", s) for s in sizes]
        return [DynamicPolicy(s, [1.0 / window_locations(n, s)] * window_locations(n, s))
                for s in sizes]
    raise ValueError(f"axis must be one of {AXES}")


def point_label(policy) -> str:
    if isinstance(policy, tuple):
        return f"dynamic:{policy[1]}:auto"
    if isinstance(policy, DynamicPolicy):
        return f"dynamic:{policy.size}"
    return policy.describe()


def _seed_job(cfg: ExperimentConfig, points: list):
    """All points for one seed; training is shared, each point is attacked separately."""
    results = {}
    if cfg.attack == "dpia":
        run = ex.dpia_simulate(cfg)
        for i, p in enumerate(points):
            results[i] = _guard(lambda p=p: ex.dpia_points(cfg, [p], run)[0])
        return results
    if cfg.attack == "mia":
        sim = ex.simulate(cfg, ex.make_data(cfg, cfg.mia_members))
        fn = ex.mia_points
    elif cfg.attack == "dria":
        sim = ex.simulate(cfg, ex.make_data(cfg, cfg.clients * cfg.examples_per_client))
        fn = ex.dria_points
    else:
        raise ValueError("sweeps need an attack (dria, mia or dpia)")
    for i, p in enumerate(points):
        results[i] = _guard(lambda p=p: fn(cfg, [p], sim)[0])
    return results


def _guard(job):
    try:
        return job()
    except Exception as exc:  # recorded as an error row, never skipped
        return exc


def sweep_layers(cfg: ExperimentConfig, axis: str, seeds: int = 5, out=None) -> list[SweepRow]:
    cfg = cfg.validate()
    n = cfg.initial_model().n
    points = axis_points(axis, n, cfg.attack)
    seed_cfgs = [cfg.override(seed=cfg.seed + s) for s in range(seeds)]
    workers = min(thread_count(), len(seed_cfgs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(lambda c: _seed_job(c, points), seed_cfgs))
    else:
        per_seed = [_seed_job(c, points) for c in seed_cfgs]

    rows = [SweepRow(point_label(p), [], []) for p in points]
    root = Path(out if out is not None else cfg.out) / f"{cfg.name}-sweep-{axis}"
    for scfg, results in zip(seed_cfgs, per_seed):
        for i, res in results.items():
            point_dir = root / f"point_{i}" / f"seed_{scfg.seed}"
            point_dir.mkdir(parents=True, exist_ok=True)
            if isinstance(res, Exception):
                rows[i].errors.append(f"{type(res).__name__}: {res}")
                (point_dir / "error.txt").write_text(f"{type(res).__name__}: {res}\n")
                continue
            rows[i].values.append(float(res.outcome.value))
            res.outcome.save(point_dir / "outcome.json")
    write_table(root, rows, axis, cfg, seeds)
    return rows


def write_table(root: Path, rows: list, axis: str, cfg: ExperimentConfig, seeds: int) -> dict:
    root.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["point", "mean", "sd", "n", "status"])
    for r in rows:
        w.writerow([r.point, "" if r.mean is None else f"{r.mean:.9g}",
                    "" if r.sd is None else f"{r.sd:.9g}", len(r.values), r.status])
    table = root / "table.csv"
    table.write_text(buf.getvalue())
    dat = root / "plot.dat"
    dat.write_text("# index mean sd point\n" + "".join(
        f"{i} {r.mean:.9g} {r.sd:.9g} \"{r.point}\"\n" for i, r in enumerate(rows) if r.values))
    metric = {"dria": "ImageLoss"}.get(cfg.attack, "AUC")
    gp = root / "plot.gp"
    gp.write_text(
        "set terminal pngcairo size 800,500\n"
        f"set output '{cfg.name}-{axis}.png'\n"
        f"set ylabel '{metric}'\n"
        "set xlabel 'protected layers'\n"
        "set xtics rotate by -30\n"
        "plot 'plot.dat' using 1:2:3:xtic(4) with yerrorlines title "
        f"'{cfg.attack} ({seeds} seeds)'\n")
    (root / "sweep.json").write_text(json.dumps(
        {"axis": axis, "seeds": seeds, "config": cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
    return {"table": table, "plot": dat, "script": gp}
