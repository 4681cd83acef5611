"""``gradsec-sim``: run, sweep, tune and inspect shielded federated-learning experiments."""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from ..nn import architecture, build_model
from ..shield import (DynamicPolicy, NoPolicy, PolicyError, dynamic_footprints, memory_footprint,
                      parse_policy, validate_policy)
from ..trace import FIELDS, TraceFormatError, read_trace
from .config import ConfigError, ExperimentConfig
from .presets import PRESETS, preset


def _config(args) -> ExperimentConfig:
    if bool(args.config) == bool(args.preset):
        raise ConfigError("config", "give exactly one of -c/--config or --preset")
    cfg = ExperimentConfig.load(args.config) if args.config else preset(args.preset)
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "overrides take the form key=value")
        overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["out"] = args.out
    if overrides:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def cmd_run(args) -> int:
    from .runner import run_experiment

    report = run_experiment(_config(args))
    print(f"run directory: {report.run_dir}")
    if report.outcome is not None:
        o = report.outcome
        print(f"{o.kind} {o.metric} = {o.value:.6g} (policy {report.meta['resolved_policy']})")
    return 0


def cmd_sweep(args) -> int:
    from .sweep import sweep_layers

    cfg = _config(args)
    rows = sweep_layers(cfg, args.axis, args.seeds)
    print(f"{'point':<24}{'mean':>12}{'sd':>12}{'n':>4}  status")
    for r in rows:
        mean = "" if r.mean is None else f"{r.mean:.4f}"
        sd = "" if r.sd is None else f"{r.sd:.4f}"
        print(f"{r.point:<24}{mean:>12}{sd:>12}{len(r.values):>4}  {r.status}")
    return 0 if all(r.status == "ok" for r in rows) else 2


def cmd_tune(args) -> int:
    from . import experiments as ex

    cfg = _config(args)
    if cfg.attack != "dpia":
        raise ConfigError("attack", "V_MW tuning runs against the DPIA attack")
    cfg = cfg.override(dpia_candidates=args.candidates or cfg.dpia_candidates).validate()
    run = ex.dpia_simulate(cfg)
    policy, cands, aucs = ex.tuned_policy(cfg, run, args.size, cfg.family())
    for i, (c, a) in enumerate(zip(cands, aucs)):
        mark = "  <- selected" if tuple(c) == policy.vmw and a == min(aucs) else ""
        print(f"{i:>3}  V_MW={list(c)}  val AUC={a:.4f}{mark}")
    print(json.dumps({"size": args.size, "vmw": list(policy.vmw), "policy": policy.describe()}))
    return 0


def cmd_footprint(args) -> int:
    specs, shape = architecture(args.model, classes=args.classes)
    model = build_model(specs, shape, 0)
    policy = parse_policy(args.policy)
    try:
        validate_policy(policy, model.n)
    except PolicyError as exc:
        raise ConfigError("V_MW" if isinstance(policy, DynamicPolicy) else "policy", str(exc)) from None
    print(f"model {args.model}, batch {args.batch}, {model.n} layers")
    if isinstance(policy, DynamicPolicy):
        fp = dynamic_footprints(model, policy, args.batch)
        for loc, b in fp["per_location"].items():
            layers = list(range(loc, loc + policy.size))
            print(f"  location {loc} layers {layers}: {b} bytes ({b / 1e6:.3f} MB)")
        print(f"  max:  {fp['max']} bytes ({fp['max'] / 1e6:.3f} MB)")
        print(f"  mean: {fp['mean']:.0f} bytes ({fp['mean'] / 1e6:.3f} MB, V_MW-weighted)")
        return 0
    layers = [] if isinstance(policy, NoPolicy) else sorted(policy.protected)
    fp = memory_footprint(model, layers, args.batch)
    for (kind, layer), b in sorted(fp.buffers.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        print(f"  {kind:<6} layer {layer}: {b} bytes")
    print(f"  total: {fp.bytes_total} bytes ({fp.megabytes:.3f} MB)")
    return 0


def cmd_inspect(args) -> int:
    header, records, mask = read_trace(args.path)
    print(f"cycle {header['cycle']}  client {header['client']}  layers {header['n_layers']}")
    steps = sorted({k[0] for k in records} | {k[0] for k in mask})
    print(f"steps: {len(steps)}  records: {len(records)}  masked: {len(mask)}")
    order = {f: i for i, f in enumerate(FIELDS)}
    for key in sorted(records, key=lambda k: (k[0], k[1], order[k[2]])):
        arr = records[key]
        if args.all or key[0] == steps[0]:
            print(f"  step {key[0]} layer {key[1]} {key[2]:<6} shape {tuple(arr.shape)} "
                  f"|x|={float(np.linalg.norm(arr)):.4g}")
    if mask:
        hidden = sorted(mask, key=lambda k: (k[0], k[1], order[k[2]]))
        shown = hidden if args.all else [k for k in hidden if k[0] == steps[0]]
        print("masked:", ", ".join(f"s{s}/L{l}/{f}" for s, l, f in shown))
    return 0


def cmd_presets(args) -> int:
    for name, cfg in PRESETS.items():
        print(f"{name:<22} {cfg['attack']:<5} {cfg['model']:<7} policy={cfg['policy']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradsec-sim", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("-c", "--config", help="flat JSON config file")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="built-in configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field (repeatable)")

    sp = sub.add_parser("run", help="run one experiment")
    config_args(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="sweep protected layers over several seeds")
    config_args(sp)
    sp.add_argument("--axis", required=True,
                    choices=["static_single", "static_prefix", "static_suffix", "dynamic_size"])
    sp.add_argument("--seeds", type=int, default=5)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("tune-vmw", help="pick a moving-window distribution against DPIA")
    config_args(sp)
    sp.add_argument("--size", type=int, default=2, help="window size")
    sp.add_argument("--candidates", type=int, help="number of candidate distributions")
    sp.set_defaults(func=cmd_tune)

    sp = sub.add_parser("footprint", help="enclave memory for a model and policy")
    sp.add_argument("-m", "--model", default="lenet5")
    sp.add_argument("--classes", type=int)
    sp.add_argument("--policy", default="none")
    sp.add_argument("--batch", type=int, default=32)
    sp.set_defaults(func=cmd_footprint)

    sp = sub.add_parser("inspect-trace", help="summarise a trace file")
    sp.add_argument("path")
    sp.add_argument("--all", action="store_true", help="list every step, not just the first")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("presets", help="list built-in configurations")
    sp.set_defaults(func=cmd_presets)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, PolicyError, TraceFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
