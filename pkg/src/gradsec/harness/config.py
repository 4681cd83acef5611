"""Experiment configuration: a flat JSON object with typed, validated fields."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ..nn import ARCHITECTURES, build_model, architecture
from ..shield import DynamicPolicy, PolicyError, parse_policy, validate_policy

ATTACKS = ("none", "dria", "mia", "dpia")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "run"
    model: str = "tiny"
    classes: int = 0  # 0 keeps the architecture's default
    activation: str = "sigmoid"
    dataset: str = "synth"  # "synth" or "cifar10:<path>" / "cifar100:<path>"
    synth_sigma: float = 0.1
    synth_prototype_seed: int = 0
    property_alpha: float = 0.5
    property_cell: int = 2  # checkerboard square size of the planted property
    clients: int = 1
    examples_per_client: int = 1
    lr: float = 0.1
    epochs_per_cycle: int = 1
    batch_size: int = 0
    cycles: int = 1
    policy: str = "none"
    attack: str = "none"
    seed: int = 0
    out: str = "runs"
    trace_mode: str = "first"
    save_traces: bool = True
    # DRIA
    dria_optimizer: str = "lbfgs-lite"
    dria_iterations: int = 300
    dria_step: float = 0.1
    # MIA
    mia_members: int = 256
    attack_family: str = ""  # empty picks logistic for MIA and forest for DPIA
    # DPIA
    dpia_batch: int = 8
    dpia_aux: int = 4
    dpia_candidates: int = 20
    dpia_prevalence: float = 0.5

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(unknown[0], "unknown config field")
        kw = {}
        for key, value in data.items():
            kind = type(getattr(cls(), key))
            try:
                if kind is bool:
                    if isinstance(value, str):
                        value = value.lower() in ("1", "true", "yes")
                    kw[key] = bool(value)
                else:
                    kw[key] = kind(value)
            except (TypeError, ValueError):
                raise ConfigError(key, f"expected {kind.__name__}, got {value!r}") from None
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError("config", f"file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def override(self, **kw) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    # ------------------------------------------------------------------
    def arch(self):
        return architecture(self.model, classes=self.classes or None, activation=self.activation)

    def initial_model(self):
        specs, shape = self.arch()
        return build_model(specs, shape, self.seed)

    def shield_policy(self):
        return parse_policy(self.policy)

    def family(self) -> str:
        if self.attack_family:
            return self.attack_family
        return "forest" if self.attack == "dpia" else "logistic"

    def validate(self) -> "ExperimentConfig":
        if self.model not in ARCHITECTURES:
            raise ConfigError("model", f"must be one of {sorted(ARCHITECTURES)}")
        if self.attack not in ATTACKS:
            raise ConfigError("attack", f"must be one of {ATTACKS}")
        if self.cycles < 1:
            raise ConfigError("cycles", "must be >= 1")
        if self.clients < 1:
            raise ConfigError("clients", "must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr", "must be positive")
        if self.epochs_per_cycle < 1:
            raise ConfigError("epochs_per_cycle", "must be >= 1")
        if self.trace_mode not in ("all", "first", "none"):
            raise ConfigError("trace_mode", "must be all, first or none")
        if self.attack_family not in ("", "logistic", "forest"):
            raise ConfigError("attack_family", "must be logistic or forest")
        if self.dria_optimizer not in ("adam", "lbfgs-lite"):
            raise ConfigError("dria_optimizer", "must be adam or lbfgs-lite")
        if self.dria_iterations < 1:
            raise ConfigError("dria_iterations", "must be >= 1")
        if not 0 <= self.property_alpha <= 1:
            raise ConfigError("property_alpha", "must lie in [0, 1]")
        if self.property_cell < 1:
            raise ConfigError("property_cell", "must be >= 1")
        if self.dataset != "synth":
            variant, _, path = self.dataset.partition(":")
            if variant not in ("cifar10", "cifar100") or not path:
                raise ConfigError("dataset", "must be 'synth' or 'cifar10:<path>' / 'cifar100:<path>'")
            if not Path(path).is_file():
                raise ConfigError("dataset", f"file {path} does not exist")
        try:
            specs, shape = self.arch()
        except ValueError as exc:
            raise ConfigError("model", str(exc)) from None
        n = build_model(specs, shape, 0).n
        if self.policy.strip().lower().endswith(":auto"):
            size = self.policy.split(":")[1]
            if not self.policy.lower().startswith("dynamic:") or not size.isdigit():
                raise ConfigError("policy", "only 'dynamic:<size>:auto' may be tuned")
            if self.attack != "dpia":
                raise ConfigError("policy", "V_MW tuning needs a DPIA attack to tune against")
            if not 1 <= int(size) <= n:
                raise ConfigError("policy", f"window size must lie in 1..{n}")
            return self
        try:
            policy = self.shield_policy()
            validate_policy(policy, n)
        except PolicyError as exc:
            name = "V_MW" if isinstance(policy_or_none(self.policy), DynamicPolicy) else "policy"
            raise ConfigError(name, str(exc)) from None
        return self


def policy_or_none(text: str):
    try:
        return parse_policy(text)
    except PolicyError:
        return None
