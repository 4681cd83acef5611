"""Canonical attack/model/policy pairings, each a ready-to-run configuration."""
from __future__ import annotations

from .config import ExperimentConfig

_DRIA = dict(model="tiny", classes=4, activation="sigmoid", clients=1, examples_per_client=1,
             cycles=1, lr=0.1, attack="dria", dria_optimizer="lbfgs-lite", dria_iterations=300,
             trace_mode="first", save_traces=True)

# Many local epochs on a small, nearly label-random set: the model memorises its members.
_MIA = dict(model="lenet5", classes=100, activation="tanh", synth_sigma=4.0, clients=1,
            mia_members=256, cycles=1, epochs_per_cycle=120, batch_size=32, lr=0.05,
            attack="mia", attack_family="logistic", trace_mode="first", save_traces=False)

_DPIA = dict(model="lenet5", classes=2, activation="tanh", synth_sigma=0.3,
             property_alpha=0.4, clients=2, cycles=60, lr=0.1, attack="dpia",
             attack_family="forest", dpia_batch=8, dpia_aux=4, dpia_candidates=20,
             trace_mode="none", save_traces=False)

PRESETS = {
    "dria-tiny-none": {**_DRIA, "name": "dria-tiny-none", "policy": "none"},
    "dria-tiny-L12": {**_DRIA, "name": "dria-tiny-L12", "policy": "static:1,2"},
    "mia-lenet5-none": {**_MIA, "name": "mia-lenet5-none", "policy": "none"},
    "mia-lenet5-L5": {**_MIA, "name": "mia-lenet5-L5", "policy": "static:5"},
    "dpia-lenet5-dynamic": {**_DPIA, "name": "dpia-lenet5-dynamic", "policy": "dynamic:2:auto"},
}


def preset(name: str, **overrides) -> ExperimentConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ExperimentConfig.from_dict({**base, **overrides})
