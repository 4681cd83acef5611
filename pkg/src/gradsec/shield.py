"""Which layers sit in the enclave each cycle, and what that hides from the normal world.

Layer indices are 1-based block numbers (see :class:`gradsec.nn.Model`).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .nn import Model
from .trace import AttackerView, RawTrace

VMW_TOL = 1e-9


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class NoPolicy:
    def describe(self) -> str:
        return "none"


@dataclass(frozen=True)
class StaticPolicy:
    protected: frozenset

    def __init__(self, protected: Iterable[int]):
        object.__setattr__(self, "protected", frozenset(int(l) for l in protected))

    def describe(self) -> str:
        return "static:" + ",".join(str(l) for l in sorted(self.protected))


@dataclass(frozen=True)
class DynamicPolicy:
    size: int
    vmw: tuple

    def __init__(self, size: int, vmw: Sequence[float]):
        object.__setattr__(self, "size", int(size))
        object.__setattr__(self, "vmw", tuple(float(v) for v in vmw))

    def describe(self) -> str:
        return f"dynamic:{self.size}:" + ",".join(repr(v) for v in self.vmw)


ShieldPolicy = NoPolicy | StaticPolicy | DynamicPolicy


@dataclass(frozen=True)
class ProtectedSet:
    cycle: int
    protected: frozenset = frozenset()
    location: int | None = None  # 1-based window start, dynamic policies only

    def __contains__(self, layer) -> bool:
        return layer in self.protected

    def sorted(self) -> list[int]:
        return sorted(self.protected)


def window_locations(n: int, size: int) -> int:
    """Number of places a window of ``size`` successive layers fits in ``n`` layers."""
    if not 1 <= size <= n:
        raise PolicyError(f"window size {size} must lie in 1..{n}")
    return n - size + 1


def window_layers(location: int, size: int) -> frozenset:
    return frozenset(range(location, location + size))


def validate_policy(policy: ShieldPolicy, n: int) -> None:
    if isinstance(policy, NoPolicy):
        return
    if isinstance(policy, StaticPolicy):
        if not policy.protected:
            raise PolicyError("static policy needs at least one protected layer")
        bad = [l for l in policy.protected if not 1 <= l <= n]
        if bad:
            raise PolicyError(f"static policy layers {sorted(bad)} outside 1..{n}")
        return
    if isinstance(policy, DynamicPolicy):
        locs = window_locations(n, policy.size)
        validate_vmw(policy.vmw, locs)
        return
    raise PolicyError(f"unknown policy {policy!r}")


def validate_vmw(vmw: Sequence[float], locations: int) -> None:
    v = np.asarray(vmw, dtype=np.float64)
    if v.ndim != 1 or len(v) != locations:
        raise PolicyError(f"V_MW must have {locations} entries, got {len(v)}")
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise PolicyError("V_MW entries must be non-negative")
    if abs(v.sum() - 1.0) > VMW_TOL:
        raise PolicyError(f"V_MW must sum to 1, sums to {v.sum():.6g}")


def parse_policy(text: str) -> ShieldPolicy:
    """``none`` | ``static:2,5`` | ``dynamic:2:0.2,0.1,0.6,0.1``."""
    text = text.strip()
    kind, _, rest = text.partition(":")
    kind = kind.lower()
    try:
        if kind == "none":
            return NoPolicy()
        if kind == "static":
            return StaticPolicy(int(x) for x in rest.split(",") if x.strip())
        if kind == "dynamic":
            size, _, vec = rest.partition(":")
            vmw = [float(x) for x in vec.replace(" ", ",").split(",") if x.strip()]
            return DynamicPolicy(int(size), vmw)
    except ValueError as exc:
        raise PolicyError(f"cannot parse policy {text!r}: {exc}") from None
    raise PolicyError(f"cannot parse policy {text!r}")


def resolve_policy(policy: ShieldPolicy, cycle: int, rng: np.random.Generator) -> ProtectedSet:
    """Protected layers for one cycle; dynamic windows are drawn i.i.d. from V_MW."""
    if isinstance(policy, NoPolicy):
        return ProtectedSet(cycle)
    if isinstance(policy, StaticPolicy):
        return ProtectedSet(cycle, policy.protected)
    v = np.asarray(policy.vmw, dtype=np.float64)
    if np.any(v < 0) or abs(v.sum() - 1.0) > VMW_TOL:
        raise PolicyError("malformed V_MW")
    loc = int(rng.choice(len(v), p=v / v.sum())) + 1
    return ProtectedSet(cycle, window_layers(loc, policy.size), loc)


def policy_rng(seed: int, cycle: int) -> np.random.Generator:
    """The policy's own stream for ``cycle``, independent of training randomness."""
    return np.random.default_rng([int(seed), 0x5E1D, int(cycle)])


def schedule(policy: ShieldPolicy, cycles: int, seed: int) -> list[ProtectedSet]:
    return [resolve_policy(policy, t, policy_rng(seed, t)) for t in range(cycles)]


# ---------------------------------------------------------------------------
# redaction

def removed_keys(n: int, protected: Iterable[int], steps: Iterable[int]) -> set:
    """Trace keys the enclave keeps to itself.

    For a protected layer l: W, DW, Z, DELTA, and its input A_{l-1} unless
    layer l-1 runs in the normal world (then A_{l-1} = f(Z_{l-1}) is known
    there anyway). X counts as protected input of layer 1. The softmax output
    stays inside when the last layer is protected. The error dLoss/dA_k is
    hidden only when both k and k+1 are protected; at a slice boundary it
    must be handed to the normal world.
    """
    p = set(protected)
    out = set()
    for s in steps:
        for l in p:
            out.update({(s, l, "W"), (s, l, "DW"), (s, l, "Z"), (s, l, "DELTA")})
            if l - 1 == 0 or (l - 1) in p:
                out.add((s, l - 1, "A"))
            if l < n and (l + 1) in p:
                out.add((s, l, "BDELTA"))
        if n in p:
            out.add((s, n, "A"))
    return out


def redact(trace: RawTrace, pset: ProtectedSet | Iterable[int]) -> AttackerView:
    protected = frozenset(pset.protected if isinstance(pset, ProtectedSet) else pset)
    bad = [l for l in protected if not 1 <= l <= trace.n_layers]
    if bad:
        raise PolicyError(f"protected layers {sorted(bad)} outside 1..{trace.n_layers}")
    gone = removed_keys(trace.n_layers, protected, trace.steps) & trace.keys()
    records = {k: np.array(v, copy=True) for k, v in trace.records.items() if k not in gone}
    return AttackerView(trace.n_layers, trace.cycle, trace.client, records,
                        frozenset(gone), protected)


# ---------------------------------------------------------------------------
# enclave memory

@dataclass(frozen=True)
class MemoryFootprint:
    bytes_total: int
    buffers: dict = field(default_factory=dict)  # (kind, layer) -> bytes

    @property
    def megabytes(self) -> float:
        return self.bytes_total / 1e6


def memory_footprint(model: Model, pset: ProtectedSet | Iterable[int], m: int) -> MemoryFootprint:
    """4 bytes per element over W, dW, Z, delta and the input A of each protected layer.

    Activation buffers scale with the batch size ``m``; an input buffer
    shared by two protected layers is counted once.
    """
    protected = pset.protected if isinstance(pset, ProtectedSet) else frozenset(pset)
    buffers: dict = {}
    blocks = model.blocks
    for l in sorted(protected):
        if not 1 <= l <= model.n:
            raise PolicyError(f"layer {l} outside 1..{model.n}")
        i = blocks[l - 1][0]
        w = int(model.weights[i].size)
        z = m * int(np.prod(model.shapes[i + 1]))
        a_in = m * int(np.prod(model.shapes[i]))
        buffers[("W", l)] = 4 * w
        buffers[("dW", l)] = 4 * w
        buffers[("Z", l)] = 4 * z
        buffers[("delta", l)] = 4 * z
        buffers[("A", l - 1)] = 4 * a_in
    return MemoryFootprint(sum(buffers.values()), buffers)


def dynamic_footprints(model: Model, policy: DynamicPolicy, m: int) -> dict:
    """Per-location footprints plus the worst case and the V_MW-weighted mean."""
    locs = window_locations(model.n, policy.size)
    per = {loc: memory_footprint(model, window_layers(loc, policy.size), m).bytes_total
           for loc in range(1, locs + 1)}
    mean = float(sum(policy.vmw[loc - 1] * b for loc, b in per.items()))
    return {"per_location": per, "max": max(per.values()), "mean": mean}


# ---------------------------------------------------------------------------
# V_MW tuning

def simplex_grid(locations: int, count: int, seed: int) -> list[tuple]:
    """``count`` V_MW candidates drawn uniformly from the probability simplex."""
    rng = np.random.default_rng(seed)
    out = []
    for v in rng.dirichlet(np.ones(locations), size=count):
        v = np.round(v, 6)
        v[-1] = round(1.0 - float(v[:-1].sum()), 6)
        if v[-1] < 0:
            v[np.argmax(v)] += v[-1]
            v[-1] = 0.0
        out.append(tuple(float(x) for x in v))
    return out


def evaluate_vmw(vmw, size: int, grad_train, grad_val, attack_trainer: Callable,
                 seed: int = 0) -> float:
    """Validation AUC of an attack model trained under ``vmw``'s missingness."""
    from .attacks.gradset import impute_mean, simulate_window_missingness
    from .attacks.metrics import auc

    rng_train = np.random.default_rng([seed, 1])
    rng_val = np.random.default_rng([seed, 2])
    train = simulate_window_missingness(grad_train, vmw, size, rng_train)
    val = simulate_window_missingness(grad_val, vmw, size, rng_val)
    train_filled = impute_mean(train)
    model = attack_trainer(train_filled)
    val_filled = impute_mean(val, means=train_filled.column_means())
    return auc(model.score(val_filled.features), val_filled.labels)


def tune_vmw(candidates: Sequence[Sequence[float]], grad_train, grad_val,
             attack_trainer: Callable, size: int, seed: int = 0):
    """Pick the V_MW whose attack instance does worst on validation data.

    Returns ``(vmw, aucs)``; ties go to the earliest candidate.
    """
    if not candidates:
        raise PolicyError("no V_MW candidates to choose from")
    n = len(grad_train.groups)
    for v in candidates:
        validate_vmw(v, window_locations(n, size))
    aucs = [evaluate_vmw(v, size, grad_train, grad_val, attack_trainer, seed) for v in candidates]
    best = int(np.argmin(aucs))  # first minimum
    return tuple(candidates[best]), aucs
