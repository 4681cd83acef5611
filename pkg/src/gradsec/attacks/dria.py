"""Data reconstruction by gradient matching.

The attacker replays the victim's training step on a dummy input and a
soft dummy label, and moves both until the dummy weight gradients match the
leaked ones on every observable layer. The forward/backward replica is
written with torch so the second-order term (gradient of a gradient) comes
from autograd; ``replica_gradients`` is checked against :mod:`gradsec.nn`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .. import nn
from ..nn import CONV2D, DENSE, Model
from .metrics import image_loss
from .optim import adam, lbfgs_lite
from .outcome import AttackOutcome

OPTIMIZERS = ("adam", "lbfgs-lite")


class NoSignalError(ValueError):
    pass


@dataclass(frozen=True)
class DriaConfig:
    optimizer: str = "adam"
    iterations: int = 300
    step_size: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")


def _act(name, z):
    if name == "sigmoid":
        return torch.sigmoid(z)
    if name == "relu":
        return torch.relu(z)
    if name == "tanh":
        return torch.tanh(z)
    return z


def replica_loss(model: Model, weights: list, x: torch.Tensor, y_soft: torch.Tensor):
    """Cross-entropy of ``model`` with torch ``weights`` (one per spec, None for pools).

    ``x`` is channels-last ``(m, h, w, c)``; dense layers flatten in that order.
    """
    a = x.permute(0, 3, 1, 2)  # NCHW for torch kernels
    spatial = True
    for spec, w in zip(model.specs, weights):
        if spec.kind == CONV2D:
            z = F.conv2d(a, w.permute(0, 3, 1, 2), stride=spec.stride, padding=spec.pad)
            a = _act(spec.activation, z)
        elif spec.kind == DENSE:
            if spatial:
                a = a.permute(0, 2, 3, 1).reshape(a.shape[0], -1)
                spatial = False
            a = _act(spec.activation, a @ w.T)
        else:
            a = F.max_pool2d(a, 2)
    logp = torch.log_softmax(a, dim=1)
    return -(y_soft * logp).sum() / x.shape[0]


def _torch_weights(model: Model, requires_grad: bool):
    return [None if w is None else torch.tensor(w, dtype=torch.float64, requires_grad=requires_grad)
            for w in model.weights]


def replica_gradients(model: Model, X, Y) -> list:
    """Per-spec dW from the torch replica (for cross-checking the numpy engine)."""
    ws = _torch_weights(model, True)
    x = torch.tensor(np.asarray(X), dtype=torch.float64)
    y = torch.tensor(np.asarray(Y), dtype=torch.float64)
    live = [w for w in ws if w is not None]
    grads = iter(torch.autograd.grad(replica_loss(model, ws, x, y), live))
    return [None if w is None else next(grads).numpy() for w in ws]


def attacker_model(global_model: Model, protected, seed: int) -> Model:
    """The victim's architecture with enclave-hidden layers re-initialised from ``seed``."""
    guess = nn.build_model(global_model.specs, global_model.input_shape, seed)
    ws = [guess_w if l in protected else w
          for l, (w, guess_w) in enumerate(zip(global_model.block_weights(),
                                               guess.block_weights()), start=1)]
    return global_model.with_block_weights(ws)


def dria(view, arch: Model, target_grads: dict, cfg: DriaConfig, x_true=None,
         init=None, policy: str = "none") -> AttackOutcome:
    """Reconstruct a single training example from observable weight gradients.

    ``target_grads`` maps 1-based layer numbers to leaked dW; ``view`` (an
    AttackerView or None) only contributes its protected set for bookkeeping.
    ``init`` optionally fixes the starting ``(x, label_logits)``.
    """
    layers = sorted(target_grads)
    if not layers:
        raise NoSignalError("attack has no signal: no observable gradients")
    spec_of = {l: i for l, i in enumerate(arch.weighted_index, start=1)}
    ws = _torch_weights(arch, False)
    targets = {l: torch.tensor(np.asarray(target_grads[l]), dtype=torch.float64) for l in layers}
    shape = (1,) + tuple(arch.input_shape)
    size_x = int(np.prod(shape))
    classes = arch.classes

    def split(flat):
        return flat[:size_x].reshape(shape), flat[size_x:].reshape(1, classes)

    def fun(v):
        flat = torch.tensor(v, dtype=torch.float64, requires_grad=True)
        x, logits = split(flat)
        wl = [w if w is None else w.clone().requires_grad_(True) for w in ws]
        loss = replica_loss(arch, wl, x, torch.softmax(logits, dim=1))
        needed = [wl[spec_of[l]] for l in layers]
        grads = torch.autograd.grad(loss, needed, create_graph=True)
        match = sum(((g - targets[l]) ** 2).sum() for g, l in zip(grads, layers))
        (g_flat,) = torch.autograd.grad(match, flat)
        return float(match.detach()), g_flat.detach().numpy().copy()

    if init is None:
        rng = np.random.default_rng([cfg.seed, 0xD1A])
        x0 = rng.uniform(0.0, 1.0, size=size_x)
        y0 = rng.normal(0.0, 1.0, size=classes)
    else:
        x0 = np.asarray(init[0], dtype=np.float64).ravel()
        y0 = np.asarray(init[1], dtype=np.float64).ravel()
    v0 = np.concatenate([x0, y0])
    if cfg.optimizer == "adam":
        v, curve = adam(fun, v0, cfg.iterations, lr=cfg.step_size)
    else:
        v, curve = lbfgs_lite(fun, v0, cfg.iterations)
    x_rec = v[:size_x].reshape(arch.input_shape)
    y_rec = torch.softmax(torch.tensor(v[size_x:]), dim=0).numpy()
    match = float(min(curve))
    if x_true is not None:
        metric, value = "ImageLoss", image_loss(x_rec, np.asarray(x_true).reshape(arch.input_shape))
    else:
        metric, value = "MatchLoss", match
    protected = sorted(view.protected) if view is not None else []
    out = AttackOutcome("DRIA", metric, value, cfg.seed, policy, [float(c) for c in curve])
    out.extra.update({"match_loss": match, "observable_layers": layers,
                      "protected": protected, "label_estimate": y_rec.tolist()})
    out.tensor = x_rec.astype(np.float32)
    return out
