"""First-order minimisers over flat float64 vectors.

Both take ``fun(x) -> (loss, grad)`` and return ``(x_best, curve)`` where
``curve[i]`` is the loss after ``i`` iterations (``curve[0]`` is the start).
"""
from __future__ import annotations

from collections import deque

import numpy as np


def adam(fun, x0, iterations: int, lr: float = 0.05, beta1: float = 0.9,
         beta2: float = 0.999, eps: float = 1e-8):
    x = np.array(x0, dtype=np.float64)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    loss, g = fun(x)
    curve = [loss]
    best_x, best = x.copy(), loss
    for t in range(1, iterations + 1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        x = x - lr * m_hat / (np.sqrt(v_hat) + eps)
        loss, g = fun(x)
        curve.append(loss)
        if loss < best:
            best, best_x = loss, x.copy()
    return best_x, curve


def lbfgs_lite(fun, x0, iterations: int, history: int = 10, c1: float = 1e-4,
               shrink: float = 0.5, max_backtracks: int = 30):
    """Limited-memory BFGS: two-loop recursion plus a backtracking Armijo search.

    Every accepted step satisfies the sufficient-decrease condition, so the
    loss curve is non-increasing. When no decrease is found along the
    quasi-Newton direction the memory is dropped and steepest descent is
    tried; if that fails too the iterate stays put.
    """
    x = np.array(x0, dtype=np.float64)
    loss, g = fun(x)
    curve = [loss]
    mem: deque = deque(maxlen=history)
    for _ in range(iterations):
        d = -_two_loop(g, mem)
        if g @ d >= 0:  # not a descent direction
            mem.clear()
            d = -g
        step = 1.0 if mem else min(1.0, 1.0 / max(np.linalg.norm(g), 1e-12))
        accepted = False
        for attempt in range(2):
            slope = g @ d
            a = step
            for _ in range(max_backtracks):
                x_new = x + a * d
                new_loss, g_new = fun(x_new)
                if np.isfinite(new_loss) and new_loss <= loss + c1 * a * slope:
                    accepted = True
                    break
                a *= shrink
            if accepted or attempt == 1:
                break
            mem.clear()
            d = -g
            step = min(1.0, 1.0 / max(np.linalg.norm(g), 1e-12))
        if not accepted:
            curve.append(loss)
            continue
        s, y = x_new - x, g_new - g
        if s @ y > 1e-12:
            mem.append((s, y, 1.0 / (s @ y)))
        x, loss, g = x_new, new_loss, g_new
        curve.append(loss)
    return x, curve


def _two_loop(g, mem):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(mem):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if mem:
        s, y, _ = mem[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(mem, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q
