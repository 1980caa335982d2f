"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .layers import ModelParams
from .tensor import Tensor


class GradCheckReport(NamedTuple):
    max_rel_err: float
    checked: int
    failures: list  # (param name, flat index, analytic, numeric, rel err)

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(loss_fn: Callable[[], Tensor], params: ModelParams,
               h: float = 1e-5, rel_tol: float = 1e-3,
               sample_frac: float = 0.05,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare backward() grads against central differences.

    loss_fn must rebuild the forward graph from the current parameter
    values on every call and be deterministic. A random sample_frac of
    each parameter's entries is probed (at least one per parameter).
    Relative error is |a-n| / max(|a|, |n|, 1e-4); the floor keeps
    finite-difference noise on near-zero gradients from registering.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    loss = loss_fn()
    params.zero_grad()
    loss.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }
    failures: list[tuple[str, int, float, float, float]] = []
    worst = 0.0
    checked = 0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        k = min(n, max(1, round(n * sample_frac)))
        for i in rng.choice(n, size=k, replace=False):
            x0 = flat[i]
            flat[i] = x0 + h
            lp = float(loss_fn().data)
            flat[i] = x0 - h
            lm = float(loss_fn().data)
            flat[i] = x0
            num = (lp - lm) / (2.0 * h)
            an = float(analytic[name].reshape(-1)[i])
            rel = abs(an - num) / max(abs(an), abs(num), 1e-4)
            worst = max(worst, rel)
            checked += 1
            if rel > rel_tol:
                failures.append((name, int(i), an, num, rel))
    return GradCheckReport(worst, checked, failures)
