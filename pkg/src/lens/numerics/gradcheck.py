"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


class NonDeterministicForward(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    tol: float = 1e-3

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    def __str__(self) -> str:
        rows = [f"{k}: {v:.3e} ({self.checked[k]} entries)" for k, v in self.errors.items()]
        return "\n".join(rows)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps structurally-zero gradients
    (e.g. attention key biases) from turning difference noise into huge ratios."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    forward: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-3,
    tol: float = 1e-3,
    dtype=np.float64,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``forward()`` against central differences.

    Parameters are promoted to ``dtype`` for the duration of the check (float64
    by default so the difference quotient is not swamped by rounding) and
    restored afterwards. Inputs that are not parameters keep their dtype, so
    the default step stays coarse enough for float32 activations; pass a
    smaller ``h`` when the whole path runs in float64. With ``max_entries``
    set, that many entries per parameter are sampled instead of checking
    every one.
    """
    originals = {k: p.data for k, p in params.items()}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    try:
        for p in params.values():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        with no_grad():
            first = forward().data.copy()
            second = forward().data.copy()
        if not np.array_equal(first, second):
            raise NonDeterministicForward("forward produced different values on two runs")
        forward().backward()
        for name, p in params.items():
            analytic = p.grad.copy()
            flat = p.data.reshape(-1)
            n = flat.size
            idx = np.arange(n)
            if max_entries is not None and n > max_entries:
                idx = np.sort(rng.choice(n, size=max_entries, replace=False))
            numeric = np.empty(len(idx))
            with no_grad():
                for j, i in enumerate(idx):
                    old = flat[i]
                    flat[i] = old + h
                    fp = forward().item()
                    flat[i] = old - h
                    fm = forward().item()
                    flat[i] = old
                    numeric[j] = (fp - fm) / (2 * h)
            err = relative_error(analytic.reshape(-1)[idx], numeric)
            report.errors[name] = float(err.max()) if len(err) else 0.0
            report.checked[name] = len(idx)
    finally:
        for k, p in params.items():
            p.data = originals[k]
            p.zero_grad()
    return report
