"""Sampled comparison of tape gradients against central differences."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tape import GradTape, Tensor, backward


@dataclass
class GradCheckResult:
    checked: int = 0
    skipped_kinks: int = 0
    max_rel_error: float = 0.0
    failures: list[tuple[str, int, float, float]] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)

    def checked_with_prefix(self, prefix: str) -> int:
        return sum(n for name, n in self.counts.items() if name.startswith(prefix))

    @property
    def ok(self) -> bool:
        return not self.failures


def relative_error(a: float, b: float, floor: float = 1e-10) -> float:
    return abs(a - b) / max(floor, abs(a) + abs(b))


def sampled_gradient_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                           rng: np.random.Generator, per_tensor: int = 5, h: float = 1e-4,
                           tol: float = 1e-3, max_draws: int = 50) -> GradCheckResult:
    """Check ``per_tensor`` random coordinates of every parameter.

    A coordinate whose central difference at ``h`` disagrees with those at
    ``h / 10``, ``h / 100`` or ``h / 1000`` by more than ``tol`` (relative) has a ReLU/max
    kink inside the step and is redrawn; the finite difference is not a valid
    oracle there.
    """
    params = list(params)
    with GradTape(params) as tape:
        loss = loss_fn()
    grads = backward(tape, loss)
    result = GradCheckResult()
    for t, g in zip(params, grads):
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        want = min(per_tensor, flat.size)
        done = 0
        order = rng.permutation(flat.size)[:max_draws]
        for idx in order:
            if done == want:
                break
            fd = _central(loss_fn, flat, idx, h)
            finer = [_central(loss_fn, flat, idx, h / 10 ** j) for j in (1, 2, 3)]
            if any(relative_error(fd, f) > tol and abs(fd - f) > 1e-10 for f in finer):
                result.skipped_kinks += 1
                continue
            err = relative_error(float(gflat[idx]), fd)
            # both sides vanishing below round-off is agreement
            if abs(gflat[idx] - fd) < 1e-10:
                err = 0.0
            result.max_rel_error = max(result.max_rel_error, err)
            if err > tol:
                result.failures.append((t.name or "?", int(idx), float(gflat[idx]), fd))
            result.checked += 1
            done += 1
        result.counts[t.name or f"param{len(result.counts)}"] = done
    return result


def _central(loss_fn, flat: np.ndarray, idx: int, h: float) -> float:
    orig = flat[idx]
    flat[idx] = orig + h
    fp = loss_fn().item()
    flat[idx] = orig - h
    fm = loss_fn().item()
    flat[idx] = orig
    return (fp - fm) / (2 * h)
