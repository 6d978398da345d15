"""
Finite-difference gradient checker

Compares tape gradients with central differences, one parameter entry at a
time. Entries sitting on a kink (one-sided slopes disagree) are flagged and
left out of the maximum error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from app.relocalization.diffcore.tensor import Tape, Tensor
from app.relocalization.exceptions import GradCheckError


@dataclass
class GradCheckReport:
    """Outcome of one gradient check"""

    max_rel_error: float
    checked: int
    flagged: int
    worst: Optional[Tuple[int, int]] = None  # (param index, flat entry index)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def _evaluate(f: Callable[[], Tensor]) -> float:
    value = float(np.asarray(f().data).sum())
    if not np.isfinite(value):
        raise GradCheckError(f"objective is not finite: {value}")
    return value


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    kink_tol: float = 1e-3,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Check d f / d params against (f(p+h) - f(p-h)) / 2h.

    ``f`` reads the current values of ``params`` each time it is called;
    entries are perturbed in place and restored. Relative error per entry is
    |a - n| / max(|a|, |n|, 1). With ``max_entries`` only a seeded random
    subset of each parameter's entries is perturbed.
    """
    for p in params:
        p.requires_grad = True
    with Tape() as tape:
        out = f()
    base = float(np.asarray(out.data).sum())
    if not np.isfinite(base):
        raise GradCheckError(f"objective is not finite: {base}")
    analytic = tape.gradient(out, list(params))

    rng = np.random.default_rng(seed)
    max_err, checked, flagged, worst = 0.0, 0, 0, None
    for pi, (param, grad) in enumerate(zip(params, analytic)):
        flat = param.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for k in entries:
            original = flat[k]
            flat[k] = original + h
            plus = _evaluate(f)
            flat[k] = original - h
            minus = _evaluate(f)
            flat[k] = original

            numeric = (plus - minus) / (2.0 * h)
            a = float(grad.reshape(-1)[k])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)

            forward, backward = (plus - base) / h, (base - minus) / h
            kink = abs(forward - backward) > kink_tol * max(abs(forward), abs(backward), 1.0)
            if kink and err > kink_tol:
                flagged += 1
                continue
            checked += 1
            if err > max_err:
                max_err, worst = err, (pi, int(k))

    return GradCheckReport(max_rel_error=max_err, checked=checked, flagged=flagged, worst=worst)
