"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    n_skipped: int  # coordinates whose perturbation crossed a relu kink


def _evaluate(lossfn):
    out = lossfn()
    if isinstance(out, tuple):
        return float(out[0]), out[1]
    return float(out), None


def finite_diff_check(
    lossfn: Callable,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    h: float = 1e-4,
    tol: float = 1e-4,
    n_coords: int = 100,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic ``grads`` against central differences of ``lossfn``.

    ``lossfn`` takes no arguments and reads ``params`` (which are perturbed in
    place and restored). It may return ``(loss, pattern)``; a coordinate whose
    ``+h`` or ``-h`` evaluation changes the pattern sits on a non-differentiable
    kink and is skipped. The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    coords = [(name, i) for name, p in params.items() for i in range(p.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[j] for j in sorted(pick)]
    _, base_pattern = _evaluate(lossfn)

    worst = 0.0
    checked = skipped = 0
    for name, i in coords:
        flat = params[name].reshape(-1)
        old = flat[i]
        flat[i] = old + h
        up, pat_up = _evaluate(lossfn)
        flat[i] = old - h
        down, pat_down = _evaluate(lossfn)
        flat[i] = old
        if base_pattern is not None and (
            not np.array_equal(pat_up, base_pattern) or not np.array_equal(pat_down, base_pattern)
        ):
            skipped += 1
            continue
        numeric = (up - down) / (2.0 * h)
        analytic = float(grads[name].reshape(-1)[i])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
        checked += 1
    return GradCheckReport(worst, bool(worst < tol), checked, skipped)
