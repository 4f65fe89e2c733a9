"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. ``param.data``.

    ``indices`` restricts the probe to a subset of flat positions; the
    remaining entries of the returned array are NaN.
    """
    flat = param.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    probe = range(flat.size) if indices is None else indices
    with no_grad():
        for i in probe:
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn().data)
            flat[i] = orig - step
            down = float(fn().data)
            flat[i] = orig
            out[i] = (up - down) / (2 * step)
    return out.reshape(param.shape)


def gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_probes: int | None = None,
    rng: np.random.Generator | None = None,
    per_param: bool = True,
) -> float:
    """Relative error between analytic and numerical gradients.

    The error of a gradient vector is ``|g_a - g_n| / max(|g_a|, |g_n|, tiny)``
    over the probed entries, which stays meaningful when individual entries
    are near zero. With ``per_param`` the worst parameter is reported;
    otherwise all probes form one vector, so parameters whose gradient sits
    at round-off level (dead ReLU paths) do not dominate.
    """
    for p in params:
        p.grad = None
    backward(fn(), params=params)
    worst = 0.0
    all_ana, all_num = [], []
    for p in params:
        idx = None
        if max_probes is not None and p.size > max_probes:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(p.size, size=max_probes, replace=False)
        num = numerical_grad(fn, p, step, idx)
        ana = p.grad.reshape(-1)
        numf = num.reshape(-1)
        sel = np.arange(p.size) if idx is None else idx
        all_ana.append(ana[sel])
        all_num.append(numf[sel])
        worst = max(worst, _rel(ana[sel], numf[sel]))
    if per_param:
        return worst
    return _rel(np.concatenate(all_ana), np.concatenate(all_num))


def _rel(ana: np.ndarray, num: np.ndarray) -> float:
    diff = np.linalg.norm(ana - num)
    return diff / max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
