from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError
from .params import Parameter
from .tensor import Tensor, backward, exact_gradients


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    samples: int = 20,
    h: float = 1e-5,
    seed: int = 0,
    return_details: bool = False,
):
    """Compare tape gradients of ``f`` with central differences.

    ``samples`` coordinates are drawn uniformly (fixed ``seed``) from the
    concatenation of all ``params``. The relative error at a coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``; the worst one is returned. Gradient
    cuts made by ``detach`` are lifted for the duration of the check.
    """
    params = list(params)
    with exact_gradients():
        first = np.array(f().data, copy=True)
        second = np.array(f().data, copy=True)
        if first.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got shape {first.shape}")
        if not np.array_equal(first, second):
            raise ContractError("grad_check: f is not deterministic (two evaluations differ)")

        saved = [p.grad for p in params]
        for p in params:
            p.zero_grad()
        backward(f())
        analytic = [p.grad.copy() for p in params]
        for p, g in zip(params, saved):
            p.grad = g

        sizes = np.array([p.size for p in params])
        total = int(sizes.sum())
        rng = np.random.default_rng(seed)
        picks = rng.choice(total, size=min(samples, total), replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        details = []
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            i = int(flat - offsets[k])
            p = params[k]
            orig = p.data.flat[i]
            p.data.flat[i] = orig + h
            fp = float(f().data)
            p.data.flat[i] = orig - h
            fm = float(f().data)
            p.data.flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[k].flat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            details.append((p.name, i, a, numeric, rel))
    worst = max((d[-1] for d in details), default=0.0)
    if return_details:
        return worst, details
    return worst
