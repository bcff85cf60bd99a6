from __future__ import annotations

from typing import Callable, Mapping

import numpy as np


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(
    f: Callable[[Mapping[str, np.ndarray]], float],
    point: Mapping[str, np.ndarray],
    step: float = 1e-3,
    relative_step: bool = True,
    scale_floor: float = 1.0,
    order: int = 2,
) -> dict[str, np.ndarray]:
    """Central differences of scalar ``f`` for every coordinate of every array.

    With ``relative_step`` the perturbation is step * max(|x|, scale_floor);
    otherwise it is ``step``. ``order=4`` uses the five-point stencil
    (one Richardson step on the h and h/2 central differences).
    """
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in point.items()}
    out: dict[str, np.ndarray] = {}
    for name, arr in work.items():
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            x0 = flat[i]
            h = step * max(abs(x0), scale_floor) if relative_step else step
            gflat[i] = _central(f, work, flat, i, x0, h)
            if order == 4:
                half = _central(f, work, flat, i, x0, h / 2)
                gflat[i] = (4.0 * half - gflat[i]) / 3.0
        out[name] = grad
    return out


def _central(f, work, flat, i, x0, h) -> float:
    flat[i] = x0 + h
    up = f(work)
    flat[i] = x0 - h
    down = f(work)
    flat[i] = x0
    return (up - down) / (2.0 * h)


def gradcheck(
    f: Callable[[Mapping[str, np.ndarray]], float],
    grad_f: Callable[[Mapping[str, np.ndarray]], Mapping[str, np.ndarray]],
    point: Mapping[str, np.ndarray],
    step: float = 1e-3,
    relative_step: bool = True,
    scale_floor: float = 1.0,
    order: int = 2,
) -> float:
    """Max relative error between ``grad_f`` and central differences of ``f`` at ``point``.

    ``f`` must be deterministic (any noise fixed by the caller).
    """
    analytic = grad_f(point)
    numeric = numeric_gradient(f, point, step, relative_step, scale_floor, order)
    worst = 0.0
    for name, num in numeric.items():
        err = relative_error(analytic[name], num)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
