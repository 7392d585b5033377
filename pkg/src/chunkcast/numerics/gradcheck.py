"""Central finite-difference gradients, used as an independent oracle for ``backward``."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from chunkcast.errors import OracleInvalidError
from chunkcast.numerics.tensor import Tensor, no_grad


def _scalar(value) -> float:
    return float(value.data if isinstance(value, Tensor) else value)


def finite_diff_gradient(
    f: Callable[[Mapping[str, Tensor]], object],
    params: Mapping[str, Tensor],
    eps: float = 1e-4,
    names: list[str] | None = None,
) -> dict[str, np.ndarray]:
    """Estimate d f / d param by central differences.

    The step for coordinate ``p`` is ``eps * max(1, |p|)``. ``f`` is evaluated
    with tape recording off and must be deterministic: two baseline
    evaluations are compared bitwise before any perturbation.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with no_grad():
        base1, base2 = _scalar(f(params)), _scalar(f(params))
        if base1 != base2:
            raise OracleInvalidError(f"f is not deterministic: {base1!r} != {base2!r}")
        out: dict[str, np.ndarray] = {}
        for name in names or list(params):
            p = params[name]
            flat = p.data.reshape(-1)
            grad = np.zeros(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                h = eps * max(1.0, abs(orig))
                flat[i] = orig + h
                fp = _scalar(f(params))
                flat[i] = orig - h
                fm = _scalar(f(params))
                flat[i] = orig
                grad[i] = (fp - fm) / (2.0 * h)
            out[name] = grad.reshape(p.shape)
    return out


def max_relative_error(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray],
                       floor: float = 1e-6) -> float:
    """Largest per-coordinate ``|a - n| / max(|a|, |n|, floor)`` over all parameters."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst
