"""Central-difference gradient verification.

The oracle for every analytic gradient in the package: perturb one coordinate
at a time, compare (f(x+h) - f(x-h)) / 2h against the recorded backward pass.
Only meaningful at float64; float32 rounding swamps the h=1e-5 differences.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, OracleInvalidError
from .tensor import Tensor


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and numeric gradients of ``f``.

    ``f`` is a zero-argument closure over ``params`` returning a scalar
    tensor; it must be deterministic (verified by running it twice). The
    relative error per coordinate is |analytic - numeric| divided by
    max(1e-12, |analytic| + |numeric|).
    """
    if h <= 0:
        raise ContractError(f"finite_difference_check: step h must be positive, got {h}")
    tensors = list(params.values()) if isinstance(params, Mapping) else list(params)
    if not tensors:
        raise ContractError("finite_difference_check: no parameters given")

    first = f().item()
    second = f().item()
    if first != second:
        raise OracleInvalidError(
            "function is not deterministic: two forward passes gave "
            f"{first!r} and {second!r}"
        )

    for t in tensors:
        t.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    worst = 0.0
    for t, ana in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = f().item()
            flat[k] = orig - h
            fm = f().item()
            flat[k] = orig
            numeric = (fp - fm) / (2.0 * h)
            denom = max(1e-12, abs(ana_flat[k]) + abs(numeric))
            worst = max(worst, abs(ana_flat[k] - numeric) / denom)
    return worst
