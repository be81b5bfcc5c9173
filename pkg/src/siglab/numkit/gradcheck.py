"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Tape, Var, backward

LossFn = Callable[[Tape, dict[str, Var]], Var]


def numeric_gradient(loss_fn: LossFn, params: dict[str, np.ndarray], name: str, eps: float = 1e-5) -> np.ndarray:
    p = params[name]
    grad = np.zeros_like(p)
    it = np.nditer(p, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = p[idx]
        p[idx] = orig + eps
        plus = _evaluate(loss_fn, params)
        p[idx] = orig - eps
        minus = _evaluate(loss_fn, params)
        p[idx] = orig
        grad[idx] = (plus - minus) / (2.0 * eps)
    return grad


def _evaluate(loss_fn: LossFn, params: dict[str, np.ndarray]) -> float:
    tape = Tape()
    return float(loss_fn(tape, {k: tape.const(v) for k, v in params.items()}).value)


def analytic_gradients(loss_fn: LossFn, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    tape = Tape()
    vars_ = {k: tape.param(v, name=k) for k, v in params.items()}
    loss = loss_fn(tape, vars_)
    names = list(params)
    return dict(zip(names, backward(tape, loss, [vars_[k] for k in names])))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max-norm error scaled by the larger of the two gradients' max norms."""
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


def check_gradients(loss_fn: LossFn, params: dict[str, np.ndarray], eps: float = 1e-5) -> dict[str, float]:
    """Relative error per parameter between tape gradients and central differences.

    ``loss_fn`` must be deterministic: any dropout masks or noise are fixed by the caller.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    analytic = analytic_gradients(loss_fn, params)
    return {name: relative_error(analytic[name], numeric_gradient(loss_fn, params, name, eps)) for name in params}
