"""The fixed layer set used by the encoder, decoder, classifier and probe."""

from __future__ import annotations

from typing import Any

import numpy as np

from ..errors import ContractError, NumericError, ShapeError
from . import autodiff as ad
from .autodiff import Var, _record
from .rng import Rng

BN_DECAY = 0.9
BN_EPS = 1e-5
DROPOUT_RATE = 0.1

LAYER_KINDS = ("affine", "relu", "tanh", "sigmoid", "softmax", "batchnorm", "dropout")


def batchnorm(x: Var, gamma: Var, beta: Var, running_mean: np.ndarray, running_var: np.ndarray,
              train: bool, decay: float = BN_DECAY, eps: float = BN_EPS) -> tuple[Var, dict]:
    """Batch normalization over rows. Running statistics are updated in place in train mode."""
    xv = x.value
    gv = gamma.value
    if train:
        n = xv.shape[0]
        if n < 2:
            raise ContractError("batchnorm in train mode needs at least 2 rows")
        mu = xv.mean(axis=0, keepdims=True)
        centered = xv - mu
        var = (centered * centered).mean(axis=0, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        running_mean *= decay
        running_mean += (1.0 - decay) * mu
        running_var *= decay
        running_var += (1.0 - decay) * var * (n / (n - 1))

        def vjp(g):
            dxhat = g * gv
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0, keepdims=True)
                                - xhat * (dxhat * xhat).sum(axis=0, keepdims=True))
            return (dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True))

        cache = {"batch_mean": mu, "batch_var": var}
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (xv - running_mean) * inv_std

        def vjp(g):
            return (g * gv * inv_std, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True))

        cache = {}
    cache["xhat"] = xhat
    out = _record(gv * xhat + beta.value, (x, gamma, beta), vjp)
    return out, cache


def dropout(x: Var, rate: float, train: bool, rng: Rng | None) -> tuple[Var, dict]:
    if not train or rate == 0.0:
        return x, {"mask": None}
    if rng is None:
        raise ContractError("dropout in train mode needs an rng")
    mask = (rng.random(x.value.shape) >= rate) / (1.0 - rate)
    return _record(x.value * mask, (x,), lambda g: (g * mask,)), {"mask": mask}


def layer_forward(kind: str, x: Var, params: dict[str, Any] | None = None, mode: str = "train",
                  rng: Rng | None = None) -> tuple[Var, dict]:
    """Apply one layer; returns the output and a cache of forward intermediates."""
    if mode not in ("train", "eval"):
        raise ContractError(f"unknown mode {mode!r}")
    if not np.isfinite(x.value).all():
        raise NumericError(f"non-finite input to {kind} layer")
    params = params or {}
    train = mode == "train"
    if kind == "affine":
        w, b = params["W"], params["b"]
        if w.value.shape[1] != b.value.shape[-1]:
            raise ShapeError(f"affine bias {b.value.shape} does not match weight {w.value.shape}")
        return ad.affine(x, w, b), {}
    if kind == "relu":
        return ad.relu(x), {}
    if kind == "tanh":
        return ad.tanh(x), {}
    if kind == "sigmoid":
        return ad.sigmoid(x), {}
    if kind == "softmax":
        return ad.softmax(x), {}
    if kind == "batchnorm":
        return batchnorm(x, params["gamma"], params["beta"], params["running_mean"], params["running_var"],
                         train, params.get("decay", BN_DECAY), params.get("eps", BN_EPS))
    if kind == "dropout":
        return dropout(x, params.get("rate", DROPOUT_RATE), train, rng)
    raise ContractError(f"unknown layer kind {kind!r}")


def init_affine(rng: Rng, fan_in: int, fan_out: int, zero: bool = False) -> dict[str, np.ndarray]:
    """He-uniform weights with zero bias."""
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return {"W": w, "b": np.zeros((1, fan_out))}


def init_batchnorm(width: int) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Returns (trainable params, running-statistic buffers)."""
    return ({"gamma": np.ones((1, width)), "beta": np.zeros((1, width))},
            {"running_mean": np.zeros((1, width)), "running_var": np.ones((1, width))})
