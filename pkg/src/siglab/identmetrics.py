"""Identifiability metrics: matched correlation (MCC), a regression-probe RMSE and accuracy."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .errors import ContractError, MetricError, ShapeError
from .numkit import OptimState, Rng, Tape, backward, sgd_momentum_step
from .numkit import ad
from .numkit.layers import init_affine

BRUTE_FORCE_MAX_DIM = 8
_S_PROBE = 20


def _as_2d(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise MetricError(f"{name} contains non-finite values")
    return a


def abs_pearson(A, B) -> np.ndarray:
    """``|corr(A[:, i], B[:, j])|`` as a p×q matrix; zero-variance columns correlate 0 with everything."""
    A, B = _as_2d(A, "A"), _as_2d(B, "B")
    if A.shape[0] != B.shape[0]:
        raise ShapeError(f"row counts differ: {A.shape[0]} vs {B.shape[0]}")
    if A.shape[0] < 2:
        raise MetricError("correlation needs at least 2 rows")
    Ac, Bc = A - A.mean(axis=0), B - B.mean(axis=0)
    # correctly rounded sums make the score symmetric in its arguments, and since sqrt(s * s) == s
    # in IEEE arithmetic a column against itself (or its negation) scores exactly 1
    ss_a = np.array([math.fsum(c * c) for c in Ac.T])
    ss_b = np.array([math.fsum(c * c) for c in Bc.T])
    dots = np.array([[math.fsum(a * b) for b in Bc.T] for a in Ac.T]).reshape(A.shape[1], B.shape[1])
    # a column is constant when its spread is at rounding level relative to its magnitude
    tol_a = 1e-12 * np.maximum(np.abs(A).max(axis=0), 1.0) * math.sqrt(A.shape[0])
    tol_b = 1e-12 * np.maximum(np.abs(B).max(axis=0), 1.0) * math.sqrt(B.shape[0])
    ok_a, ok_b = np.sqrt(ss_a) > tol_a, np.sqrt(ss_b) > tol_b
    denom = np.sqrt(np.outer(np.where(ok_a, ss_a, 1.0), np.where(ok_b, ss_b, 1.0)))
    corr = np.abs(dots) / denom
    corr[~ok_a, :] = 0.0
    corr[:, ~ok_b] = 0.0
    return np.clip(corr, 0.0, 1.0)


@lru_cache(maxsize=None)
def _permutations(d: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(d))), dtype=np.int64).reshape(-1, d)


def best_assignment(score) -> tuple[tuple[int, ...], float]:
    """Permutation ``p`` maximizing ``sum_i score[i, p[i]]`` and that total.

    Exhaustive for d <= 8, where ties resolve to the lexicographically smallest
    permutation; a Hungarian solver handles larger matrices.
    """
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 2 or score.shape[0] != score.shape[1]:
        raise ShapeError(f"score must be square, got shape {score.shape}")
    if not np.isfinite(score).all():
        raise MetricError("score contains non-finite values")
    d = score.shape[0]
    if d == 0:
        return (), 0.0
    if d <= BRUTE_FORCE_MAX_DIM:
        perms = _permutations(d)
        totals = score[np.arange(d), perms].sum(axis=1)
        k = int(np.argmax(totals))  # first maximum = lexicographically smallest
        return tuple(int(j) for j in perms[k]), float(totals[k])
    rows, cols = linear_sum_assignment(score, maximize=True)
    perm = tuple(int(c) for _, c in sorted(zip(rows, cols)))
    return perm, float(score[np.arange(d), list(perm)].sum())


def _ranks(a: np.ndarray) -> np.ndarray:
    return rankdata(a, axis=0)


def matched_correlations(Z_true, Z_est, method: str = "pearson") -> tuple[np.ndarray, tuple[int, ...]]:
    Z_true, Z_est = _as_2d(Z_true, "Z_true"), _as_2d(Z_est, "Z_est")
    if Z_true.shape != Z_est.shape:
        raise ShapeError(f"latent shapes differ: {Z_true.shape} vs {Z_est.shape}")
    if method == "spearman":
        Z_true, Z_est = _ranks(Z_true), _ranks(Z_est)
    elif method != "pearson":
        raise ContractError(f"unknown correlation method {method!r}")
    corr = abs_pearson(Z_true, Z_est)
    perm, _ = best_assignment(corr)
    return corr[np.arange(len(perm)), list(perm)], perm


def mcc(Z_true, Z_est, method: str = "pearson") -> float:
    """Mean absolute correlation between true and estimated latents under the best matching."""
    matched, _ = matched_correlations(Z_true, Z_est, method)
    return float(matched.mean())


@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 64
    layers: int = 2
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    standardize_inputs: bool = True

    def __post_init__(self):
        if self.hidden < 1 or self.layers < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ContractError("probe sizes and epochs must be positive")
        if not self.lr > 0 or not 0.0 <= self.momentum < 1.0:
            raise ContractError("probe needs lr > 0 and momentum in [0, 1)")


class Probe:
    """ReLU MLP regressor trained with minibatch momentum SGD on squared error."""

    def __init__(self, cfg: ProbeConfig, in_dim: int, out_dim: int, stream: int = _S_PROBE):
        self.cfg = cfg
        self.rng = Rng(cfg.seed, stream)
        self.params: dict[str, np.ndarray] = {}
        fan_in = in_dim
        for i in range(cfg.layers):
            for k, v in init_affine(self.rng, fan_in, cfg.hidden).items():
                self.params[f"fc{i}.{k}"] = v
            fan_in = cfg.hidden
        for k, v in init_affine(self.rng, fan_in, out_dim).items():
            self.params[f"out.{k}"] = v * 0.1 if k == "W" else v
        self.shift = np.zeros(in_dim)
        self.scale = np.ones(in_dim)

    def _forward(self, v, x):
        h = x
        for i in range(self.cfg.layers):
            h = ad.relu(ad.affine(h, v[f"fc{i}.W"], v[f"fc{i}.b"]))
        return ad.affine(h, v["out.W"], v["out.b"])

    def fit(self, X: np.ndarray, Y: np.ndarray) -> list[float]:
        cfg = self.cfg
        if cfg.standardize_inputs:
            self.shift = X.mean(axis=0)
            sd = X.std(axis=0)
            self.scale = np.where(sd > 0, sd, 1.0)
        Xs = (X - self.shift) / self.scale
        # start the output bias at the target mean so early steps fit structure, not offset
        self.params["out.b"] = Y.mean(axis=0, keepdims=True).copy()
        opt = OptimState(cfg.lr, cfg.momentum)
        names = list(self.params)
        n = Xs.shape[0]
        losses = []
        for epoch in range(cfg.epochs):
            order = self.rng.permutation(n)
            total = 0.0
            for lo in range(0, n, cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                tape = Tape()
                v = {k: tape.param(p, name=k) for k, p in self.params.items()}
                loss = ad.mse(self._forward(v, tape.const(Xs[idx])), Y[idx])
                value = float(loss.value)
                if not math.isfinite(value):
                    raise MetricError(f"probe diverged at epoch {epoch}")
                grads = backward(tape, loss, [v[k] for k in names])
                sgd_momentum_step(self.params, dict(zip(names, grads)), opt)
                total += value * idx.size
            losses.append(total / n)
        return losses

    def predict(self, X: np.ndarray) -> np.ndarray:
        v = {k: ad.Var(p) for k, p in self.params.items()}
        out = self._forward(v, ad.Var((X - self.shift) / self.scale)).value
        if not np.isfinite(out).all():
            raise MetricError("probe produced non-finite predictions")
        return out


def probe_rmse_per_dim(Z_est_val, Z_true_val, Z_est_test, Z_true_test, cfg: ProbeConfig = ProbeConfig()) -> np.ndarray:
    """Test RMSE of one probe per true dimension, each fitted on the validation pair."""
    Ev, Tv = _as_2d(Z_est_val, "Z_est_val"), _as_2d(Z_true_val, "Z_true_val")
    Et, Tt = _as_2d(Z_est_test, "Z_est_test"), _as_2d(Z_true_test, "Z_true_test")
    if Ev.shape[0] != Tv.shape[0] or Et.shape[0] != Tt.shape[0]:
        raise ShapeError("estimated and true latents must be row-aligned")
    if Ev.shape[1] != Et.shape[1] or Tv.shape[1] != Tt.shape[1]:
        raise ShapeError("validation and test latents must have the same columns")
    if Ev.shape[0] < 2 or Et.shape[0] < 1:
        raise MetricError("probe needs at least 2 validation rows and 1 test row")
    out = np.empty(Tv.shape[1])
    for i in range(Tv.shape[1]):
        probe = Probe(cfg, Ev.shape[1], 1, stream=_S_PROBE + i)
        probe.fit(Ev, Tv[:, i:i + 1])
        err = probe.predict(Et)[:, 0] - Tt[:, i]
        out[i] = math.sqrt(float(np.mean(err**2)))
    return out


def subspace_rmse(Z_est_val, Z_true_val, Z_est_test, Z_true_test, cfg: ProbeConfig = ProbeConfig()) -> float:
    """Mean over true dimensions of the probe's test RMSE."""
    return float(probe_rmse_per_dim(Z_est_val, Z_true_val, Z_est_test, Z_true_test, cfg).mean())


def least_squares_rmse(Z_est_val, Z_true_val, Z_est_test, Z_true_test) -> float:
    """The same score for an affine least-squares regressor; a reference for the probe."""
    Ev = np.hstack([_as_2d(Z_est_val, "Z_est_val"), np.ones((len(Z_est_val), 1))])
    Et = np.hstack([_as_2d(Z_est_test, "Z_est_test"), np.ones((len(Z_est_test), 1))])
    coef = np.linalg.lstsq(Ev, _as_2d(Z_true_val, "Z_true_val"), rcond=None)[0]
    err = Et @ coef - _as_2d(Z_true_test, "Z_true_test")
    return float(np.sqrt(np.mean(err**2, axis=0)).mean())


def accuracy(pred, true) -> float:
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ShapeError(f"prediction and label shapes differ: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise MetricError("accuracy of an empty sequence")
    return float(np.mean(pred == true))


REPORT_CSV_FIELDS = ("acc", "mcc", "rmse", "per_dim_corr", "per_dim_rmse", "q")


@dataclass
class MetricsReport:
    """Evaluation summary. ``mcc``/``rmse`` are ``None`` without ground-truth latents, ``acc`` without a classifier."""

    acc: float | None
    mcc: float | None = None
    rmse: float | None = None
    per_dim_corr: list[float] = field(default_factory=list)
    per_dim_rmse: list[float] = field(default_factory=list)
    q: list[float] = field(default_factory=list)
    loss_tail: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.acc is not None and not 0.0 <= self.acc <= 1.0:
            raise MetricError(f"acc out of range: {self.acc}")
        if self.mcc is not None and not 0.0 <= self.mcc <= 1.0 + 1e-12:
            raise MetricError(f"mcc out of range: {self.mcc}")
        if self.rmse is not None and not self.rmse >= 0.0:
            raise MetricError(f"rmse must be non-negative, got {self.rmse}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def csv_row(self) -> str:
        def cell(v):
            if v is None:
                return "NA"
            if isinstance(v, list):
                return ";".join(repr(float(x)) for x in v)
            return repr(float(v))

        buf = io.StringIO()
        csv.writer(buf, lineterminator="").writerow([cell(getattr(self, k)) for k in REPORT_CSV_FIELDS])
        return buf.getvalue()
