"""Finite-difference gradient checks for every layer, every loss term and the composed training loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..numkit import Rng, Tape, ad, check_gradients
from ..numkit.layers import batchnorm, dropout, layer_forward
from ..shiftest import ClassCentroids, TargetLabelDist, class_aware_alignment, update_centroids
from ..sigmodel import (Architecture, PartitionDims, SigModel, Trainer, TrainConfig, class_confusion,
                        confusion_row_weights)

LAYER_TOL = 1e-4
COMPOSED_TOL = 1e-3
BATCH = 16


@dataclass
class GradCheck:
    name: str
    tol: float
    errors: dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def ok(self) -> bool:
        return self.max_error < self.tol


def _layer_cases(rng: np.random.Generator) -> list[tuple[str, Callable, dict]]:
    n, d, k = BATCH, 5, 3
    x = rng.normal(size=(n, d))
    W, b = rng.normal(size=(d, k)), rng.normal(size=(1, k))
    # keep pre-activations away from the relu kink so central differences stay on one side
    xr = rng.normal(size=(n, d))
    xr = np.where(np.abs(xr) < 0.05, 0.1, xr)
    labels = rng.integers(0, k, size=n)
    mask_rng_seed = 7

    def layer(kind, **extra):
        def f(tape, v):
            params = {key: v[key] for key in ("W", "b", "gamma", "beta") if key in v} | extra
            return ad.sum(ad.square(layer_forward(kind, v["x"], params, "train")[0]))
        return f

    def bn(train):
        def f(tape, v):
            rm, rv = np.full((1, d), 0.3), np.full((1, d), 1.7)
            out, _ = batchnorm(v["x"], v["gamma"], v["beta"], rm, rv, train)
            return ad.sum(ad.mul(out, out))
        return f

    def drop(tape, v):
        out, _ = dropout(v["x"], 0.1, True, Rng(mask_rng_seed, 0))
        return ad.sum(ad.square(out))

    gamma, beta = rng.uniform(0.5, 1.5, size=(1, d)), rng.normal(size=(1, d))
    mu, lv = rng.normal(size=(n, 4)), rng.normal(scale=0.5, size=(n, 4))
    pm, plv = rng.normal(size=(n, 4)), rng.normal(scale=0.5, size=(n, 4))
    target = rng.normal(size=(n, 4))
    C = 3
    zs, zt = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
    ys, yt = rng.integers(0, C, size=n), rng.integers(0, C, size=n)
    ys[:C], yt[:C] = np.arange(C), np.arange(C)
    conf_logits = rng.normal(size=(n, k))
    # row weights are constants of the loss, so they are frozen at the evaluation point
    conf_w = confusion_row_weights(conf_logits)

    def align(tape, v):
        cs, ct = ClassCentroids(2, C, 0.9), ClassCentroids(2, C, 0.9)
        cs.vectors, cs.counts = np.ones((C, 2)) * 0.3, np.ones(C)
        new_s = update_centroids(cs, v["zs"], ys)
        new_t = update_centroids(ct, v["zt"], yt)
        return class_aware_alignment(new_s, new_t, TargetLabelDist(np.array([0.6, 0.3, 0.1]), 1.0),
                                     np.array([1.9, 1.5, 1.2]), cs.present, ct.present)

    return [
        ("affine", layer("affine"), {"x": x, "W": W, "b": b}),
        ("relu", layer("relu"), {"x": xr}),
        ("tanh", layer("tanh"), {"x": x}),
        ("sigmoid", layer("sigmoid"), {"x": x}),
        ("softmax", lambda t, v: ad.sum(ad.mul(layer_forward("softmax", v["x"])[0], x)), {"x": x}),
        ("batchnorm/train", bn(True), {"x": x, "gamma": gamma, "beta": beta}),
        ("batchnorm/eval", bn(False), {"x": x, "gamma": gamma, "beta": beta}),
        ("dropout", drop, {"x": x}),
        ("cross_entropy", lambda t, v: ad.cross_entropy(v["logits"], labels), {"logits": rng.normal(size=(n, k))}),
        ("mse", lambda t, v: ad.mse(v["pred"], target), {"pred": rng.normal(size=(n, 4))}),
        ("gaussian_nll", lambda t, v: ad.gaussian_nll(v["pred"], target, v["logvar"]),
         {"pred": rng.normal(size=(n, 4)), "logvar": rng.normal(scale=0.3, size=(1, 4))}),
        ("kl/standard", lambda t, v: ad.kl_diag_gaussian(v["mu"], v["logvar"]), {"mu": mu, "logvar": lv}),
        ("kl/learned_prior", lambda t, v: ad.kl_diag_gaussian(v["mu"], v["logvar"], v["pm"], v["plv"]),
         {"mu": mu, "logvar": lv, "pm": pm, "plv": plv}),
        ("row_norms", lambda t, v: ad.sum(ad.row_norms(v["x"])), {"x": x}),
        ("class_aware_alignment", align, {"zs": zs, "zt": zt}),
        ("class_confusion", lambda t, v: class_confusion(v["logits"], row_weights=conf_w), {"logits": conf_logits}),
    ]


def layer_checks(seed: int = 0, eps: float = 1e-5) -> list[GradCheck]:
    rng = np.random.default_rng(seed)
    return [GradCheck(name, LAYER_TOL, check_gradients(fn, params, eps)) for name, fn, params in _layer_cases(rng)]


def composed_check(seed: int = 0, eps: float = 1e-5, hidden: int = 32) -> GradCheck:
    """The full training objective on a 16-row source batch and a 16-row target batch, batchnorm in eval mode."""
    rng = np.random.default_rng(seed)
    U, C, n_in = 4, 2, 8
    arch = Architecture(input_dim=n_in, num_domains=U, num_classes=C, dims=PartitionDims(2, 2, 2, 2),
                        enc_hidden=(hidden,), dec_hidden=(hidden,), cls_hidden=(hidden // 2,))
    model = SigModel.init(arch, seed)
    # non-trivial embeddings, prior and running statistics so every path carries gradient
    model.params["embed"] = rng.normal(scale=0.5, size=model.params["embed"].shape)
    model.params["prior.mu"] = rng.normal(scale=0.5, size=model.params["prior.mu"].shape)
    model.params["prior.logvar"] = rng.normal(scale=0.3, size=model.params["prior.logvar"].shape)
    for k in model.buffers:
        shape = model.buffers[k].shape
        model.buffers[k] = rng.normal(scale=0.2, size=shape) if k.endswith("mean") else rng.uniform(0.5, 2, shape)
    cfg = TrainConfig(alpha=0.5, beta=0.1, seed=seed)
    xs, xt = rng.normal(size=(BATCH, n_in)), rng.normal(size=(BATCH, n_in))
    ys = np.arange(BATCH) % C
    us, ut = rng.integers(1, U, size=BATCH), np.zeros(BATCH, dtype=np.int64)
    q = TargetLabelDist(np.array([0.7, 0.3]), 1.0)

    def evaluate(tape, v, weights=None):
        # a fresh trainer per evaluation: same noise draw, empty centroid history
        trainer = Trainer(model, cfg)
        trainer.q = q
        return trainer.step_loss(tape, v, xs, ys, us, xt, ut, train=False, weights=weights)

    # entropy weights are step constants; freeze them at the unperturbed point
    tape = Tape()
    _, parts = evaluate(tape, {k: tape.const(p) for k, p in model.params.items()})
    frozen = parts["weights"]

    def loss_fn(tape, v):
        return evaluate(tape, v, frozen)[0]

    return GradCheck("composed_loss", COMPOSED_TOL, check_gradients(loss_fn, dict(model.params), eps))


def run_all(seed: int = 0) -> list[GradCheck]:
    return layer_checks(seed) + [composed_check(seed)]
