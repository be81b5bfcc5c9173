"""Target label-shift estimation and class-aware conditional alignment."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .numkit import ad
from .numkit.autodiff import Var

COND_LIMIT = 1e6


@dataclass
class ConfusionJoint:
    """``matrix[i, j]`` is the empirical P(prediction = i, label = j)."""

    matrix: np.ndarray
    count: int

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def label_marginal(self) -> np.ndarray:
        return self.matrix.sum(axis=0)


@dataclass
class TargetLabelDist:
    q: np.ndarray
    condition_number: float
    fallback: bool = False


def confusion_joint(pred_labels, true_labels, num_classes: int) -> ConfusionJoint:
    pred = np.asarray(pred_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ContractError("predictions and labels differ in length")
    if pred.size == 0:
        raise ContractError("confusion matrix of an empty sample")
    if min(pred.min(), true.min()) < 0 or max(pred.max(), true.max()) >= num_classes:
        raise ContractError(f"labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes))
    np.add.at(counts, (pred, true), 1.0)
    return ConfusionJoint(counts / pred.size, int(pred.size))


def bbse(cjoint: ConfusionJoint, mu_hat) -> TargetLabelDist:
    """Black-box shift estimate of the target label distribution.

    Solves ``C w = mu_hat`` for the importance weights ``w = q / p_source`` and
    returns ``q = w * p_source`` clipped at zero and renormalized. An
    ill-conditioned ``C`` falls back to the least-squares solution; if nothing
    positive survives the clip, ``mu_hat`` itself is returned with ``fallback`` set.
    """
    mu_hat = np.asarray(mu_hat, dtype=np.float64)
    C = cjoint.matrix
    if mu_hat.shape != (C.shape[0],):
        raise ContractError(f"mu_hat must have length {C.shape[0]}")
    if (mu_hat < 0).any() or abs(mu_hat.sum() - 1.0) > 1e-9:
        raise ContractError("mu_hat must lie on the simplex")
    cond = float(np.linalg.cond(C))
    if np.isfinite(cond) and cond <= COND_LIMIT:
        w = np.linalg.solve(C, mu_hat)
    else:
        w = np.linalg.lstsq(C, mu_hat, rcond=None)[0]
    q = np.clip(w * cjoint.label_marginal, 0.0, None)
    total = q.sum()
    if not total > 0:
        warnings.warn("BBSE produced no positive mass; using raw target prediction frequencies", RuntimeWarning)
        return TargetLabelDist(mu_hat.copy(), cond, fallback=True)
    return TargetLabelDist(q / total, cond)


def entropy_weight(mean_probs) -> float:
    """``1 + exp(-H(p))`` for a populated class; ``None`` marks an absent class (weight 1)."""
    if mean_probs is None:
        return 1.0
    p = np.asarray(mean_probs, dtype=np.float64)
    C = p.size
    nz = p[p > 0]
    # H = ln C - KL(p || uniform); the KL term vanishes exactly for a uniform input
    entropy = np.log(C) - np.sum(nz * np.log(nz * C))
    return float(1.0 + np.exp(-entropy))


def align_weights(pseudo_labels, probs: np.ndarray, num_classes: int) -> np.ndarray:
    """Entropy weight per class from the mean softmax of target rows pseudo-labelled with it."""
    pseudo_labels = np.asarray(pseudo_labels)
    w = np.ones(num_classes)
    for i in range(num_classes):
        sel = pseudo_labels == i
        if sel.any():
            w[i] = entropy_weight(probs[sel].mean(axis=0))
    return w


@dataclass
class ClassCentroids:
    dim: int
    num_classes: int
    decay: float = 0.9
    vectors: np.ndarray = field(init=False)
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.vectors = np.zeros((self.num_classes, self.dim))
        self.counts = np.zeros(self.num_classes)

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0


def class_batch_means(z_block: Var, labels, num_classes: int) -> tuple[Var, np.ndarray]:
    """Per-class row means of ``z_block`` (zeros for classes absent from the batch) and class counts."""
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros((num_classes, labels.size))
    onehot[labels, np.arange(labels.size)] = 1.0
    counts = onehot.sum(axis=1)
    avg = onehot / np.where(counts > 0, counts, 1.0)[:, None]
    return ad.matmul(Var(avg), z_block), counts


def update_centroids(cent: ClassCentroids, z_block, labels) -> Var:
    """EMA update with this batch; returns the new centroids as a Var carrying the batch gradient.

    History enters as a constant. Classes seen for the first time are set to their batch mean.
    """
    z_block = z_block if isinstance(z_block, Var) else Var(z_block)
    if z_block.value.shape[1] != cent.dim:
        raise ContractError(f"block has {z_block.value.shape[1]} columns, centroids have {cent.dim}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= cent.num_classes):
        raise ContractError("label out of range")
    batch_means, counts = class_batch_means(z_block, labels, cent.num_classes)
    in_batch = counts > 0
    seen = cent.present
    # per-class mixing coefficient on the batch mean: 0 absent, 1 first sight, (1 - decay) otherwise
    coef = np.where(in_batch, np.where(seen, 1.0 - cent.decay, 1.0), 0.0)[:, None]
    history = cent.vectors * (1.0 - coef)
    new = ad.add(ad.mul(batch_means, coef), history)
    cent.vectors = new.value.copy()
    cent.counts = cent.counts + counts
    return new


def class_aware_alignment(cent_s, cent_t, q, w, present_s=None, present_t=None) -> Var:
    """``(1/C) * sum_i w_i q_i ||c_S,i - c_T,i||_2`` over classes present on both sides.

    ``cent_s``/``cent_t`` may be Vars (from :func:`update_centroids`) or arrays.
    """
    cs = cent_s if isinstance(cent_s, Var) else Var(cent_s)
    ct = cent_t if isinstance(cent_t, Var) else Var(cent_t)
    if cs.value.shape != ct.value.shape:
        raise ContractError(f"centroid shapes differ: {cs.value.shape} vs {ct.value.shape}")
    C = cs.value.shape[0]
    q = np.asarray(q.q if isinstance(q, TargetLabelDist) else q, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    both = np.ones(C, dtype=bool)
    if present_s is not None:
        both &= np.asarray(present_s)
    if present_t is not None:
        both &= np.asarray(present_t)
    coeff = np.where(both, w * q, 0.0)[None, :] / C
    dists = ad.row_norms(ad.sub(cs, ct))
    return ad.sum(ad.matmul(Var(coeff), dists))
