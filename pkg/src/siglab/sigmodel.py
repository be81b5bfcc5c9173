"""Variational model with a four-block latent, a domain-aware classifier and the composed training loss."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ContractError, ShapeError, TrainingError
from .numkit import OptimState, Rng, Tape, backward, sgd_momentum_step
from .numkit import ad
from .numkit.autodiff import Var
from .numkit.layers import DROPOUT_RATE, batchnorm, dropout, init_affine, init_batchnorm
from .shiftest import (ClassCentroids, TargetLabelDist, align_weights, bbse, class_aware_alignment,
                       confusion_joint, update_centroids)

MCC_TEMPERATURE = 2.5

# stream ids under TrainConfig.seed
_S_INIT, _S_SHUFFLE, _S_TARGET, _S_DROPOUT, _S_NOISE = 10, 11, 12, 13, 14


@dataclass(frozen=True)
class PartitionDims:
    n1: int = 0
    n2: int = 2
    n3: int = 2
    n4: int = 0

    def __post_init__(self):
        if min(self.n1, self.n2, self.n3, self.n4) < 0 or self.n2 + self.n3 < 1:
            raise ContractError(f"invalid latent partition {self}")

    @property
    def total(self) -> int:
        return self.n1 + self.n2 + self.n3 + self.n4

    def bounds(self) -> list[tuple[int, int]]:
        e = np.cumsum([0, self.n1, self.n2, self.n3, self.n4]).tolist()
        return [(e[i], e[i + 1]) for i in range(4)]

    def block(self, name: str) -> tuple[int, int]:
        return self.bounds()[int(name.lstrip("z")) - 1]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.0035
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 768
    alpha: float = 1e-5
    beta: float = 0.1
    kl_weight: float = 1.0
    seed: int = 0
    align_block: str = "z3"
    centroid_decay: float = 0.9
    mcc_confusion_enabled: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError("lr must be positive")
        if self.alpha < 0 or self.beta < 0 or self.kl_weight < 0:
            raise ContractError("alpha, beta and kl_weight must be non-negative")
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2 for batch normalization")
        if self.align_block not in ("z2", "z3"):
            raise ContractError("align_block must be 'z2' or 'z3'")
        if not 0.0 <= self.centroid_decay < 1.0:
            raise ContractError("centroid_decay must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    num_domains: int
    num_classes: int = 2
    dims: PartitionDims = PartitionDims()
    enc_hidden: tuple[int, ...] = (200,)
    dec_hidden: tuple[int, ...] = (200,)
    cls_hidden: tuple[int, ...] = (64,)
    embed_dim: int = 4
    dropout: float = DROPOUT_RATE
    prior: str = "domain"
    decoder_var: str = "learned"

    def __post_init__(self):
        if self.prior not in ("standard", "domain"):
            raise ContractError("prior must be 'standard' or 'domain'")
        if self.decoder_var not in ("unit", "learned"):
            raise ContractError("decoder_var must be 'unit' or 'learned'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = asdict(self.dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        d["dims"] = PartitionDims(**d["dims"])
        for k in ("enc_hidden", "dec_hidden", "cls_hidden"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class LossBreakdown:
    l_total: float
    l_y: float
    l_recon: float
    l_kl: float
    l_vae: float
    l_align: float

    def as_dict(self) -> dict:
        return asdict(self)


class SigModel:
    """Parameter bundle plus the forward passes; ``params`` holds trainables, ``buffers`` batchnorm state."""

    def __init__(self, arch: Architecture, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray]):
        self.arch = arch
        self.params = params
        self.buffers = buffers

    @classmethod
    def init(cls, arch: Architecture, seed: int = 0) -> "SigModel":
        rng = Rng(seed, _S_INIT)
        n = arch.dims.total
        params: dict[str, np.ndarray] = {}
        buffers: dict[str, np.ndarray] = {}

        def stack(prefix, widths, fan_in):
            for i, width in enumerate(widths):
                for k, v in init_affine(rng, fan_in, width).items():
                    params[f"{prefix}.fc{i}.{k}"] = v
                bn_p, bn_b = init_batchnorm(width)
                params.update({f"{prefix}.bn{i}.{k}": v for k, v in bn_p.items()})
                buffers.update({f"{prefix}.bn{i}.{k}": v for k, v in bn_b.items()})
                fan_in = width
            return fan_in

        h = stack("enc", arch.enc_hidden, arch.input_dim)
        for head in ("mu", "logvar"):
            w = init_affine(rng, h, n)
            w["W"] *= 0.1
            params.update({f"enc.{head}.{k}": v for k, v in w.items()})
        h = stack("dec", arch.dec_hidden, n)
        params.update({f"dec.out.{k}": v for k, v in init_affine(rng, h, arch.input_dim).items()})
        if arch.decoder_var == "learned":
            params["dec.logvar"] = np.zeros((1, arch.input_dim))
        fan_in = arch.dims.n2 + arch.dims.n3 + arch.embed_dim
        for i, width in enumerate(arch.cls_hidden):
            params.update({f"cls.fc{i}.{k}": v for k, v in init_affine(rng, fan_in, width).items()})
            fan_in = width
        params.update({f"cls.out.{k}": v for k, v in init_affine(rng, fan_in, arch.num_classes).items()})
        params["embed"] = np.zeros((arch.num_domains, arch.embed_dim))
        n_changing = arch.dims.n1 + arch.dims.n2
        if arch.prior == "domain" and n_changing:
            params["prior.mu"] = np.zeros((arch.num_domains, n_changing))
            params["prior.logvar"] = np.zeros((arch.num_domains, n_changing))
        return cls(arch, params, buffers)

    def copy(self) -> "SigModel":
        return SigModel(self.arch, {k: v.copy() for k, v in self.params.items()},
                        {k: v.copy() for k, v in self.buffers.items()})

    # -- forward pieces on a tape ---------------------------------------------

    def _mlp(self, v: dict[str, Var], prefix: str, widths, h: Var, train: bool, rng: Rng | None) -> Var:
        for i in range(len(widths)):
            h = ad.affine(h, v[f"{prefix}.fc{i}.W"], v[f"{prefix}.fc{i}.b"])
            h, _ = batchnorm(h, v[f"{prefix}.bn{i}.gamma"], v[f"{prefix}.bn{i}.beta"],
                             self.buffers[f"{prefix}.bn{i}.running_mean"],
                             self.buffers[f"{prefix}.bn{i}.running_var"], train)
            h = ad.relu(h)
            h, _ = dropout(h, self.arch.dropout, train, rng)
        return h

    def encode_vars(self, v, x: Var, train: bool = False, rng: Rng | None = None) -> tuple[Var, Var]:
        if x.value.shape[1] != self.arch.input_dim:
            raise ShapeError(f"input has {x.value.shape[1]} columns, model expects {self.arch.input_dim}")
        h = self._mlp(v, "enc", self.arch.enc_hidden, x, train, rng)
        return (ad.affine(h, v["enc.mu.W"], v["enc.mu.b"]), ad.affine(h, v["enc.logvar.W"], v["enc.logvar.b"]))

    def decode_vars(self, v, z: Var, train: bool = False, rng: Rng | None = None) -> Var:
        h = self._mlp(v, "dec", self.arch.dec_hidden, z, train, rng)
        return ad.affine(h, v["dec.out.W"], v["dec.out.b"])

    def classify_vars(self, v, z2: Var, z3: Var, u) -> Var:
        u = np.asarray(u, dtype=np.int64)
        if u.size and (u.min() < 0 or u.max() >= self.arch.num_domains):
            raise ContractError(f"domain index out of range [0, {self.arch.num_domains})")
        h = ad.concat_cols([z2, z3, ad.take_rows(v["embed"], u)])
        for i in range(len(self.arch.cls_hidden)):
            h = ad.relu(ad.affine(h, v[f"cls.fc{i}.W"], v[f"cls.fc{i}.b"]))
        return ad.affine(h, v["cls.out.W"], v["cls.out.b"])

    def kl_vars(self, v, mu: Var, logvar: Var, u) -> Var:
        """KL to the prior: per-domain learned Gaussian on z1|z2, N(0, I) elsewhere."""
        if "prior.mu" not in v:
            return ad.kl_diag_gaussian(mu, logvar)
        k = self.arch.dims.n1 + self.arch.dims.n2
        n = self.arch.dims.total
        u = np.asarray(u, dtype=np.int64)
        kl = ad.kl_diag_gaussian(ad.slice_cols(mu, 0, k), ad.slice_cols(logvar, 0, k),
                                 ad.take_rows(v["prior.mu"], u), ad.take_rows(v["prior.logvar"], u))
        if k < n:
            kl = ad.add(kl, ad.kl_diag_gaussian(ad.slice_cols(mu, k, n), ad.slice_cols(logvar, k, n)))
        return kl

    def const_vars(self) -> dict[str, Var]:
        return {k: Var(p) for k, p in self.params.items()}

    # -- plain-array inference -------------------------------------------------

    def encode(self, x) -> tuple[np.ndarray, np.ndarray]:
        mu, logvar = self.encode_vars(self.const_vars(), Var(np.asarray(x, dtype=np.float64)))
        return mu.value, logvar.value

    def decode(self, z) -> np.ndarray:
        return self.decode_vars(self.const_vars(), Var(np.asarray(z, dtype=np.float64))).value

    def classify(self, z2, z3, u) -> np.ndarray:
        return self.classify_vars(self.const_vars(), Var(np.asarray(z2, float)), Var(np.asarray(z3, float)), u).value


def reparameterize(mu, logvar, eps):
    """``mu + exp(logvar / 2) * eps`` on Vars or arrays."""
    if isinstance(mu, Var):
        return ad.add(mu, ad.mul(ad.exp(ad.scale(logvar, 0.5)), eps))
    mu, logvar, eps = (np.asarray(a, dtype=np.float64) for a in (mu, logvar, eps))
    if not mu.shape == logvar.shape == eps.shape:
        raise ShapeError("mu, logvar and eps must share a shape")
    return mu + np.exp(0.5 * logvar) * eps


def partition(z, dims: PartitionDims):
    """Column blocks ``(z1, z2, z3, z4)`` in order."""
    width = z.value.shape[1] if isinstance(z, Var) else np.asarray(z).shape[1]
    if width != dims.total:
        raise ShapeError(f"latent has {width} columns, partition expects {dims.total}")
    if isinstance(z, Var):
        return tuple(ad.slice_cols(z, a, b) for a, b in dims.bounds())
    z = np.asarray(z)
    return tuple(z[:, a:b] for a, b in dims.bounds())


def loss_vae(x, x_hat, mu, logvar, kl_weight: float, kl: Var | None = None,
             obs_logvar: Var | None = None) -> tuple[Var, Var, Var]:
    """Returns ``(total, reconstruction, kl)``.

    Reconstruction is the row-mean of summed squared error (unit-variance
    Gaussian decoder), or the Gaussian negative log-likelihood without the
    ``log 2pi`` constant when ``obs_logvar`` is given.
    """
    x_hat = x_hat if isinstance(x_hat, Var) else Var(x_hat)
    recon = ad.mse(x_hat, x) if obs_logvar is None else ad.gaussian_nll(x_hat, x, obs_logvar)
    if kl is None:
        kl = ad.kl_diag_gaussian(mu if isinstance(mu, Var) else Var(mu),
                                 logvar if isinstance(logvar, Var) else Var(logvar))
    return ad.add(recon, ad.scale(kl, kl_weight)), recon, kl


def confusion_row_weights(logits: np.ndarray, temperature: float = MCC_TEMPERATURE) -> np.ndarray:
    """``1 + exp(-entropy)`` of each temperature-scaled prediction, normalized to sum to the row count."""
    p = ad.softmax_array(np.asarray(logits) / temperature)
    ent = -(p * np.log(np.clip(p, 1e-300, None))).sum(axis=1)
    weight = 1.0 + np.exp(-ent)
    return logits.shape[0] * weight / weight.sum()


def class_confusion(logits: Var, temperature: float = MCC_TEMPERATURE, row_weights=None) -> Var:
    """Minimum-class-confusion penalty: off-diagonal mass of the normalized class-correlation matrix.

    Row weights (see :func:`confusion_row_weights`) enter as constants.
    """
    C = logits.value.shape[1]
    probs = ad.softmax(ad.scale(logits, 1.0 / temperature))
    if row_weights is None:
        row_weights = confusion_row_weights(logits.value, temperature)
    weight = np.asarray(row_weights, dtype=np.float64)[:, None]
    corr = ad.matmul(ad.transpose(ad.mul(probs, weight)), probs)
    corr = ad.div(corr, ad.sum(corr, axis=1, keepdims=True))
    off_diag = ad.mul(corr, 1.0 - np.eye(C))
    return ad.scale(ad.sum(off_diag), 1.0 / C)


def loss_y(logits, y, mcc_confusion_enabled: bool = False, confusion_logits: Var | None = None) -> Var:
    logits = logits if isinstance(logits, Var) else Var(logits)
    loss = ad.cross_entropy(logits, y)
    if mcc_confusion_enabled:
        loss = ad.add(loss, class_confusion(confusion_logits if confusion_logits is not None else logits))
    return loss


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """Row argmax; ties go to the lowest class index."""
    return np.argmax(probs, axis=1)


def infer_latents(model: SigModel, X) -> np.ndarray:
    return model.encode(X)[0]


def predict_target(model: SigModel, X, u_t) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    mu = infer_latents(model, X)
    _, z2, z3, _ = partition(mu, model.arch.dims)
    u = np.full(X.shape[0], u_t, dtype=np.int64) if np.ndim(u_t) == 0 else np.asarray(u_t)
    probs = ad.softmax_array(model.classify(z2, z3, u))
    return predict_labels(probs), probs


@dataclass
class DomainData:
    """Plain arrays for one side of training (sources carry labels, the target does not)."""

    X: np.ndarray
    u: np.ndarray
    y: np.ndarray | None = None


@dataclass
class TrainResult:
    model: SigModel
    history: list[LossBreakdown]
    steps: list[LossBreakdown]
    q_history: list[TargetLabelDist]
    weight_history: list[np.ndarray] = field(default_factory=list)
    populated_history: list[np.ndarray] = field(default_factory=list)

    @property
    def q(self) -> TargetLabelDist | None:
        return self.q_history[-1] if self.q_history else None


def _finite_or_raise(value: float, epoch: int, batch: int):
    if not math.isfinite(value):
        raise TrainingError("non-finite loss", epoch, batch)


class Trainer:
    """Minibatch momentum SGD on ``L_y + beta * L_vae + alpha * L_align``."""

    def __init__(self, model: SigModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        dims = model.arch.dims
        self.align_bounds = dims.block(cfg.align_block)
        width = self.align_bounds[1] - self.align_bounds[0]
        C = model.arch.num_classes
        self.cent_s = ClassCentroids(width, C, cfg.centroid_decay)
        self.cent_t = ClassCentroids(width, C, cfg.centroid_decay)
        self.opt = OptimState(cfg.lr, cfg.momentum)
        self.q = TargetLabelDist(np.full(C, 1.0 / C), 1.0, fallback=True)
        self.dropout_rng = Rng(cfg.seed, _S_DROPOUT)
        self.noise_rng = Rng(cfg.seed, _S_NOISE)

    def refresh_q(self, source_val: DomainData, target: DomainData) -> TargetLabelDist:
        C = self.model.arch.num_classes
        pred_s, _ = predict_target(self.model, source_val.X, source_val.u)
        pred_t, _ = predict_target(self.model, target.X, target.u)
        mu_hat = np.bincount(pred_t, minlength=C) / pred_t.size
        self.q = bbse(confusion_joint(pred_s, source_val.y, C), mu_hat)
        return self.q

    def step_loss(self, tape: Tape, v: dict[str, Var], xs, ys, us, xt, ut, train: bool = True,
                  weights: np.ndarray | None = None) -> tuple[Var, dict]:
        """Composed loss on one source batch and one target batch.

        ``train=False`` runs batchnorm on running statistics. The entropy
        weights are constants of the step; ``weights`` supplies them instead of
        computing them from this batch's target predictions.
        """
        cfg, model = self.cfg, self.model
        dims = model.arch.dims
        ns = xs.shape[0]
        x = np.vstack([xs, xt])
        u = np.concatenate([us, ut])
        mu, logvar = model.encode_vars(v, tape.const(x), train=train, rng=self.dropout_rng)
        eps = self.noise_rng.normal(size=mu.value.shape)
        z = reparameterize(mu, logvar, eps)
        x_hat = model.decode_vars(v, z, train=train, rng=self.dropout_rng)
        kl = model.kl_vars(v, mu, logvar, u)
        l_vae, recon, kl = loss_vae(x, x_hat, mu, logvar, cfg.kl_weight, kl=kl, obs_logvar=v.get("dec.logvar"))

        _, z2, z3, _ = partition(z, dims)
        logits = model.classify_vars(v, z2, z3, u)
        logits_s = ad.take_rows(logits, np.arange(ns))
        logits_t = ad.take_rows(logits, np.arange(ns, x.shape[0]))
        l_y = loss_y(logits_s, ys, cfg.mcc_confusion_enabled, confusion_logits=logits_t)

        a, b = self.align_bounds
        block = ad.slice_cols(mu, a, b)
        probs_t = ad.softmax_array(logits_t.value)
        pseudo = predict_labels(probs_t)
        w = align_weights(pseudo, probs_t, model.arch.num_classes) if weights is None else np.asarray(weights)
        c_s = update_centroids(self.cent_s, ad.take_rows(block, np.arange(ns)), ys)
        c_t = update_centroids(self.cent_t, ad.take_rows(block, np.arange(ns, x.shape[0])), pseudo)
        l_align = class_aware_alignment(c_s, c_t, self.q, w, self.cent_s.present, self.cent_t.present)

        total = ad.add(ad.add(l_y, ad.scale(l_vae, cfg.beta)), ad.scale(l_align, cfg.alpha))
        parts = {"l_y": float(l_y.value), "l_recon": float(recon.value), "l_kl": float(kl.value),
                 "l_vae": float(l_vae.value), "l_align": float(l_align.value), "l_total": float(total.value),
                 "weights": w, "populated": np.bincount(pseudo, minlength=model.arch.num_classes) > 0}
        return total, parts


def train_fit(sources: DomainData, target: DomainData, cfg: TrainConfig, arch: Architecture | None = None,
              source_val: DomainData | None = None, model: SigModel | None = None) -> TrainResult:
    """Fit a model on labelled source rows and unlabelled target rows.

    ``source_val`` feeds the once-per-epoch label-shift estimate; the source
    training rows are used when it is omitted.
    """
    if sources.y is None:
        raise ContractError("source rows need labels")
    if sources.X.shape[1] != target.X.shape[1]:
        raise ShapeError("source and target feature dimensions differ")
    if arch is None and model is None:
        raise ContractError("pass an architecture or an initialized model")
    model = model or SigModel.init(arch, cfg.seed)
    source_val = source_val or sources
    trainer = Trainer(model, cfg)
    names = list(model.params)
    shuffle_rng, target_rng = Rng(cfg.seed, _S_SHUFFLE), Rng(cfg.seed, _S_TARGET)
    ns, nt = sources.X.shape[0], target.X.shape[0]
    bs = cfg.batch_size
    n_batches = max(1, ns // bs) if ns >= bs else 1
    history, steps, q_hist, w_hist, pop_hist = [], [], [], [], []
    target_order = target_rng.permutation(nt)
    t_pos = 0
    for epoch in range(cfg.epochs):
        q_hist.append(trainer.refresh_q(source_val, target))
        order = shuffle_rng.permutation(ns)
        # the remainder rows join the last batch so every batch has at least 2 rows
        bounds = [(i * bs, (i + 1) * bs if i < n_batches - 1 else ns) for i in range(n_batches)]
        epoch_parts = []
        for bi, (lo, hi) in enumerate(bounds):
            idx = order[lo:hi]
            tb = min(hi - lo, nt)
            if t_pos + tb > nt:
                target_order = target_rng.permutation(nt)
                t_pos = 0
            tidx = target_order[t_pos:t_pos + tb]
            t_pos += tb
            tape = Tape()
            v = {k: tape.param(p, name=k) for k, p in model.params.items()}
            total, parts = trainer.step_loss(tape, v, sources.X[idx], sources.y[idx], sources.u[idx],
                                             target.X[tidx], target.u[tidx])
            _finite_or_raise(parts["l_total"], epoch, bi)
            grads = backward(tape, total, [v[k] for k in names])
            for g in grads:
                if not np.isfinite(g).all():
                    raise TrainingError("non-finite gradient", epoch, bi)
            sgd_momentum_step(model.params, dict(zip(names, grads)), trainer.opt)
            w_hist.append(parts.pop("weights"))
            pop_hist.append(parts.pop("populated"))
            lb = LossBreakdown(**parts)
            steps.append(lb)
            epoch_parts.append(lb)
        history.append(LossBreakdown(**{k: float(np.mean([getattr(p, k) for p in epoch_parts]))
                                        for k in LossBreakdown.__dataclass_fields__}))
    return TrainResult(model, history, steps, q_hist, w_hist, pop_hist)


CHECKPOINT_VERSION = 1


def checkpoint_dict(model: SigModel, cfg: TrainConfig) -> dict:
    """JSON-ready container; floats survive a round trip exactly (shortest repr)."""
    def pack(arrays):
        return {k: {"shape": list(a.shape), "data": a.ravel().tolist()} for k, a in sorted(arrays.items())}

    return {"format": "siglab-checkpoint", "version": CHECKPOINT_VERSION, "architecture": model.arch.to_dict(),
            "train_config": asdict(cfg), "seed": cfg.seed, "params": pack(model.params),
            "buffers": pack(model.buffers)}


def model_from_checkpoint(d: dict) -> tuple[SigModel, TrainConfig]:
    if d.get("format") != "siglab-checkpoint":
        raise ContractError("not a model checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {d.get('version')}")

    def unpack(blob):
        return {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in blob.items()}

    model = SigModel(Architecture.from_dict(d["architecture"]), unpack(d["params"]), unpack(d["buffers"]))
    return model, TrainConfig.from_dict(d["train_config"])


def save_checkpoint(path, model: SigModel, cfg: TrainConfig) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(checkpoint_dict(model, cfg)) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[SigModel, TrainConfig]:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: malformed checkpoint ({exc})") from exc
    return model_from_checkpoint(d)
