"""Flat experiment configuration: JSON file plus ``key=value`` overrides."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..datagen import FullGenSpec, SimpleGenSpec, with_target_shift
from ..errors import ContractError
from ..identmetrics import ProbeConfig
from ..sigmodel import Architecture, PartitionDims, TrainConfig

# default sensitivity grids
DEFAULT_ALPHAS = [0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3]
DEFAULT_BETAS = [1e-5, 1e-4, 1e-3]

# keys that choose which runs happen or where output goes, not what a run computes
_NON_IDENTITY_KEYS = {"seeds", "u_values", "output_dir", "workers", "max_combinations", "alpha_values",
                      "beta_values", "experiment", "dataset"}


@dataclass
class ExperimentConfig:
    experiment: str = "sig"
    generator: str = "simple"
    dataset: str | None = None

    # generation
    num_domains: int = 8
    dim_zs: int = 2
    dim_zc: int = 2
    samples_per_domain: int = 1000
    master_seed: int = 0
    mixing_depth: int = 2
    components_per_domain: int = 1
    standardize: bool = True
    full_dims: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    num_classes: int = 2
    target_prior: list[float] | None = None

    # model
    latent_dims: list[int] | None = None
    enc_hidden: list[int] = field(default_factory=lambda: [200])
    dec_hidden: list[int] = field(default_factory=lambda: [200])
    cls_hidden: list[int] = field(default_factory=lambda: [64])
    embed_dim: int = 4
    dropout: float = 0.1
    prior: str = "domain"
    decoder_var: str = "learned"

    # training
    lr: float = 0.0035
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 768
    alpha: float = 1e-5
    beta: float = 0.1
    kl_weight: float = 1.0
    align_block: str = "z3"
    centroid_decay: float = 0.9
    mcc_confusion_enabled: bool = False

    # evaluation
    probe_hidden: int = 64
    probe_layers: int = 2
    probe_lr: float = 0.01
    probe_momentum: float = 0.9
    probe_epochs: int = 200
    probe_batch_size: int = 64
    correlation: str = "pearson"
    encoder: str = "model"

    # orchestration
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    target_domain: int = 0
    sources: list[int] | None = None
    output_dir: str = "runs"
    u_values: list[int] = field(default_factory=lambda: [2, 3, 4, 5, 6, 8])
    max_combinations: int | None = None
    alpha_values: list[float] = field(default_factory=lambda: list(DEFAULT_ALPHAS))
    beta_values: list[float] = field(default_factory=lambda: list(DEFAULT_BETAS))
    workers: int = 1

    def __post_init__(self):
        if self.generator not in ("simple", "full"):
            raise ContractError(f"generator must be 'simple' or 'full', got {self.generator!r}")
        if not self.seeds:
            raise ContractError("seeds must be non-empty")
        if not 0 <= self.target_domain < self.num_domains:
            raise ContractError(f"target_domain must lie in [0, {self.num_domains})")
        if self.encoder not in ("model", "identity"):
            raise ContractError("encoder must be 'model' or 'identity'")
        if self.max_combinations is not None and self.max_combinations < 1:
            raise ContractError("max_combinations must be >= 1")
        if self.workers < 1:
            raise ContractError("workers must be >= 1")
        if self.sources is not None:
            bad = [d for d in self.sources if not 0 <= d < self.num_domains or d == self.target_domain]
            if bad or not self.sources:
                raise ContractError(f"sources must be non-target domains in [0, {self.num_domains}), got {self.sources}")
        # build the derived objects once so invalid values fail before any work starts
        self.gen_spec()
        self.train_config(0)
        self.probe_config(0)
        self.partition()

    # -- construction ----------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ContractError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path | None, overrides: list[str] = ()) -> "ExperimentConfig":
        d: dict = {}
        if path is not None:
            try:
                d = json.loads(Path(path).read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ContractError(f"{path}: invalid JSON ({exc})") from exc
            if not isinstance(d, dict):
                raise ContractError(f"{path}: top level must be an object")
        for item in overrides:
            key, value = parse_override(item)
            d[key] = value
        return cls.from_dict(d)

    def with_updates(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    def identity_hash(self) -> str:
        """Digest over everything that changes what a single run computes."""
        d = {k: v for k, v in self.to_dict().items() if k not in _NON_IDENTITY_KEYS}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:10]

    # -- derived objects ---------------------------------------------------------

    def gen_spec(self):
        if self.generator == "simple":
            return SimpleGenSpec(self.num_domains, self.dim_zs, self.dim_zc, self.samples_per_domain,
                                 self.master_seed, self.mixing_depth, self.components_per_domain, self.standardize)
        spec = FullGenSpec(tuple(self.full_dims), self.num_domains, self.num_classes, self.samples_per_domain,
                           self.master_seed, self.mixing_depth, None, self.standardize)
        if self.target_prior is not None:
            spec = with_target_shift(spec, self.target_domain, self.target_prior)
        return spec

    def partition(self) -> PartitionDims:
        if self.latent_dims is not None:
            return PartitionDims(*self.latent_dims)
        if self.generator == "simple":
            # z_s carries no label information, so it sits in the label-irrelevant changing block
            return PartitionDims(self.dim_zs, 0, self.dim_zc, 0)
        return PartitionDims(*self.full_dims)

    def architecture(self, input_dim: int, num_classes: int) -> Architecture:
        return Architecture(input_dim=input_dim, num_domains=self.num_domains, num_classes=num_classes,
                            dims=self.partition(), enc_hidden=tuple(self.enc_hidden),
                            dec_hidden=tuple(self.dec_hidden), cls_hidden=tuple(self.cls_hidden),
                            embed_dim=self.embed_dim, dropout=self.dropout, prior=self.prior,
                            decoder_var=self.decoder_var)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, momentum=self.momentum, epochs=self.epochs, batch_size=self.batch_size,
                           alpha=self.alpha, beta=self.beta, kl_weight=self.kl_weight, seed=seed,
                           align_block=self.align_block, centroid_decay=self.centroid_decay,
                           mcc_confusion_enabled=self.mcc_confusion_enabled)

    def probe_config(self, seed: int) -> ProbeConfig:
        return ProbeConfig(hidden=self.probe_hidden, layers=self.probe_layers, lr=self.probe_lr,
                           momentum=self.probe_momentum, epochs=self.probe_epochs,
                           batch_size=self.probe_batch_size, seed=seed)

    def source_domains(self) -> list[int]:
        if self.sources is not None:
            return sorted(self.sources)
        return [d for d in range(self.num_domains) if d != self.target_domain]


def parse_override(item: str) -> tuple[str, object]:
    """``key=value``; the value is read as JSON when possible, else kept as a string."""
    key, sep, raw = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ContractError(f"override must look like key=value, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def parse_int_list(text: str) -> list[int]:
    try:
        out = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ContractError(f"expected comma-separated integers, got {text!r}") from exc
    if not out:
        raise ContractError("empty integer list")
    return out
