"""Synthetic multi-domain data with known latents.

Two processes are provided. The simple one draws a domain-specific block
``z_s`` from a per-domain Gaussian mixture and a domain-invariant block ``z_c``
from N(0, I), labels each row by a fixed hyperplane on ``z_c`` and pushes
``[z_s | z_c]`` through an invertible Tanh network. The full one draws a label
from a per-domain prior and four latent blocks whose means depend on the
domain, the label, both, or neither.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, GenerationError, ParseError
from .numkit import Rng

GENERATOR_VERSION = 1
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
MEAN_RANGE = (-4.0, 4.0)
STD_RANGE = (0.5, 1.5)
MIN_SINGULAR = 0.1
MAX_REJECTIONS = 100
CALIBRATION_DRAWS = 100_000

# stream ids under master_seed
_S_DOMAIN, _S_LABELER, _S_MIXING, _S_LATENT, _S_SPLIT, _S_CLASS = 1, 2, 3, 4, 5, 6


@dataclass(frozen=True)
class SimpleGenSpec:
    num_domains: int = 8
    dim_zs: int = 2
    dim_zc: int = 2
    samples_per_domain: int = 1000
    master_seed: int = 0
    mixing_depth: int = 2
    components_per_domain: int = 1
    standardize: bool = True

    def __post_init__(self):
        if self.num_domains < 2:
            raise ContractError(f"num_domains must be >= 2, got {self.num_domains}")
        if self.dim_zs < 1 or self.dim_zc < 1:
            raise ContractError("dim_zs and dim_zc must be >= 1")
        if self.samples_per_domain < 3:
            raise ContractError("samples_per_domain must be >= 3 so every split is populated")
        if self.mixing_depth < 0 or self.components_per_domain < 1:
            raise ContractError("mixing_depth must be >= 0 and components_per_domain >= 1")

    @property
    def dim(self) -> int:
        return self.dim_zs + self.dim_zc


@dataclass(frozen=True)
class FullGenSpec:
    """Four-block process. ``label_priors`` is one simplex row per domain (uniform if omitted)."""

    dims: tuple[int, int, int, int] = (2, 2, 2, 2)
    num_domains: int = 8
    num_classes: int = 2
    samples_per_domain: int = 1000
    master_seed: int = 0
    mixing_depth: int = 2
    label_priors: tuple[tuple[float, ...], ...] | None = None
    standardize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 4 or min(self.dims) < 0 or self.dims[1] + self.dims[2] < 1:
            raise ContractError(f"dims must be four non-negative counts with n2 + n3 >= 1, got {self.dims}")
        if self.num_domains < 2 or self.num_classes < 2:
            raise ContractError("need at least 2 domains and 2 classes")
        if self.samples_per_domain < 3:
            raise ContractError("samples_per_domain must be >= 3 so every split is populated")
        if self.label_priors is not None:
            pri = np.asarray(self.label_priors, dtype=float)
            if pri.shape != (self.num_domains, self.num_classes):
                raise ContractError(f"label_priors must be {self.num_domains}x{self.num_classes}")
            if (pri < 0).any() or not np.allclose(pri.sum(axis=1), 1.0, atol=1e-12):
                raise ContractError("each label prior must lie on the simplex")
            object.__setattr__(self, "label_priors", tuple(tuple(float(v) for v in row) for row in pri))

    @property
    def dim(self) -> int:
        return sum(self.dims)

    def priors(self) -> np.ndarray:
        if self.label_priors is None:
            return np.full((self.num_domains, self.num_classes), 1.0 / self.num_classes)
        return np.asarray(self.label_priors, dtype=float)


def with_target_shift(spec: FullGenSpec, target: int, target_prior) -> FullGenSpec:
    """Uniform source priors and ``target_prior`` on domain ``target``."""
    pri = np.full((spec.num_domains, spec.num_classes), 1.0 / spec.num_classes)
    pri[target] = np.asarray(target_prior, dtype=float)
    return FullGenSpec(spec.dims, spec.num_domains, spec.num_classes, spec.samples_per_domain,
                       spec.master_seed, spec.mixing_depth, tuple(map(tuple, pri)), spec.standardize)


def pooled_moments(means: np.ndarray, stds: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std of a Gaussian mixture; ``means``/``stds`` are (..., d), ``weights`` (...,) summing to 1."""
    w = weights[..., None]
    lead = tuple(range(means.ndim - 1))
    mean = (w * means).sum(axis=lead)
    second = (w * (stds**2 + means**2)).sum(axis=lead)
    return mean, np.sqrt(np.maximum(second - mean**2, 0.0))


@dataclass
class DomainParams:
    means: np.ndarray  # (U, K, d)
    stds: np.ndarray  # (U, K, d)
    weights: np.ndarray  # (U, K)

    def standardized(self) -> "DomainParams":
        """The same mixture after the affine map giving zero mean, unit variance pooled over domains."""
        mean, std = pooled_moments(self.means, self.stds, self.weights / self.weights.shape[0])
        return DomainParams((self.means - mean) / std, self.stds / std, self.weights)

    def sample(self, domain: int, n: int, rng: Rng) -> np.ndarray:
        comp = rng.choice(self.weights.shape[1], size=n, p=self.weights[domain])
        eps = rng.normal(size=(n, self.means.shape[2]))
        return self.means[domain, comp] + self.stds[domain, comp] * eps


@dataclass
class MixingNet:
    """``x = tanh(... tanh(z W_1) ...) W_depth``; no bias, identity after the last layer."""

    weights: list[np.ndarray]
    min_singular_values: list[float]

    @property
    def depth(self) -> int:
        return len(self.weights)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        h = np.asarray(z, dtype=np.float64)
        for i, w in enumerate(self.weights):
            h = h @ w
            if i < len(self.weights) - 1:
                h = np.tanh(h)
        return h

    def certified(self, threshold: float = MIN_SINGULAR) -> bool:
        return all(s >= threshold for s in self.min_singular_values)


@dataclass
class Labeler:
    direction: np.ndarray
    threshold: float

    def __call__(self, z_c: np.ndarray) -> np.ndarray:
        return assign_labels(z_c, self)


@dataclass
class SyntheticDataset:
    X: np.ndarray
    y: np.ndarray
    u: np.ndarray
    split: np.ndarray
    Z_true: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.u = np.asarray(self.u, dtype=np.int64)
        self.split = np.asarray(self.split, dtype="<U5")
        n = self.X.shape[0]
        if not (len(self.y) == len(self.u) == len(self.split) == n):
            raise ContractError("X, y, u and split must have the same number of rows")
        if self.Z_true is not None:
            self.Z_true = np.asarray(self.Z_true, dtype=np.float64)
            if self.Z_true.shape[0] != n:
                raise ContractError("Z_true must be row-aligned with X")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def num_domains(self) -> int:
        return int(self.meta.get("num_domains", self.u.max() + 1))

    @property
    def num_classes(self) -> int:
        return int(self.meta.get("num_classes", self.y.max() + 1))

    def mask(self, domains=None, split: str | None = None) -> np.ndarray:
        m = np.ones(len(self), dtype=bool)
        if domains is not None:
            m &= np.isin(self.u, np.atleast_1d(domains))
        if split is not None:
            m &= self.split == split
        return m

    def view(self, domains=None, split: str | None = None) -> "SyntheticDataset":
        m = self.mask(domains, split)
        return SyntheticDataset(self.X[m], self.y[m], self.u[m], self.split[m],
                                None if self.Z_true is None else self.Z_true[m], dict(self.meta))

    def latent_slice(self, block: str) -> slice:
        """Column range of a named ground-truth block (``zs``, ``zc``, ``z1`` .. ``z4``)."""
        return slice(*self.meta["blocks"][block])

    def equals(self, other: "SyntheticDataset") -> bool:
        same_z = (self.Z_true is None and other.Z_true is None) or (
            self.Z_true is not None and other.Z_true is not None and np.array_equal(self.Z_true, other.Z_true))
        return (np.array_equal(self.X, other.X) and np.array_equal(self.y, other.y)
                and np.array_equal(self.u, other.u) and np.array_equal(self.split, other.split)
                and same_z and self.meta == other.meta)


# -- generation ---------------------------------------------------------------


def build_domain_params(spec: SimpleGenSpec) -> DomainParams:
    rng = Rng(spec.master_seed, _S_DOMAIN)
    shape = (spec.num_domains, spec.components_per_domain, spec.dim_zs)
    means = rng.uniform(*MEAN_RANGE, size=shape)
    stds = rng.uniform(*STD_RANGE, size=shape)
    weights = np.full(shape[:2], 1.0 / spec.components_per_domain)
    return DomainParams(means, stds, weights)


def build_mixing(n: int, depth: int, rng: Rng, threshold: float = MIN_SINGULAR) -> MixingNet:
    """Square Gaussian layers, each resampled until its smallest singular value clears ``threshold``."""
    if n < 1:
        raise ContractError("mixing dimension must be >= 1")
    weights, certs = [], []
    for _ in range(depth):
        for _attempt in range(MAX_REJECTIONS):
            w = rng.normal(0.0, 1.0 / math.sqrt(n), size=(n, n))
            smin = float(np.linalg.svd(w, compute_uv=False).min())
            if smin >= threshold:
                break
        else:
            raise GenerationError(f"no layer with min singular value >= {threshold} after {MAX_REJECTIONS} draws")
        weights.append(w)
        certs.append(smin)
    return MixingNet(weights, certs)


def build_labeler(dim_zc: int, master_seed: int) -> Labeler:
    """Random unit hyperplane normal, thresholded at the median of a N(0, I) calibration draw."""
    rng = Rng(master_seed, _S_LABELER)
    w = rng.normal(size=dim_zc)
    w /= np.linalg.norm(w)
    calib = rng.normal(size=(CALIBRATION_DRAWS, dim_zc)) @ w
    return Labeler(w, float(np.median(calib)))


def assign_labels(z_c: np.ndarray, labeler: Labeler) -> np.ndarray:
    return (np.asarray(z_c) @ labeler.direction > labeler.threshold).astype(np.int64)


def _split_tags(n: int, rng: Rng) -> np.ndarray:
    n_val = max(1, round(SPLIT_FRACTIONS[1] * n))
    n_test = max(1, round(SPLIT_FRACTIONS[2] * n))
    tags = np.array(["train"] * (n - n_val - n_test) + ["val"] * n_val + ["test"] * n_test, dtype="<U5")
    return tags[rng.permutation(n)]


def sample_simple(spec: SimpleGenSpec) -> SyntheticDataset:
    params = build_domain_params(spec)
    if spec.standardize:
        params = params.standardized()
    labeler = build_labeler(spec.dim_zc, spec.master_seed)
    mixing = build_mixing(spec.dim, spec.mixing_depth, Rng(spec.master_seed, _S_MIXING))
    lat_rng = Rng(spec.master_seed, _S_LATENT)
    split_rng = Rng(spec.master_seed, _S_SPLIT)
    zs, zc, us, tags = [], [], [], []
    for d in range(spec.num_domains):
        n = spec.samples_per_domain
        zs.append(params.sample(d, n, lat_rng))
        zc.append(lat_rng.normal(size=(n, spec.dim_zc)))
        us.append(np.full(n, d))
        tags.append(_split_tags(n, split_rng))
    z_s, z_c = np.vstack(zs), np.vstack(zc)
    Z = np.hstack([z_s, z_c])
    meta = {
        "generator": "simple", "version": GENERATOR_VERSION, "seed": spec.master_seed,
        "num_domains": spec.num_domains, "num_classes": 2,
        "dims": {"n_s": spec.dim_zs, "n_c": spec.dim_zc},
        "blocks": {"zs": [0, spec.dim_zs], "zc": [spec.dim_zs, spec.dim]},
        "mixing_depth": spec.mixing_depth, "standardized": spec.standardize,
    }
    return SyntheticDataset(mixing(Z), assign_labels(z_c, labeler), np.concatenate(us),
                            np.concatenate(tags), Z, meta)


@dataclass
class FullParams:
    z1_means: np.ndarray  # (U, n1)
    z1_stds: np.ndarray
    z2_domain: np.ndarray  # (U, n2) additive domain term
    z2_class: np.ndarray  # (C, n2) additive class term
    z2_stds: np.ndarray  # (U, n2)
    z3_means: np.ndarray  # (C, n3)
    z3_stds: np.ndarray  # (C, n3)


def build_full_params(spec: FullGenSpec) -> FullParams:
    rng = Rng(spec.master_seed, _S_CLASS)
    n1, n2, n3, _ = spec.dims
    U, C = spec.num_domains, spec.num_classes
    # z2's mean is the sum of two terms, each drawn at half range so the sum stays in MEAN_RANGE
    lo, hi = MEAN_RANGE
    return FullParams(
        z1_means=rng.uniform(lo, hi, size=(U, n1)), z1_stds=rng.uniform(*STD_RANGE, size=(U, n1)),
        z2_domain=rng.uniform(lo / 2, hi / 2, size=(U, n2)), z2_class=rng.uniform(lo / 2, hi / 2, size=(C, n2)),
        z2_stds=rng.uniform(*STD_RANGE, size=(U, n2)),
        z3_means=rng.uniform(lo, hi, size=(C, n3)), z3_stds=rng.uniform(*STD_RANGE, size=(C, n3)),
    )


def full_standardizer(params: FullParams, dims) -> tuple[np.ndarray, np.ndarray]:
    """Per-column pooled mean and std of ``[z1|z2|z3|z4]`` with equal domain and class weights.

    Using uniform label weights keeps the map identical whatever label priors a
    run imposes, so shifting one domain's prior leaves the other domains untouched.
    """
    n1, n2, n3, n4 = dims
    U, C = params.z1_means.shape[0], params.z3_means.shape[0]
    m1, s1 = pooled_moments(params.z1_means, params.z1_stds, np.full(U, 1.0 / U))
    m2, s2 = pooled_moments(params.z2_domain[:, None, :] + params.z2_class[None, :, :],
                            np.repeat(params.z2_stds[:, None, :], C, axis=1), np.full((U, C), 1.0 / (U * C)))
    m3, s3 = pooled_moments(params.z3_means, params.z3_stds, np.full(C, 1.0 / C))
    mean = np.concatenate([m1, m2, m3, np.zeros(n4)])
    std = np.concatenate([s1, s2, s3, np.ones(n4)])
    return mean, np.where(std > 0, std, 1.0)


def sample_full(spec: FullGenSpec) -> SyntheticDataset:
    params = build_full_params(spec)
    mixing = build_mixing(spec.dim, spec.mixing_depth, Rng(spec.master_seed, _S_MIXING))
    priors = spec.priors()
    lat_rng = Rng(spec.master_seed, _S_LATENT)
    split_rng = Rng(spec.master_seed, _S_SPLIT)
    n1, n2, n3, n4 = spec.dims
    blocks, ys, us, tags = [], [], [], []
    for d in range(spec.num_domains):
        n = spec.samples_per_domain
        y = lat_rng.choice(spec.num_classes, size=n, p=priors[d])
        z1 = params.z1_means[d] + params.z1_stds[d] * lat_rng.normal(size=(n, n1))
        z2 = params.z2_domain[d] + params.z2_class[y] + params.z2_stds[d] * lat_rng.normal(size=(n, n2))
        z3 = params.z3_means[y] + params.z3_stds[y] * lat_rng.normal(size=(n, n3))
        z4 = lat_rng.normal(size=(n, n4))
        blocks.append(np.hstack([z1, z2, z3, z4]))
        ys.append(y)
        us.append(np.full(n, d))
        tags.append(_split_tags(n, split_rng))
    Z = np.vstack(blocks)
    if spec.standardize:
        shift, scale = full_standardizer(params, spec.dims)
        Z = (Z - shift) / scale
    edges = np.cumsum([0, n1, n2, n3, n4]).tolist()
    meta = {
        "generator": "full", "version": GENERATOR_VERSION, "seed": spec.master_seed,
        "num_domains": spec.num_domains, "num_classes": spec.num_classes,
        "dims": {"n1": n1, "n2": n2, "n3": n3, "n4": n4},
        "blocks": {f"z{i + 1}": [edges[i], edges[i + 1]] for i in range(4)} | {"zs": [edges[0], edges[2]]},
        "mixing_depth": spec.mixing_depth, "standardized": spec.standardize,
        "label_priors": priors.tolist(),
    }
    return SyntheticDataset(mixing(Z), np.concatenate(ys), np.concatenate(us), np.concatenate(tags), Z, meta)


# -- serialization ------------------------------------------------------------


def dataset_paths(path) -> tuple[Path, Path, Path]:
    """``path`` is the common stem: ``<stem>.csv``, ``<stem>.latents.csv``, ``<stem>.meta.json``."""
    stem = str(path)
    if stem.endswith(".csv"):
        stem = stem[: -len(".csv")]
    return Path(stem + ".csv"), Path(stem + ".latents.csv"), Path(stem + ".meta.json")


def save_dataset(ds: SyntheticDataset, path) -> None:
    data_path, lat_path, meta_path = dataset_paths(path)
    data_path.parent.mkdir(parents=True, exist_ok=True)
    n_feat = ds.X.shape[1]
    with open(data_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(n_feat)] + ["y", "u", "split"])
        for i in range(len(ds)):
            w.writerow([repr(float(v)) for v in ds.X[i]] + [int(ds.y[i]), int(ds.u[i]), ds.split[i]])
    if ds.Z_true is not None:
        with open(lat_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"z{j}" for j in range(ds.Z_true.shape[1])])
            for row in ds.Z_true:
                w.writerow([repr(float(v)) for v in row])
    elif lat_path.exists():
        lat_path.unlink()
    meta = dict(ds.meta)
    meta.update(num_rows=len(ds), num_features=n_feat,
                num_latents=None if ds.Z_true is None else int(ds.Z_true.shape[1]))
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_rows(path: Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    """Header plus ``(line_number, fields)`` for every data row."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path.name}: empty file", 1) from None
        rows = [(reader.line_num, row) for row in reader]
    return header, rows


def load_dataset(path) -> SyntheticDataset:
    data_path, lat_path, meta_path = dataset_paths(path)
    meta: dict = {}
    # a bare feature file (no metadata) is accepted; its shape then comes from the header alone
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"{meta_path.name}: unreadable metadata ({exc})") from exc
    n_rows, n_feat = meta.pop("num_rows", None), meta.pop("num_features", None)
    n_lat = meta.pop("num_latents", None)

    header, rows = _read_rows(data_path)
    x_cols = [h for h in header if h.startswith("x")]
    if header[-3:] != ["y", "u", "split"] or header[: len(x_cols)] != [f"x{j}" for j in range(len(x_cols))]:
        raise ParseError(f"{data_path.name}: malformed header {header}", 1)
    if n_feat is not None and len(x_cols) != n_feat:
        raise ParseError(f"{data_path.name}: header has {len(x_cols)} feature columns, metadata says {n_feat}", 1)
    width = len(header)
    X = np.empty((len(rows), len(x_cols)))
    y = np.empty(len(rows), dtype=np.int64)
    u = np.empty(len(rows), dtype=np.int64)
    split = []
    for k, (line, row) in enumerate(rows):
        if len(row) != width:
            raise ParseError(f"{data_path.name}: expected {width} fields, found {len(row)}", line)
        try:
            X[k] = [float(v) for v in row[: len(x_cols)]]
            y[k], u[k] = int(row[-3]), int(row[-2])
        except ValueError as exc:
            raise ParseError(f"{data_path.name}: {exc}", line) from exc
        if row[-1] not in SPLITS:
            raise ParseError(f"{data_path.name}: unknown split {row[-1]!r}", line)
        split.append(row[-1])
    if n_rows is not None and len(rows) != n_rows:
        last = rows[-1][0] if rows else 1
        raise ParseError(f"{data_path.name}: {len(rows)} data rows, metadata says {n_rows}; "
                         f"file ends after row {len(rows)}", last)

    Z = None
    if n_lat is not None:
        if not lat_path.exists():
            raise ParseError(f"{lat_path.name}: missing latent file")
        lh, lrows = _read_rows(lat_path)
        if lh != [f"z{j}" for j in range(n_lat)]:
            raise ParseError(f"{lat_path.name}: header does not match {n_lat} latent columns", 1)
        Z = np.empty((len(lrows), n_lat))
        for k, (line, row) in enumerate(lrows):
            if len(row) != n_lat:
                raise ParseError(f"{lat_path.name}: expected {n_lat} fields, found {len(row)}", line)
            try:
                Z[k] = [float(v) for v in row]
            except ValueError as exc:
                raise ParseError(f"{lat_path.name}: {exc}", line) from exc
        if len(lrows) != len(rows):
            last = lrows[-1][0] if lrows else 1
            raise ParseError(f"{lat_path.name}: {len(lrows)} rows, expected {len(rows)}", last)
    return SyntheticDataset(X, y, u, np.array(split, dtype="<U5"), Z, meta)


def spec_to_dict(spec) -> dict:
    return asdict(spec)
