"""Single runs, evaluation, results files and the two sweeps."""

from __future__ import annotations

import csv
import itertools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..datagen import SyntheticDataset, load_dataset, sample_full, sample_simple
from ..errors import ContractError, MetricError
from ..identmetrics import MetricsReport, accuracy, matched_correlations, probe_rmse_per_dim
from ..sigmodel import DomainData, SigModel, TrainResult, infer_latents, predict_target, train_fit
from .config import ExperimentConfig

RESULTS_HEADER = ["experiment_id", "u_domains", "source_combination", "seed", "target_domain", "acc", "mcc",
                  "rmse", "l_total", "l_y", "l_vae", "l_align", "wall_time_s"]
HPARAM_HEADER = RESULTS_HEADER + ["alpha", "beta"]
RUN_LIMIT = 200


class RunLimitError(ContractError):
    pass


def build_dataset(cfg: ExperimentConfig) -> SyntheticDataset:
    if cfg.dataset:
        ds = load_dataset(cfg.dataset)
        if len(ds) and int(ds.u.max()) >= cfg.num_domains:
            raise ContractError(f"dataset has domain index {int(ds.u.max())}; set num_domains accordingly")
        return ds
    spec = cfg.gen_spec()
    return sample_simple(spec) if cfg.generator == "simple" else sample_full(spec)


def domain_data(ds: SyntheticDataset, domains, split: str, labelled: bool = True) -> DomainData:
    v = ds.view(domains, split)
    if len(v) == 0:
        raise ContractError(f"no {split} rows for domains {list(domains)}")
    return DomainData(v.X, v.u, v.y if labelled else None)


def num_classes_of(ds: SyntheticDataset) -> int:
    return int(ds.meta.get("num_classes", int(ds.y.max()) + 1))


def train_on(cfg: ExperimentConfig, ds: SyntheticDataset, sources, target: int, seed: int) -> TrainResult:
    arch = cfg.architecture(ds.X.shape[1], num_classes_of(ds))
    return train_fit(domain_data(ds, sources, "train"), domain_data(ds, [target], "train", labelled=False),
                     cfg.train_config(seed), arch, source_val=domain_data(ds, sources, "val"))


# -- evaluation -------------------------------------------------------------------


def estimated_latents(model: SigModel | None, X: np.ndarray, encoder: str) -> np.ndarray:
    if encoder == "identity":
        return np.asarray(X, dtype=np.float64)
    return infer_latents(model, X)


def changing_block(model: SigModel | None, width: int, encoder: str, zs_cols) -> slice:
    """Columns of the estimated latent that play the role of the domain-specific block."""
    if encoder == "identity":
        return slice(*zs_cols)
    dims = model.arch.dims
    return slice(0, dims.n1 + dims.n2)


def evaluate(cfg: ExperimentConfig, ds: SyntheticDataset, model: SigModel | None, domains, target: int,
             seed: int, q=None, loss_tail: dict | None = None) -> MetricsReport:
    """ACC on the target test split; MCC and probe RMSE on test latents of ``domains``, probe fitted on validation."""
    acc = None
    if model is not None:
        te = ds.view([target], "test")
        if len(te):
            pred, _ = predict_target(model, te.X, target)
            acc = accuracy(pred, te.y)
    report = MetricsReport(acc=acc, q=[] if q is None else [float(v) for v in q], loss_tail=loss_tail or {})
    zs_cols = ds.meta.get("blocks", {}).get("zs")
    if ds.Z_true is None or zs_cols is None:
        return report
    val, test = ds.view(domains, "val"), ds.view(domains, "test")
    E_val = estimated_latents(model, val.X, cfg.encoder)
    E_test = estimated_latents(model, test.X, cfg.encoder)
    blk = changing_block(model, E_val.shape[1], cfg.encoder, zs_cols)
    T_val, T_test = val.Z_true[:, slice(*zs_cols)], test.Z_true[:, slice(*zs_cols)]
    E_val, E_test = E_val[:, blk], E_test[:, blk]
    if E_test.shape[1] != T_test.shape[1]:
        raise ContractError(f"estimated changing block has {E_test.shape[1]} columns, "
                            f"true domain-specific block has {T_test.shape[1]}")
    corr, _ = matched_correlations(T_test, E_test, cfg.correlation)
    per_rmse = probe_rmse_per_dim(E_val, T_val, E_test, T_test, cfg.probe_config(seed))
    report.mcc = float(corr.mean())
    report.rmse = float(per_rmse.mean())
    report.per_dim_corr = [float(c) for c in corr]
    report.per_dim_rmse = [float(r) for r in per_rmse]
    return report


def export_latents(path_dir: Path, ds: SyntheticDataset, model: SigModel | None, encoder: str) -> list[Path]:
    """``latents_<split>.csv``: domain, label, true latents and estimated latents side by side."""
    written = []
    for split in ("train", "val", "test"):
        v = ds.view(None, split)
        if not len(v):
            continue
        E = estimated_latents(model, v.X, encoder)
        path = path_dir / f"latents_{split}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            true_cols = [] if v.Z_true is None else [f"true_z{j}" for j in range(v.Z_true.shape[1])]
            w.writerow(["u", "y"] + true_cols + [f"est_z{j}" for j in range(E.shape[1])])
            for i in range(len(v)):
                true = [] if v.Z_true is None else [repr(float(x)) for x in v.Z_true[i]]
                w.writerow([int(v.u[i]), int(v.y[i])] + true + [repr(float(x)) for x in E[i]])
        written.append(path)
    return written


# -- run records --------------------------------------------------------------------


@dataclass
class RunRecord:
    experiment_id: str
    u_domains: int
    source_combination: str
    seed: int
    target_domain: int
    acc: float
    mcc: float | None
    rmse: float | None
    l_total: float
    l_y: float
    l_vae: float
    l_align: float
    wall_time_s: float
    q: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def key(self) -> tuple[str, str, int]:
        return (self.experiment_id, self.source_combination, int(self.seed))

    def csv_cells(self, header=RESULTS_HEADER) -> list[str]:
        d = asdict(self) | self.extra
        out = []
        for k in header:
            v = d[k]
            if v is None:
                out.append("NA")
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(str(v))
        return out


def combo_label(sources) -> str:
    return "-".join(str(int(d)) for d in sorted(sources))


def run_one(cfg: ExperimentConfig, experiment_id: str, sources, seed: int,
            ds: SyntheticDataset | None = None) -> RunRecord:
    ds = ds if ds is not None else build_dataset(cfg)
    target = cfg.target_domain
    t0 = time.perf_counter()
    res = train_on(cfg, ds, sources, target, seed)
    last = res.history[-1]
    report = evaluate(cfg, ds, res.model, list(sources) + [target], target, seed, q=res.q.q if res.q else None)
    wall = time.perf_counter() - t0
    for name in ("acc", "mcc", "rmse"):
        v = getattr(report, name)
        if v is not None and not math.isfinite(v):
            raise MetricError(f"{name} is not finite")
    return RunRecord(experiment_id, len(sources) + 1, combo_label(sources), int(seed), target, report.acc,
                     report.mcc, report.rmse, last.l_total, last.l_y, last.l_vae, last.l_align, round(wall, 3),
                     list(report.q))


def _run_task(args) -> RunRecord:
    cfg_dict, experiment_id, sources, seed = args
    return run_one(ExperimentConfig.from_dict(cfg_dict), experiment_id, sources, seed)


# -- results files --------------------------------------------------------------------


def read_results(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def completed_keys(path: Path) -> set[tuple[str, str, int]]:
    return {(r["experiment_id"], r["source_combination"], int(r["seed"])) for r in read_results(path)}


class ResultsWriter:
    """Append-only CSV writer (header written once) plus a JSON-lines sidecar with the full records."""

    def __init__(self, path: Path, header=RESULTS_HEADER):
        self.path = Path(path)
        self.header = header
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh, lineterminator="\n").writerow(header)
        else:
            with open(self.path, newline="", encoding="utf-8") as fh:
                existing = next(csv.reader(fh), None)
            if existing != list(header):
                raise ContractError(f"{self.path}: existing header does not match the results schema")
        self.jsonl = self.path.with_suffix(".jsonl")

    def append(self, rec: RunRecord) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(rec.csv_cells(self.header))
        with open(self.jsonl, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


def execute(tasks: list[tuple], cfg: ExperimentConfig, writer: ResultsWriter, log=print) -> list[RunRecord]:
    """Run ``(cfg_dict, experiment_id, sources, seed[, extra])`` tasks in order, skipping completed keys."""
    done = completed_keys(writer.path)
    pending = [t for t in tasks if (t[1], combo_label(t[2]), int(t[3])) not in done]
    if len(tasks) != len(pending):
        log(f"resuming: {len(tasks) - len(pending)} of {len(tasks)} runs already recorded")
    records = []
    extras = [t[4] if len(t) > 4 else {} for t in pending]
    if cfg.workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            # map preserves submission order, so the file order does not depend on scheduling
            for rec, extra in zip(pool.map(_run_task, [t[:4] for t in pending]), extras):
                rec.extra = extra
                writer.append(rec)
                records.append(rec)
                log(_progress(rec))
    else:
        cache: dict[str, SyntheticDataset] = {}
        for t, extra in zip(pending, extras):
            c = ExperimentConfig.from_dict(t[0])
            key = f"{c.dataset}|{c.gen_spec()!r}"
            if key not in cache:
                cache[key] = build_dataset(c)
            ds = cache[key]
            rec = run_one(c, t[1], t[2], t[3], ds)
            rec.extra = extra
            writer.append(rec)
            records.append(rec)
            log(_progress(rec))
    return records


def _progress(rec: RunRecord) -> str:
    def f(v):
        return "NA" if v is None else f"{v:.4f}"
    return (f"u={rec.u_domains} sources={rec.source_combination} seed={rec.seed}: acc={f(rec.acc)} "
            f"mcc={f(rec.mcc)} rmse={f(rec.rmse)} ({rec.wall_time_s:.1f}s)")


# -- sweeps ----------------------------------------------------------------------------


def source_combinations(num_domains: int, target: int, u: int, cap: int | None = None) -> list[tuple[int, ...]]:
    """All size-(u-1) source subsets of the non-target domains, lexicographic.

    ``cap`` keeps that many evenly spaced subsets (always including the first and last).
    """
    if not 2 <= u <= num_domains:
        raise ContractError(f"u must lie in [2, {num_domains}], got {u}")
    others = [d for d in range(num_domains) if d != target]
    combos = list(itertools.combinations(others, u - 1))
    if cap is not None and len(combos) > cap:
        idx = sorted(set(np.linspace(0, len(combos) - 1, cap).round().astype(int).tolist()))
        combos = [combos[i] for i in idx]
    return combos


def domain_sweep_tasks(cfg: ExperimentConfig) -> list[tuple]:
    eid = f"{cfg.experiment}-{cfg.identity_hash()}"
    base = cfg.to_dict()
    tasks = []
    for u in sorted(set(cfg.u_values), reverse=True):
        for combo in source_combinations(cfg.num_domains, cfg.target_domain, u, cfg.max_combinations):
            for seed in cfg.seeds:
                tasks.append((base, eid, combo, int(seed)))
    return tasks


def hparam_sweep_tasks(cfg: ExperimentConfig) -> list[tuple]:
    if not cfg.alpha_values or not cfg.beta_values:
        raise ContractError("alpha_values and beta_values must be non-empty")
    sources = tuple(cfg.source_domains())
    tasks = []
    for a in cfg.alpha_values:
        for b in cfg.beta_values:
            point = cfg.with_updates(alpha=float(a), beta=float(b))
            eid = f"{cfg.experiment}-{point.identity_hash()}"
            for seed in cfg.seeds:
                tasks.append((point.to_dict(), eid, sources, int(seed), {"alpha": float(a), "beta": float(b)}))
    return tasks


def check_run_limit(n_runs: int, override: bool) -> None:
    if n_runs > RUN_LIMIT and not override:
        raise RunLimitError(f"{n_runs} runs requested, more than the limit of {RUN_LIMIT}; "
                            f"lower the combination cap or pass --override-run-limit")
