"""``sig`` command line: generate, train, eval, sweep-domains, sweep-hparams, gradcheck, report."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from ..datagen import save_dataset
from ..errors import ContractError, SiglabError
from ..sigmodel import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, parse_int_list
from .gradients import run_all
from .report import comparison_markdown, load_rows, summarize, summary_markdown, write_summary_csv
from .runs import (HPARAM_HEADER, RESULTS_HEADER, ResultsWriter, build_dataset, check_run_limit,
                   domain_sweep_tasks, evaluate, execute, export_latents, hparam_sweep_tasks, train_on)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ContractError(f"expected comma-separated numbers, got {text!r}") from exc


def load_config(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    cfg = ExperimentConfig.load(args.config, overrides)
    updates = {}
    if getattr(args, "seeds", None):
        updates["seeds"] = parse_int_list(args.seeds)
    if getattr(args, "data", None):
        updates["dataset"] = args.data
    if getattr(args, "out", None):
        updates["output_dir"] = args.out
    if getattr(args, "u_values", None):
        updates["u_values"] = parse_int_list(args.u_values)
    if getattr(args, "alphas", None):
        updates["alpha_values"] = _float_list(args.alphas)
    if getattr(args, "betas", None):
        updates["beta_values"] = _float_list(args.betas)
    return ExperimentConfig.from_dict(cfg.to_dict() | updates) if updates else cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, cfg: ExperimentConfig) -> None:
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands -------------------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig, args) -> int:
    ds = build_dataset(cfg)  # validation happens here, before anything is written
    out = _out_dir(cfg)
    save_dataset(ds, out / "dataset")
    _write_config(out, cfg)
    print(f"wrote {len(ds)} rows x {ds.X.shape[1]} features to {out / 'dataset.csv'}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    ds = build_dataset(cfg)
    out = _out_dir(cfg)
    _write_config(out, cfg)
    for seed in cfg.seeds:
        run_dir = out if len(cfg.seeds) == 1 else out / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        res = train_on(cfg, ds, cfg.source_domains(), cfg.target_domain, seed)
        save_checkpoint(run_dir / "checkpoint.json", res.model, cfg.train_config(seed))
        with open(run_dir / "history.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "l_total", "l_y", "l_recon", "l_kl", "l_vae", "l_align", "q"])
            for e, (h, q) in enumerate(zip(res.history, res.q_history)):
                w.writerow([e, *(repr(getattr(h, k)) for k in ("l_total", "l_y", "l_recon", "l_kl", "l_vae",
                                                                  "l_align")),
                            ";".join(repr(float(v)) for v in q.q)])
        last = res.history[-1]
        print(f"seed {seed}: l_total={last.l_total:.6f} l_y={last.l_y:.6f} l_vae={last.l_vae:.6f} "
              f"l_align={last.l_align:.6f} -> {run_dir / 'checkpoint.json'}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    ds = build_dataset(cfg)
    model = None
    seed = cfg.seeds[0]
    if cfg.encoder == "model":
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint unless encoder=identity")
        model, tcfg = load_checkpoint(args.checkpoint)
        seed = tcfg.seed
        if model.arch.input_dim != ds.X.shape[1]:
            raise ContractError(f"checkpoint expects {model.arch.input_dim} features, dataset has {ds.X.shape[1]}")
    out = _out_dir(cfg)
    domains = cfg.source_domains() + [cfg.target_domain]
    report = evaluate(cfg, ds, model, domains, cfg.target_domain, seed)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "metrics.csv").write_text("acc,mcc,rmse,per_dim_corr,per_dim_rmse,q\n" + report.csv_row() + "\n",
                                     encoding="utf-8")
    export_latents(out, ds, model, cfg.encoder)

    def fmt(v):
        return "unavailable" if v is None else f"{v:.4f}"
    print(f"acc={fmt(report.acc)} mcc={fmt(report.mcc)} rmse={fmt(report.rmse)}")
    return EXIT_OK


def _n_s(cfg: ExperimentConfig) -> int:
    return cfg.dim_zs if cfg.generator == "simple" else cfg.full_dims[0] + cfg.full_dims[1]


def cmd_sweep_domains(cfg: ExperimentConfig, args) -> int:
    if any(not 2 <= u <= cfg.num_domains for u in cfg.u_values):
        raise ContractError(f"u values must lie in [2, {cfg.num_domains}]")
    tasks = domain_sweep_tasks(cfg)
    check_run_limit(len(tasks), args.override_run_limit)
    out = _out_dir(cfg)
    _write_config(out, cfg)
    writer = ResultsWriter(out / "results.csv", RESULTS_HEADER)
    _log(f"{len(tasks)} runs planned")
    execute(tasks, cfg, writer, _log)
    eid = tasks[0][1]
    rows = [r for r in load_rows(writer.path) if r["experiment_id"] == eid]
    summaries = summarize(rows)
    md = summary_markdown(summaries, _n_s(cfg))
    (out / "summary.md").write_text(md, encoding="utf-8")
    write_summary_csv(out / "summary.csv", summaries, _n_s(cfg))
    print(md, end="")
    return EXIT_OK


def cmd_sweep_hparams(cfg: ExperimentConfig, args) -> int:
    tasks = hparam_sweep_tasks(cfg)
    check_run_limit(len(tasks), args.override_run_limit)
    out = _out_dir(cfg)
    _write_config(out, cfg)
    writer = ResultsWriter(out / "hparams.csv", HPARAM_HEADER)
    _log(f"{len(tasks)} runs planned")
    execute(tasks, cfg, writer, _log)
    wanted = {t[1] for t in tasks}
    rows = [r for r in load_rows(writer.path) if r["experiment_id"] in wanted]
    lines = ["| alpha | beta | runs | ACC | MCC | RMSE |", "|---|---|---|---|---|---|"]
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["alpha"], r["beta"]), []).append(r)
    for (a, b), rs in groups.items():
        s = summarize([r | {"u_domains": "0"} for r in rs])[0]
        cells = [f"{m:.4f}({sd:.4f})" for m, sd in (s.acc, s.mcc, s.rmse)]
        lines.append(f"| {a} | {b} | {s.runs} | " + " | ".join(cells) + " |")
    md = "\n".join(lines) + "\n"
    (out / "hparams_summary.md").write_text(md, encoding="utf-8")
    print(md, end="")
    return EXIT_OK


def cmd_gradcheck(cfg: ExperimentConfig, args) -> int:
    checks = run_all(cfg.seeds[0])
    width = max(len(c.name) for c in checks)
    for c in checks:
        print(f"{c.name:<{width}}  max_rel_err={c.max_error:.3e}  tol={c.tol:.0e}  {'PASS' if c.ok else 'FAIL'}")
    return EXIT_OK if all(c.ok for c in checks) else EXIT_RUNTIME


def cmd_report(cfg: ExperimentConfig, args) -> int:
    rows = load_rows(Path(args.results))
    md = comparison_markdown(rows, _n_s(cfg))
    if args.out:
        _out_dir(cfg)
        (Path(cfg.output_dir) / "report.md").write_text(md, encoding="utf-8")
    print(md, end="")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "sweep-domains": cmd_sweep_domains,
    "sweep-hparams": cmd_sweep_hparams, "gradcheck": cmd_gradcheck, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sig", description="Multi-source adaptation lab with identifiability metrics.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out=True):
        p.add_argument("--config", help="JSON file with flat configuration keys")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key (repeatable)")
        p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
        if out:
            p.add_argument("--out", help="output directory")
        return p

    common(sub.add_parser("generate", help="write a synthetic dataset"))
    p = common(sub.add_parser("train", help="train a model and write a checkpoint"))
    p.add_argument("--data", help="dataset stem to load instead of generating")
    p = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="dataset stem to load instead of generating")
    for name, extra in (("sweep-domains", "--u-values"), ("sweep-hparams", None)):
        p = common(sub.add_parser(name, help=f"run the {name[6:]} sweep"))
        p.add_argument("--override-run-limit", action="store_true")
        p.add_argument("--data", help="dataset stem to load instead of generating")
        if extra:
            p.add_argument(extra, dest="u_values", help="comma-separated domain counts")
        else:
            p.add_argument("--alphas")
            p.add_argument("--betas")
    common(sub.add_parser("gradcheck", help="finite-difference gradient checks"), out=False)
    p = common(sub.add_parser("report", help="compare a results CSV against the reference table"))
    p.add_argument("results")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SiglabError, OSError, ArithmeticError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
