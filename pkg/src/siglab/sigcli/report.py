"""Per-u summaries in the State/U/ACC/MCC/RMSE layout and the comparison against published values."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ContractError, ParseError

# published simulation results: U -> (ACC, MCC, RMSE) means
REFERENCE = {8: (0.9982, 0.9037, 0.0433), 2: (0.5978, 0.6184, 0.1272)}
MCC_BAND = 0.03


def identification_state(u: int, n_s: int = 2) -> str:
    if u >= 2 * n_s + 1:
        return "Component-wise Identification"
    if u >= n_s + 1:
        return "Subspace Identification"
    return "No Identification"


@dataclass
class Summary:
    u: int
    runs: int
    acc: tuple[float, float]
    mcc: tuple[float, float]
    rmse: tuple[float, float]


def _num(v: str) -> float:
    return math.nan if v in ("", "NA") else float(v)


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.array([v for v in values if not math.isnan(v)])
    if arr.size == 0:
        return math.nan, math.nan
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def summarize(rows: list[dict]) -> dict[int, Summary]:
    """Unweighted mean and sample std over every (combination, seed) run for each u."""
    by_u: dict[int, list[dict]] = {}
    for r in rows:
        by_u.setdefault(int(r["u_domains"]), []).append(r)
    return {u: Summary(u, len(rs), *(_mean_std([_num(r[k]) for r in rs]) for k in ("acc", "mcc", "rmse")))
            for u, rs in sorted(by_u.items(), reverse=True)}


def _fmt(ms: tuple[float, float]) -> str:
    m, s = ms
    return "NA" if math.isnan(m) else f"{m:.4f}({s:.4f})"


def summary_markdown(summaries: dict[int, Summary], n_s: int = 2) -> str:
    lines = ["| State | U | ACC | MCC | RMSE |", "|---|---|---|---|---|"]
    for u, s in summaries.items():
        lines.append(f"| {identification_state(u, n_s)} | {u} | {_fmt(s.acc)} | {_fmt(s.mcc)} | {_fmt(s.rmse)} |")
    return "\n".join(lines) + "\n"


def write_summary_csv(path: Path, summaries: dict[int, Summary], n_s: int = 2) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["state", "u", "runs", "acc_mean", "acc_std", "mcc_mean", "mcc_std", "rmse_mean", "rmse_std"])
        for u, s in summaries.items():
            w.writerow([identification_state(u, n_s), u, s.runs, *map(repr, s.acc), *map(repr, s.mcc),
                        *map(repr, s.rmse)])


def trend_flags(summaries: dict[int, Summary]) -> dict[str, bool | None]:
    """Pass/fail per trend criterion from measured means only; ``None`` when a needed U is missing."""
    def get(u, k):
        s = summaries.get(u)
        if s is None:
            return None
        v = getattr(s, k)[0]
        return None if math.isnan(v) else v

    def flag(cond, *vals):
        return None if any(v is None for v in vals) else bool(cond(*vals))

    acc8, mcc8, rmse8 = get(8, "acc"), get(8, "mcc"), get(8, "rmse")
    acc2, rmse2, rmse5 = get(2, "acc"), get(2, "rmse"), get(5, "rmse")
    flags = {
        "(a) ACC(U=8) >= 0.95": flag(lambda a: a >= 0.95, acc8),
        "(b) MCC(U=8) >= 0.75": flag(lambda m: m >= 0.75, mcc8),
        "(c) RMSE(U=8) <= 0.12": flag(lambda r: r <= 0.12, rmse8),
        "(d) RMSE(U=2) >= 1.5 x RMSE(U=5)": flag(lambda a, b: a >= 1.5 * b, rmse2, rmse5),
        "(e) ACC(U=8) - ACC(U=2) >= 0.10": flag(lambda a, b: a - b >= 0.10, acc8, acc2),
    }
    us = [u for u in sorted(summaries, reverse=True) if get(u, "mcc") is not None]
    if 8 in us and 2 in us:
        mccs = [get(u, "mcc") for u in us]
        flags["(f) MCC non-increasing as U drops (0.03 band)"] = all(
            later <= earlier + MCC_BAND for earlier, later in zip(mccs, mccs[1:]))
    else:
        flags["(f) MCC non-increasing as U drops (0.03 band)"] = None
    return flags


def load_rows(path: Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ContractError(f"{path}: no such results file")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        needed = {"u_domains", "acc", "mcc", "rmse"}
        if reader.fieldnames is None or not needed <= set(reader.fieldnames):
            raise ParseError(f"{path.name}: missing columns {sorted(needed - set(reader.fieldnames or []))}", 1)
        rows = list(reader)
    if not rows:
        raise ParseError(f"{path.name}: no result rows", 1)
    return rows


def comparison_markdown(rows: list[dict], n_s: int = 2) -> str:
    summaries = summarize(rows)
    out = ["## Measured", "", summary_markdown(summaries, n_s), "## Reference", "",
           "| U | ACC | MCC | RMSE |", "|---|---|---|---|"]
    for u, (a, m, r) in REFERENCE.items():
        out.append(f"| {u} | {a:.4f} | {m:.4f} | {r:.4f} |")
    out += ["", "## Side by side (means)", "", "| U | ACC measured | ACC ref | MCC measured | MCC ref | "
            "RMSE measured | RMSE ref |", "|---|---|---|---|---|---|---|"]
    for u, ref in REFERENCE.items():
        s = summaries.get(u)
        meas = [s.acc[0], s.mcc[0], s.rmse[0]] if s else [math.nan] * 3
        cells = [f"{'NA' if math.isnan(v) else f'{v:.4f}'} | {r:.4f}" for v, r in zip(meas, ref)]
        out.append(f"| {u} | " + " | ".join(cells) + " |")
    out += ["", "## Trend checks", "", "| criterion | result |", "|---|---|"]
    for name, ok in trend_flags(summaries).items():
        out.append(f"| {name} | {'n/a' if ok is None else ('PASS' if ok else 'FAIL')} |")
    return "\n".join(out) + "\n"
