import csv
import json
import math
from dataclasses import replace

import pytest

from siglab.datagen import load_dataset, save_dataset
from siglab.errors import ContractError, ParseError
from siglab.sigcli import main
from siglab.sigcli.config import ExperimentConfig, parse_int_list, parse_override
from siglab.sigcli.report import (REFERENCE, Summary, comparison_markdown, identification_state, load_rows,
                                  summarize, trend_flags)
from siglab.sigcli.runs import (HPARAM_HEADER, RESULTS_HEADER, RUN_LIMIT, ResultsWriter, completed_keys,
                                source_combinations)

SMALL = {"samples_per_domain": 60, "epochs": 2, "batch_size": 128, "enc_hidden": [16], "dec_hidden": [16],
         "cls_hidden": [8], "probe_epochs": 3, "probe_hidden": 8, "seeds": [0]}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- config ------------------------------------------------------------------------


def test_override_parsing():
    assert parse_override("alpha=0.5") == ("alpha", 0.5)
    assert parse_override("seeds=[1,2]") == ("seeds", [1, 2])
    assert parse_override("experiment=abc") == ("experiment", "abc")
    with pytest.raises(ContractError):
        parse_override("novalue")


def test_int_list():
    assert parse_int_list("0, 1,2") == [0, 1, 2]
    with pytest.raises(ContractError):
        parse_int_list("1,x")


def test_unknown_key_rejected():
    with pytest.raises(ContractError):
        ExperimentConfig.from_dict({"alhpa": 1.0})


@pytest.mark.parametrize("bad", [{"seeds": []}, {"target_domain": 8}, {"num_domains": 1}, {"generator": "x"}])
def test_invalid_config(bad):
    with pytest.raises(ContractError):
        ExperimentConfig.from_dict(bad)


def test_identity_hash_ignores_orchestration_keys():
    a = ExperimentConfig()
    assert a.identity_hash() == a.with_updates(seeds=[5], output_dir="elsewhere").identity_hash()
    assert a.identity_hash() != a.with_updates(alpha=0.5).identity_hash()


def test_usage_errors_exit_one(capsys):
    assert main(["generate", "--set", "nokey=1"]) == 1
    assert main(["no-such-command"]) == 1
    assert "error" in capsys.readouterr().err


# -- generate ----------------------------------------------------------------------


def test_generate_default_dataset(tmp_path):
    out = tmp_path / "gen"
    assert main(["generate", "--out", str(out)]) == 0
    ds = load_dataset(out / "dataset")
    assert len(ds) == 8000 and ds.X.shape[1] == 4
    assert sorted(set(ds.u.tolist())) == list(range(8))


def test_generate_rerun_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["generate", "--set", "samples_per_domain=50", "--out", str(a)]) == 0
    assert main(["generate", "--set", "samples_per_domain=50", "--out", str(b)]) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir()) and len(names) >= 3
    for n in names:
        if n != "config.json":  # records output_dir, which differs by construction
            assert (a / n).read_bytes() == (b / n).read_bytes()


def test_generate_invalid_u_writes_nothing(tmp_path):
    out = tmp_path / "nothing"
    assert main(["generate", "--set", "num_domains=1", "--out", str(out)]) == 1
    assert not out.exists()


# -- train / eval ------------------------------------------------------------------


def test_train_without_alpha_beta_total_equals_l_y(tmp_path, small_config):
    out = tmp_path / "t"
    assert main(["train", "--config", small_config, "--set", "alpha=0", "--set", "beta=0", "--out", str(out)]) == 0
    rows = read_csv(out / "history.csv")
    assert len(rows) == 2
    for r in rows:
        assert float(r["l_total"]) == float(r["l_y"])
    assert (out / "checkpoint.json").exists()


def test_train_multiple_seeds_use_subdirectories(tmp_path, small_config):
    out = tmp_path / "t"
    assert main(["train", "--config", small_config, "--seeds", "0,1", "--out", str(out)]) == 0
    assert (out / "seed_0" / "checkpoint.json").exists() and (out / "seed_1" / "history.csv").exists()


def test_train_divergence_exits_nonzero(tmp_path, small_config, capsys):
    with pytest.warns(RuntimeWarning):
        code = main(["train", "--config", small_config, "--set", "lr=1e6", "--set", "epochs=5",
                     "--out", str(tmp_path / "t")])
    assert code == 2
    assert "epoch" in capsys.readouterr().err


def test_eval_identity_encoder_on_identity_mixing(tmp_path, small_config):
    out = tmp_path / "e"
    code = main(["eval", "--config", small_config, "--set", "mixing_depth=0", "--set", "standardize=false",
                 "--set", "encoder=identity", "--out", str(out)])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["mcc"] == 1.0
    assert report["acc"] is None
    assert (out / "latents_test.csv").exists()


def test_eval_twice_identical(tmp_path, small_config):
    train_out = tmp_path / "t"
    assert main(["train", "--config", small_config, "--out", str(train_out)]) == 0
    ck = str(train_out / "checkpoint.json")
    outs = [tmp_path / "e1", tmp_path / "e2"]
    for o in outs:
        assert main(["eval", "--config", small_config, "--checkpoint", ck, "--out", str(o)]) == 0
    for name in ("report.json", "metrics.csv", "latents_test.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    report = json.loads((outs[0] / "report.json").read_text())
    assert 0 <= report["acc"] <= 1 and 0 <= report["mcc"] <= 1 and report["rmse"] >= 0


def test_eval_without_latents_is_acc_only(tmp_path, small_config):
    gen = tmp_path / "g"
    assert main(["generate", "--config", small_config, "--out", str(gen)]) == 0
    stem = gen / "dataset"
    save_dataset(replace(load_dataset(stem), Z_true=None), stem)
    assert load_dataset(stem).Z_true is None

    train_out = tmp_path / "t"
    assert main(["train", "--config", small_config, "--data", str(stem), "--out", str(train_out)]) == 0
    out = tmp_path / "e"
    assert main(["eval", "--config", small_config, "--data", str(stem), "--checkpoint",
                 str(train_out / "checkpoint.json"), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["acc"] is not None and report["mcc"] is None and report["rmse"] is None
    assert (out / "metrics.csv").read_text().splitlines()[1].split(",")[1:3] == ["NA", "NA"]


def test_eval_feature_mismatch(tmp_path, small_config):
    train_out = tmp_path / "t"
    assert main(["train", "--config", small_config, "--out", str(train_out)]) == 0
    code = main(["eval", "--config", small_config, "--set", "dim_zc=3", "--checkpoint",
                 str(train_out / "checkpoint.json"), "--out", str(tmp_path / "e")])
    assert code == 1


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out


# -- sweeps ------------------------------------------------------------------------


def test_full_source_case_single_combination():
    assert source_combinations(8, 0, 8) == [(1, 2, 3, 4, 5, 6, 7)]


def test_three_domain_case_binomial_count():
    combos = source_combinations(8, 0, 3)
    assert len(combos) == math.comb(7, 2) == 21
    assert all(0 not in c for c in combos) and len(set(combos)) == 21


def test_combination_cap_keeps_ends():
    full = source_combinations(8, 0, 3)
    capped = source_combinations(8, 0, 3, cap=5)
    assert len(capped) == 5 and capped[0] == full[0] and capped[-1] == full[-1]


def test_sweep_u_out_of_range():
    with pytest.raises(ContractError):
        source_combinations(8, 0, 9)


def test_sweep_domains_outputs(tmp_path, small_config):
    out = tmp_path / "s"
    code = main(["sweep-domains", "--config", small_config, "--u-values", "8,2", "--set", "max_combinations=2",
                 "--out", str(out)])
    assert code == 0
    rows = read_csv(out / "results.csv")
    assert list(rows[0]) == RESULTS_HEADER
    assert len(rows) == 1 + 2
    assert [r["u_domains"] for r in rows] == ["8", "2", "2"]
    md = (out / "summary.md").read_text().splitlines()
    assert md[0] == "| State | U | ACC | MCC | RMSE |"
    assert md[2].startswith("| Component-wise Identification | 8 |")
    assert md[3].startswith("| No Identification | 2 |")
    summary = read_csv(out / "summary.csv")
    assert [s["u"] for s in summary] == ["8", "2"] and [s["runs"] for s in summary] == ["1", "2"]


def test_sweep_resume_skips_completed(tmp_path, small_config):
    out = tmp_path / "s"
    args = ["sweep-domains", "--config", small_config, "--u-values", "8", "--seeds", "0,1", "--out", str(out)]
    assert main(args) == 0
    first = (out / "results.csv").read_text()
    assert main(args) == 0
    assert (out / "results.csv").read_text() == first
    assert len(completed_keys(out / "results.csv")) == 2


def test_sweep_run_limit(tmp_path, small_config):
    out = tmp_path / "s"
    # 21 combinations x 10 seeds = 210 runs
    code = main(["sweep-domains", "--config", small_config, "--u-values", "3", "--seeds", ",".join(map(str, range(10))),
                 "--out", str(out)])
    assert code == 1
    assert 21 * 10 > RUN_LIMIT
    assert not (out / "results.csv").exists()


def test_results_writer_rejects_foreign_header(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("a,b\n")
    with pytest.raises(ContractError):
        ResultsWriter(p)


def test_hparam_sweep_grid(tmp_path, small_config):
    out = tmp_path / "h"
    code = main(["sweep-hparams", "--config", small_config, "--alphas", "0.1,0.5", "--betas", "0.001",
                 "--set", "sources=[1,2]", "--out", str(out)])
    assert code == 0
    rows = read_csv(out / "hparams.csv")
    assert list(rows[0]) == HPARAM_HEADER
    assert [(r["alpha"], r["beta"]) for r in rows] == [("0.1", "0.001"), ("0.5", "0.001")]
    md = (out / "hparams_summary.md").read_text().splitlines()
    assert len(md) == 2 + 2


def test_hparam_sweep_single_point_constant_columns(tmp_path, small_config):
    out = tmp_path / "h"
    code = main(["sweep-hparams", "--config", small_config, "--alphas", "0.3", "--betas", "0.0001",
                 "--seeds", "0,1", "--set", "sources=[1]", "--out", str(out)])
    assert code == 0
    rows = read_csv(out / "hparams.csv")
    assert len(rows) == 2
    assert {r["alpha"] for r in rows} == {"0.3"} and {r["beta"] for r in rows} == {"0.0001"}


# -- report ------------------------------------------------------------------------


def write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULTS_HEADER, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "0") for k in RESULTS_HEADER})


def test_report_reproduces_reference_table(tmp_path, capsys):
    p = tmp_path / "r.csv"
    rows = []
    for u, (a, m, r) in REFERENCE.items():
        for _ in range(3):
            rows.append({"u_domains": u, "acc": a, "mcc": m, "rmse": r, "source_combination": "x", "seed": 0})
    write_rows(p, rows)
    assert main(["report", str(p), "--out", str(tmp_path / "rep")]) == 0
    md = (tmp_path / "rep" / "report.md").read_text()
    assert "| 8 | 0.9982 | 0.9982 | 0.9037 | 0.9037 | 0.0433 | 0.0433 |" in md
    assert "| 2 | 0.5978 | 0.5978 | 0.6184 | 0.6184 | 0.1272 | 0.1272 |" in md
    assert capsys.readouterr().out == md


def test_report_empty_results_error(tmp_path):
    p = tmp_path / "empty.csv"
    write_rows(p, [])
    with pytest.raises(ParseError):
        load_rows(p)
    assert main(["report", str(p)]) == 2


def test_report_missing_file(tmp_path):
    assert main(["report", str(tmp_path / "absent.csv")]) == 1


def test_summarize_mean_and_sample_std():
    rows = [{"u_domains": "3", "acc": "0.5", "mcc": "0.6", "rmse": "NA"},
            {"u_domains": "3", "acc": "0.7", "mcc": "0.8", "rmse": "NA"}]
    s = summarize(rows)[3]
    assert s.runs == 2
    assert s.acc[0] == pytest.approx(0.6) and s.acc[1] == pytest.approx(math.sqrt(0.02))
    assert math.isnan(s.rmse[0])


@pytest.mark.parametrize("u,state", [(8, "Component-wise Identification"), (5, "Component-wise Identification"),
                                     (4, "Subspace Identification"), (3, "Subspace Identification"),
                                     (2, "No Identification")])
def test_identification_states(u, state):
    assert identification_state(u, 2) == state


def summaries_from(table):
    return {u: Summary(u, 3, (a, 0.0), (m, 0.0), (r, 0.0)) for u, (a, m, r) in table.items()}


def test_trend_flags_on_reference_pattern():
    table = {8: (0.998, 0.90, 0.04), 6: (0.97, 0.85, 0.05), 5: (0.95, 0.80, 0.06), 4: (0.9, 0.75, 0.08),
             3: (0.8, 0.70, 0.10), 2: (0.6, 0.62, 0.13)}
    flags = trend_flags(summaries_from(table))
    assert len(flags) == 6 and all(flags.values())


def test_trend_flags_detect_violations():
    table = {8: (0.9, 0.6, 0.2), 5: (0.9, 0.7, 0.2), 2: (0.85, 0.5, 0.2)}
    flags = trend_flags(summaries_from(table))
    assert not any(flags.values())


def test_trend_flags_missing_u():
    flags = trend_flags(summaries_from({8: (0.99, 0.9, 0.04)}))
    assert flags["(a) ACC(U=8) >= 0.95"] is True
    assert flags["(d) RMSE(U=2) >= 1.5 x RMSE(U=5)"] is None


def test_comparison_markdown_lists_every_flag():
    rows = [{"u_domains": "8", "acc": "0.99", "mcc": "0.9", "rmse": "0.05"}]
    md = comparison_markdown(rows)
    assert md.count("| (") == 6 and "n/a" in md
