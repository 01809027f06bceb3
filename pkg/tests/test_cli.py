import math
from pathlib import Path

import numpy as np
import pytest

from robustgmm import (
    CARD_STANDIN_COLUMNS,
    load_csv,
    save_dataset_csv,
    scalar_treatment_design,
    two_stage_least_squares,
)
from robustgmm.cli import main

from conftest import make_linear_dataset

DATA_CSV = Path(__file__).resolve().parents[1] / "data" / "card_standin.csv"


@pytest.fixture
def linear_csv(tmp_path):
    data, w_true = make_linear_dataset(seed=30, n=300, d=2, noise=0.3)
    path = tmp_path / "linear.csv"
    save_dataset_csv(path, data)
    return path, data, w_true


def body_lines(path):
    return [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]


def header_lines(path):
    return [l for l in Path(path).read_text().splitlines() if l.startswith("#")]


def parse_report(path):
    out = {}
    for line in body_lines(path):
        key, _, value = line.partition("=")
        out[key] = value
    return out


COLS = ["--set", "col_instruments=z1,z2", "--set", "col_covariates=x1,x2"]


# ---------------------------------------------------------------------------
# estimate


def test_estimate_writes_report_and_matches_iv(linear_csv, tmp_path):
    path, data, _ = linear_csv
    out = tmp_path / "est.out"
    code = main(
        ["estimate", "--seed", "3", "--out", str(out),
         "--set", f"input={path}", "--set", "eps=0.05", *COLS]
    )
    assert code == 0
    header = header_lines(out)
    assert "# command=estimate" in header
    assert any(l.startswith("# seed=3") for l in header)
    report = parse_report(out)
    w = np.array([float(v) for v in report["w_hat"].split(",")])
    w_iv = two_stage_least_squares(data)
    assert np.linalg.norm(w - w_iv) <= 0.05 * (1.0 + np.linalg.norm(w_iv))
    assert int(report["final_set_size"]) + len(
        [i for i in report["removed_indices"].split(",") if i]
    ) == 300
    assert report["radius_trace"].startswith("1:")
    assert "diag.outer_rounds" in report and "diag.gamma" in report


def test_estimate_rerun_is_byte_identical(linear_csv, tmp_path):
    path, _, _ = linear_csv
    a, b = tmp_path / "a.out", tmp_path / "b.out"
    argv = ["estimate", "--seed", "11", "--set", f"input={path}",
            "--set", "eps=0.1", *COLS]
    assert main(argv + ["--out", str(a)]) == 0
    assert main(argv + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_estimate_fixed_hyperparams_theory_mode(linear_csv, tmp_path):
    path, data, _ = linear_csv
    out = tmp_path / "fixed.out"
    code = main(
        ["estimate", "--seed", "1", "--out", str(out),
         "--set", f"input={path}", *COLS,
         "--set", "hyper=fixed", "--set", "eps=0.05", "--set", "lam=0.4",
         "--set", "L=4.0", "--set", "sigma=1.0", "--set", "R0=8.0"]
    )
    assert code == 0
    report = parse_report(out)
    assert "w_hat" in report and "diag.outer_rounds" in report
    assert float(report["diag.final_set_size"]) == 300.0


def test_estimate_scalar_model_reports_ate(tmp_path):
    out = tmp_path / "ate.out"
    code = main(
        ["estimate", "--seed", "1", "--out", str(out),
         "--set", f"input={DATA_CSV}", "--set", "model=scalar",
         "--set", "eps=0.05",
         "--set", f"col_response={CARD_STANDIN_COLUMNS['response']}",
         "--set", f"col_treatment={CARD_STANDIN_COLUMNS['treatment']}",
         "--set", "col_instruments=nearc4", "--set", "col_covariates=exper,expersq"]
    )
    assert code == 0
    report = parse_report(out)
    assert 0.0 < float(report["ate"]) < 0.3


def test_estimate_error_exits(linear_csv, tmp_path, capsys):
    path, _, _ = linear_csv
    out = tmp_path / "x.out"
    base = ["estimate", "--out", str(out), "--set", f"input={path}", *COLS]
    assert main(base + ["--set", "eps=0.5"]) == 1
    assert "eps must be < 0.5" in capsys.readouterr().err
    assert main(base + ["--set", "eps=abc"]) == 1
    assert "expected a number" in capsys.readouterr().err
    assert main(base + ["--set", "eps=0.1", "--set", "mystery=1"]) == 1
    assert "unknown config key" in capsys.readouterr().err
    assert main(["estimate", "--set", f"input={path}", "--set", "eps=0.1", *COLS]) == 1
    assert "--out is required" in capsys.readouterr().err
    assert main(["estimate", "--out", str(out), "--set", "eps=0.1"]) == 1
    assert "required" in capsys.readouterr().err
    assert not out.exists()


def test_config_file_and_set_precedence(linear_csv, tmp_path):
    path, _, _ = linear_csv
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        f"input={path}\neps=0.4\ncol_instruments=z1,z2\ncol_covariates=x1,x2\n"
        "# a comment line\n\nseed=5\n"
    )
    out = tmp_path / "cfg.out"
    code = main(
        ["estimate", "--config", str(cfg), "--out", str(out), "--set", "eps=0.1"]
    )
    assert code == 0
    header = header_lines(out)
    assert "# eps=0.1" in header  # --set wins over the file
    assert "# seed=5" in header


def test_config_file_errors(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("just-some-text\n")
    assert main(["estimate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "expected key=value" in capsys.readouterr().err
    assert (
        main(["estimate", "--config", str(tmp_path / "nope.cfg"),
              "--out", str(tmp_path / "o")])
        == 1
    )
    assert "cannot read config file" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# sweeps


SMALL_SWEEP = ["--set", "preset=desk", "--set", "n=120", "--set", "d=2",
               "--set", "eps_grid=0.1", "--set", "reps=2"]


def read_rows(path):
    lines = body_lines(path)
    assert lines[0] == "epsilon,estimator,metric,value,seed,runtime_ms"
    return [l.split(",") for l in lines[1:]]


def test_synth_sweep_rows_and_aggregate(tmp_path):
    out = tmp_path / "sweep.csv"
    code = main(["synth-sweep", "--seed", "2", "--out", str(out), *SMALL_SWEEP])
    assert code == 0
    rows = read_rows(out)
    assert len(rows) == 6  # 1 eps x 3 estimators x 2 reps
    assert {r[1] for r in rows} == {
        "iterated-gmm-sever", "classical-iv", "two-stage-huber"
    }
    agg_path = tmp_path / "sweep.agg.csv"
    assert agg_path.exists()
    assert "# command=synth-sweep" in header_lines(agg_path)
    agg_rows = body_lines(agg_path)[1:]
    for line in agg_rows:
        eps_s, est, metric, mean_s, stderr_s, count_s = line.split(",")
        vals = [float(r[3]) for r in rows if r[1] == est]
        assert count_s == "2"
        assert float(mean_s) == pytest.approx(np.mean(vals), rel=1e-15)
        expected_se = np.std(vals, ddof=1) / math.sqrt(2)
        assert float(stderr_s) == pytest.approx(expected_se, rel=1e-12)


def test_synth_sweep_byte_identical_and_jobs_invariant(tmp_path):
    argv = ["synth-sweep", "--seed", "4", *SMALL_SWEEP,
            "--set", "estimators=classical-iv,iterated-gmm-sever"]
    a, b, c = (tmp_path / n for n in ("a.csv", "b.csv", "c.csv"))
    assert main(argv + ["--out", str(a)]) == 0
    assert main(argv + ["--out", str(b)]) == 0
    assert main(argv + ["--out", str(c), "--jobs", "2"]) == 0
    assert a.read_bytes() == b.read_bytes() == c.read_bytes()
    assert (tmp_path / "a.agg.csv").read_bytes() == (tmp_path / "b.agg.csv").read_bytes()


def test_synth_sweep_bad_preset(tmp_path, capsys):
    assert main(["synth-sweep", "--out", str(tmp_path / "o.csv"),
                 "--set", "preset=huge"]) == 1
    assert "unknown preset" in capsys.readouterr().err


def test_semi_sweep_negation_smoke(tmp_path):
    out = tmp_path / "semi.csv"
    code = main(
        ["semi-sweep", "--seed", "6", "--out", str(out),
         "--set", f"input={DATA_CSV}", "--set", "eps_grid=0.05",
         "--set", "reps=1", "--set", "estimators=classical-iv"]
    )
    assert code == 0
    rows = read_rows(out)
    assert len(rows) == 1 and rows[0][2] == "ate"
    # the negation attack flips the sign of the clean classical estimate
    design = scalar_treatment_design(load_csv(DATA_CSV, CARD_STANDIN_COLUMNS))
    clean = float(two_stage_least_squares(design)[0])
    assert float(rows[0][3]) == pytest.approx(-clean, rel=1e-6)


def test_semi_sweep_requires_input(tmp_path, capsys):
    assert main(["semi-sweep", "--out", str(tmp_path / "s.csv")]) == 1
    assert "required" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# diagnose and selfcheck


def test_diagnose_reports_constants(linear_csv, tmp_path):
    path, _, _ = linear_csv
    out = tmp_path / "diag.out"
    code = main(
        ["diagnose", "--seed", "1", "--out", str(out),
         "--set", f"input={path}", *COLS]
    )
    assert code == 0
    report = parse_report(out)
    assert report["n"] == "300" and report["d"] == "2" and report["p"] == "2"
    for key in (
        "jacobian_sigma_min",
        "jacobian_second_moment_sup",
        "noise_second_moment_sup",
        "noise_second_moment_robust",
        "moment_norm",
    ):
        assert float(report[key]) >= 0.0


def test_selfcheck_all_pass(capsys):
    assert main(["selfcheck"]) == 0
    out_lines = capsys.readouterr().out.strip().splitlines()
    assert len(out_lines) == 7
    assert all(l.startswith("PASS ") for l in out_lines)
    names = {l.split(" ", 1)[1] for l in out_lines}
    assert names == {
        "moment-jacobian-consistency",
        "top-eigenvector-analytic",
        "learner-boundary-projection",
        "filter-no-removal-stability",
        "filter-idempotence",
        "negation-attack-identity",
        "radius-schedule-arithmetic",
    }
