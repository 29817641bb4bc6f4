"""End-to-end CLI behavior on a miniature scene: exit codes, file contracts,
reproducibility. Everything runs in-process through main(argv)."""

import csv

import numpy as np
import pytest

from icad.cli import EXIT_ALARM, EXIT_ERROR, EXIT_OK, main
from icad.persistence import load_calibration, save_config


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """A miniature end-to-end workspace: data, models, calibrations."""
    root = tmp_path_factory.mktemp("cli")
    paths = {
        "train": root / "train.icad",
        "cal_data": root / "cal_data.icad",
        "in_stream": root / "in_stream.icad",
        "ood_stream": root / "ood_stream.icad",
        "vae": root / "vae.icad",
        "svdd": root / "svdd.icad",
        "vae_cal": root / "vae_cal.icad",
        "svdd_cal": root / "svdd_cal.icad",
        "root": root,
    }
    base = ["--dim", "64", "--r-min", "0", "--r-max", "20"]
    assert main(["gen-data", "--out", str(paths["train"]), "--count", "150", *base,
                 "--seed", "1"]) == EXIT_OK
    assert main(["gen-data", "--out", str(paths["cal_data"]), "--count", "120", *base,
                 "--seed", "2"]) == EXIT_OK
    assert main(["gen-data", "--out", str(paths["in_stream"]), "--count", "40", *base,
                 "--seed", "3"]) == EXIT_OK
    assert main(["gen-data", "--out", str(paths["ood_stream"]), "--count", "40",
                 "--dim", "64", "--r-min", "60", "--r-max", "80", "--seed", "4"]) == EXIT_OK
    assert main(["train-vae", "--data", str(paths["train"]), "--out", str(paths["vae"]),
                 "--epochs", "15", "--epochs2", "5", "--lr", "1e-3", "--lr2", "1e-4",
                 "--hidden", "32,16", "--latent", "4", "--batch", "32", "--seed", "5"]) == EXIT_OK
    assert main(["train-svdd", "--data", str(paths["train"]), "--out", str(paths["svdd"]),
                 "--epochs", "10", "--epochs2", "5", "--lr", "5e-5", "--lr2", "1e-5",
                 "--hidden", "128", "--out-dim", "16", "--batch", "32", "--seed", "6"]) == EXIT_OK
    assert main(["calibrate", "--scorer", "vae", "--model", str(paths["vae"]),
                 "--cal-data", str(paths["cal_data"]), "--out", str(paths["vae_cal"])]) == EXIT_OK
    assert main(["calibrate", "--scorer", "svdd", "--model", str(paths["svdd"]),
                 "--cal-data", str(paths["cal_data"]), "--out", str(paths["svdd_cal"])]) == EXIT_OK
    return paths


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_gen_data_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a.icad", tmp_path / "b.icad"
    args = ["--count", "20", "--dim", "64", "--r-min", "0", "--r-max", "20", "--seed", "9"]
    assert main(["gen-data", "--out", str(a), *args]) == EXIT_OK
    assert main(["gen-data", "--out", str(b), *args]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_gen_data_rejects_zero_count(tmp_path, capsys):
    code = main(["gen-data", "--out", str(tmp_path / "x.icad"), "--count", "0", "--dim", "64"])
    assert code == EXIT_ERROR
    assert "positive integer" in capsys.readouterr().err


def test_gen_data_rejects_non_square_dim(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "x.icad"), "--count", "2",
                 "--dim", "60"]) == EXIT_ERROR


def test_gen_data_records_run_config(work):
    sidecar = work["train"].with_name(work["train"].name + ".config.txt")
    text = sidecar.read_text()
    assert "command=gen-data" in text and "seed=1" in text


def test_train_smoke_single_epoch(work, tmp_path):
    out = tmp_path / "tiny.icad"
    code = main(["train-vae", "--data", str(work["train"]), "--out", str(out),
                 "--epochs", "1", "--epochs2", "0", "--hidden", "8", "--latent", "2",
                 "--seed", "0"])
    assert code == EXIT_OK
    assert out.exists()
    loss_rows = _rows(out.with_name(out.name + ".loss.csv"))
    assert loss_rows[0] == ["epoch", "loss"]
    assert len(loss_rows) == 2


def test_train_rerun_reproduces_loss_curve(work, tmp_path):
    outs = []
    for name in ("r1.icad", "r2.icad"):
        out = tmp_path / name
        assert main(["train-vae", "--data", str(work["train"]), "--out", str(out),
                     "--epochs", "3", "--epochs2", "1", "--hidden", "8", "--latent", "2",
                     "--seed", "11"]) == EXIT_OK
        outs.append(out)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    curves = [
        (outs[0].with_name(outs[0].name + ".loss.csv")).read_bytes(),
        (outs[1].with_name(outs[1].name + ".loss.csv")).read_bytes(),
    ]
    assert curves[0] == curves[1]


def test_train_svdd_pretrain_flag(work, tmp_path):
    out = tmp_path / "pre.icad"
    assert main(["train-svdd", "--data", str(work["train"]), "--out", str(out),
                 "--epochs", "2", "--epochs2", "0", "--pretrain", "--pre-epochs", "2",
                 "--pre-epochs2", "0", "--hidden", "16", "--out-dim", "4",
                 "--seed", "1"]) == EXIT_OK
    assert out.exists()


def test_calibrate_split_mode_matches_algorithm(work, tmp_path):
    # one file of l=10 split at m=8 gives a sorted 2-score calibration set
    data = tmp_path / "ten.icad"
    assert main(["gen-data", "--out", str(data), "--count", "10", "--dim", "64",
                 "--seed", "21"]) == EXIT_OK
    out = tmp_path / "knn_cal.icad"
    assert main(["calibrate", "--scorer", "knn", "--train-data", str(data),
                 "--split-m", "8", "--k", "3", "--out", str(out)]) == EXIT_OK
    cal = load_calibration(out)
    assert len(cal) == 2
    assert cal.scorer_kind == "knn"
    assert np.all(np.diff(cal.scores) >= 0)


def test_calibrate_kde_needs_train_data(work, tmp_path, capsys):
    code = main(["calibrate", "--scorer", "kde", "--cal-data", str(work["cal_data"]),
                 "--out", str(tmp_path / "c.icad")])
    assert code == EXIT_ERROR
    assert "train-data" in capsys.readouterr().err


def test_calibrate_kde_with_explicit_bandwidth(work, tmp_path):
    out = tmp_path / "kde_cal.icad"
    assert main(["calibrate", "--scorer", "kde", "--train-data", str(work["train"]),
                 "--cal-data", str(work["cal_data"]), "--bandwidth", "0.5",
                 "--out", str(out)]) == EXIT_OK
    cal = load_calibration(out)
    assert cal.scorer_kind == "kde"
    assert len(cal) == 120


def test_calibrate_vae_sampled_scores(work, tmp_path):
    out = tmp_path / "sampled_cal.icad"
    assert main(["calibrate", "--scorer", "vae", "--model", str(work["vae"]),
                 "--cal-data", str(work["cal_data"]), "--cal-samples", "3",
                 "--seed", "1", "--out", str(out)]) == EXIT_OK
    assert len(load_calibration(out)) == 120 * 3


def test_calibrate_dimension_mismatch_is_error(work, tmp_path, capsys):
    wrong = tmp_path / "wrong_dim.icad"
    assert main(["gen-data", "--out", str(wrong), "--count", "10", "--dim", "144",
                 "--seed", "1"]) == EXIT_OK
    code = main(["calibrate", "--scorer", "vae", "--model", str(work["vae"]),
                 "--cal-data", str(wrong), "--out", str(tmp_path / "c.icad")])
    assert code == EXIT_ERROR
    assert "dimension" in capsys.readouterr().err


def test_detect_clean_stream_exits_zero(work, tmp_path):
    out = tmp_path / "diag.csv"
    code = main(["detect", "--method", "svdd", "--model", str(work["svdd"]),
                 "--cal", str(work["svdd_cal"]), "--input", str(work["in_stream"]),
                 "--N", "10", "--tau", "20", "--seed", "0", "--out", str(out)])
    assert code == EXIT_OK
    rows = _rows(out)
    assert rows[0] == ["step", "score", "p", "log_m", "s", "alarm"]
    assert len(rows) == 41
    assert all(row[5] == "0" for row in rows[1:])


def test_detect_ood_stream_exits_two_with_alarm_step(work, tmp_path):
    out = tmp_path / "diag_ood.csv"
    code = main(["detect", "--method", "svdd", "--model", str(work["svdd"]),
                 "--cal", str(work["svdd_cal"]), "--input", str(work["ood_stream"]),
                 "--N", "10", "--tau", "8", "--seed", "0", "--out", str(out)])
    assert code == EXIT_ALARM
    rows = _rows(out)
    alarms = [row for row in rows[1:] if row[5] == "1"]
    assert alarms, "expected at least one alarm row in the diagnostics CSV"


def test_detect_vae_diagnostics_have_per_sample_pvalues(work, tmp_path):
    out = tmp_path / "diag_vae.csv"
    code = main(["detect", "--method", "vae", "--model", str(work["vae"]),
                 "--cal", str(work["vae_cal"]), "--input", str(work["in_stream"]),
                 "--N", "5", "--delta", "6", "--tau", "156", "--seed", "0",
                 "--out", str(out)])
    assert code == EXIT_OK
    rows = _rows(out)
    assert rows[0] == ["step", "score", "p_1", "p_2", "p_3", "p_4", "p_5", "log_m", "s", "alarm"]


def test_detect_rejects_n_zero(work, tmp_path, capsys):
    code = main(["detect", "--method", "svdd", "--model", str(work["svdd"]),
                 "--cal", str(work["svdd_cal"]), "--input", str(work["in_stream"]),
                 "--N", "0", "--out", str(tmp_path / "x.csv")])
    assert code == EXIT_ERROR
    assert "positive integer" in capsys.readouterr().err


def test_detect_rejects_mismatched_calibration(work, tmp_path, capsys):
    code = main(["detect", "--method", "svdd", "--model", str(work["svdd"]),
                 "--cal", str(work["vae_cal"]), "--input", str(work["in_stream"]),
                 "--out", str(tmp_path / "x.csv")])
    assert code == EXIT_ERROR
    err = capsys.readouterr().err
    assert "calibration" in err


def test_detect_rerun_is_byte_identical(work, tmp_path):
    outs = []
    for name in ("d1.csv", "d2.csv"):
        out = tmp_path / name
        assert main(["detect", "--method", "vae", "--model", str(work["vae"]),
                     "--cal", str(work["vae_cal"]), "--input", str(work["in_stream"]),
                     "--N", "5", "--delta", "6", "--tau", "156", "--seed", "7",
                     "--out", str(out)]) == EXIT_OK
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def _sim_config(work, path, method, tau):
    save_config(path, {
        "model": work["vae" if method == "vae" else "svdd"],
        "cal": work["vae_cal" if method == "vae" else "svdd_cal"],
        "n": 10, "delta": 6.0, "tau": tau, "max_steps": 60,
        "ood_fraction": 0.5, "ood_margin": 5.0, "seed": 3,
    })


def test_simulate_smoke_one_episode(work, tmp_path):
    import time

    cfg = tmp_path / "sim.txt"
    _sim_config(work, cfg, "svdd", tau=10.0)
    out_dir = tmp_path / "sim_out"
    start = time.perf_counter()
    code = main(["simulate", "--episodes", "1", "--method", "svdd",
                 "--config", str(cfg), "--out", str(out_dir)])
    assert time.perf_counter() - start < 10.0
    assert code == EXIT_OK
    episodes = _rows(out_dir / "episodes.csv")
    assert episodes[0] == ["episode", "label", "onset_step", "alarm_step", "verdict",
                           "delay_frames"]
    assert len(episodes) == 2
    summary = _rows(out_dir / "summary.csv")
    assert summary[0] == ["parameters", "false_positive", "false_negative",
                          "avg_delay_frames"]
    assert (out_dir / "episode_000.csv").exists()
    assert (out_dir / "config.txt").exists()


def test_simulate_rerun_is_byte_identical(work, tmp_path):
    cfg = tmp_path / "sim.txt"
    _sim_config(work, cfg, "svdd", tau=10.0)
    dirs = []
    for name in ("s1", "s2"):
        out_dir = tmp_path / name
        assert main(["simulate", "--episodes", "4", "--method", "svdd",
                     "--config", str(cfg), "--out", str(out_dir)]) == EXIT_OK
        dirs.append(out_dir)
    for rel in ("episodes.csv", "summary.csv", "episode_000.csv", "episode_003.csv"):
        assert (dirs[0] / rel).read_bytes() == (dirs[1] / rel).read_bytes(), rel


def test_tune_reports_feasible_point(work, tmp_path, capsys):
    cfg = tmp_path / "sim.txt"
    _sim_config(work, cfg, "svdd", tau=10.0)
    out = tmp_path / "grid.csv"
    code = main(["tune", "--method", "svdd", "--config", str(cfg),
                 "--grid", "tau=6,10,14,1000000", "--episodes", "6", "--out", str(out)])
    assert code == EXIT_OK
    printed = capsys.readouterr().out
    assert "best:" in printed and "fp=0" in printed
    rows = _rows(out)
    assert rows[0] == ["delta", "tau", "false_positives", "false_negatives",
                       "mean_delay", "objective"]
    assert len(rows) == 5
    # the degenerate threshold never alarms: zero FP, all OOD missed
    degenerate = rows[-1]
    assert degenerate[2] == "0" and int(degenerate[3]) > 0


def test_tune_requires_delta_for_vae(work, tmp_path, capsys):
    cfg = tmp_path / "sim.txt"
    _sim_config(work, cfg, "vae", tau=156.0)
    code = main(["tune", "--method", "vae", "--config", str(cfg),
                 "--grid", "tau=1,2", "--episodes", "2", "--out", str(tmp_path / "g.csv")])
    assert code == EXIT_ERROR
    assert "delta" in capsys.readouterr().err


def test_bench_has_five_quartile_columns(work, tmp_path):
    out = tmp_path / "bench.csv"
    code = main(["bench", "--method", "svdd", "--model", str(work["svdd"]),
                 "--cal", str(work["svdd_cal"]), "--N-list", "5,10", "--steps", "30",
                 "--out", str(out)])
    assert code == EXIT_OK
    rows = _rows(out)
    assert rows[0] == ["method", "n", "min", "q1", "q2", "q3", "max"]
    assert len(rows) == 3
    for row in rows[1:]:
        quartile_values = [float(v) for v in row[2:]]
        assert len(quartile_values) == 5
        assert quartile_values == sorted(quartile_values)


def test_unknown_command_usage_error():
    assert main(["frobnicate"]) == EXIT_ERROR


def test_missing_file_is_reported_as_error(tmp_path, capsys):
    code = main(["detect", "--method", "svdd", "--model", str(tmp_path / "nope.icad"),
                 "--cal", str(tmp_path / "nope2.icad"), "--input", str(tmp_path / "n.icad"),
                 "--out", str(tmp_path / "d.csv")])
    assert code == EXIT_ERROR
    assert "error" in capsys.readouterr().err
