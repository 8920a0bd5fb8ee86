import os

import numpy as np
import pandas as pd
import pytest

from trajdrop.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic cache plus one briefly trained cnn1d checkpoint."""
    root = str(tmp_path_factory.mktemp("cli"))
    assert main(["import", "--synthetic", "12", "--seed", "1", "--out", root]) == EXIT_OK
    cache = os.path.join(root, "synthetic12_T8_F12.cache.json")
    config = os.path.join(root, "train.cfg")
    with open(config, "w") as f:
        f.write("# quick run\nepochs = 1\nbatch_size = 64\n")
    assert main(["train", cache, "--arch", "cnn1d", "--config", config, "--out", root]) == EXIT_OK
    return root, cache, os.path.join(root, "cnn1d_T8_F12_p0.2_s0.ckpt")


def test_import_writes_summary_and_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        out = os.path.join(tmp_path, name)
        assert main(["import", "--synthetic", "6", "--seed", "2", "--out", out]) == EXIT_OK
    assert "6 tracks" in capsys.readouterr().out
    first = read_bytes(os.path.join(tmp_path, "a", "synthetic6_T8_F12.cache.json"))
    assert first == read_bytes(os.path.join(tmp_path, "b", "synthetic6_T8_F12.cache.json"))


def test_import_annotation_file(tmp_path):
    src = os.path.join(tmp_path, "walkers.tsv")
    with open(src, "w") as f:
        for ped in (1, 2, 3):
            for k in range(22):
                f.write(f"{10 * k}\t{ped}\t{0.4 * k + ped}\t{-0.2 * k}\n")
    caches = []
    for name in ("a", "b"):
        out = os.path.join(tmp_path, name)
        assert main(["import", src, "--format", "tsv", "--out", out]) == EXIT_OK
        caches.append(read_bytes(os.path.join(out, "walkers_T8_F12.cache.json")))
    assert caches[0] == caches[1]


def test_import_needs_a_source(tmp_path):
    assert main(["import", "--out", str(tmp_path)]) == EXIT_USAGE


def test_import_malformed_file_is_data_error(tmp_path):
    src = os.path.join(tmp_path, "bad.tsv")
    with open(src, "w") as f:
        f.write("0\t1\tnope\t0.0\n")
    assert main(["import", src, "--format", "tsv", "--out", str(tmp_path)]) == EXIT_DATA


def test_train_outputs(workspace):
    root, _, checkpoint = workspace
    assert os.path.exists(checkpoint)
    log = pd.read_csv(os.path.join(root, "cnn1d_T8_F12_p0.2_s0_log.csv"))
    assert log["epoch"].tolist() == [1]


def test_train_rerun_is_byte_identical(workspace, tmp_path):
    root, cache, checkpoint = workspace
    config = os.path.join(root, "train.cfg")
    assert main(["train", cache, "--arch", "cnn1d", "--config", config, "--out", str(tmp_path)]) == EXIT_OK
    rerun = os.path.join(tmp_path, os.path.basename(checkpoint))
    assert read_bytes(rerun) == read_bytes(checkpoint)


def test_unknown_architecture_exits_with_usage(workspace):
    _, cache, _ = workspace
    with pytest.raises(SystemExit) as e:
        main(["train", cache, "--arch", "transformer"])
    assert e.value.code == EXIT_USAGE


def test_unknown_config_key(workspace, tmp_path):
    _, cache, _ = workspace
    config = os.path.join(tmp_path, "bad.cfg")
    with open(config, "w") as f:
        f.write("bogus = 1\n")
    assert main(["train", cache, "--arch", "cnn1d", "--config", config]) == EXIT_USAGE


def test_evaluate_is_deterministic(workspace, tmp_path):
    _, cache, checkpoint = workspace
    outs = [os.path.join(tmp_path, name) for name in ("a", "b")]
    for out in outs:
        args = ["evaluate", checkpoint, cache, "--n-mc", "5", "--p", "0.2", "--out", out]
        assert main(args) == EXIT_OK
    assert read_bytes(os.path.join(outs[0], "report.csv")) == read_bytes(
        os.path.join(outs[1], "report.csv")
    )
    report = pd.read_csv(os.path.join(outs[0], "report.csv"))
    assert report["model"].tolist() == ["cnn1d+mc"]
    assert report["n_mc"].tolist() == [5]
    distributions = os.path.join(outs[0], "distributions")
    n_traj = int(report["n_traj"].iloc[0])
    assert os.path.exists(os.path.join(distributions, f"traj_{n_traj - 1:04d}.csv"))
    assert os.path.exists(os.path.join(distributions, "traj_0000_samples.csv"))
    assert os.path.exists(os.path.join(outs[0], "covariance_profile.csv"))


def test_zero_dropout_mc_matches_deterministic(workspace, tmp_path):
    _, cache, checkpoint = workspace
    det_out, mc_out = os.path.join(tmp_path, "det"), os.path.join(tmp_path, "mc")
    assert main(["evaluate", checkpoint, cache, "--mode", "deterministic", "--out", det_out]) == EXIT_OK
    args = ["evaluate", checkpoint, cache, "--n-mc", "4", "--p", "0", "--no-distributions"]
    assert main(args + ["--out", mc_out]) == EXIT_OK
    det = pd.read_csv(os.path.join(det_out, "report.csv"))
    mc = pd.read_csv(os.path.join(mc_out, "report.csv"))
    assert det["ade"].iloc[0] == mc["ade"].iloc[0]
    assert det["fde"].iloc[0] == mc["fde"].iloc[0]
    assert pd.isna(det["cs_x"].iloc[0])
    assert not os.path.exists(os.path.join(mc_out, "distributions"))


def test_evaluate_horizon_mismatch(workspace, tmp_path):
    _, _, checkpoint = workspace
    out = str(tmp_path)
    assert main(["import", "--synthetic", "6", "--future", "5", "--out", out]) == EXIT_OK
    other = os.path.join(out, "synthetic6_T8_F5.cache.json")
    assert main(["evaluate", checkpoint, other, "--out", out]) == EXIT_DATA


def test_evaluate_missing_checkpoint(workspace, tmp_path):
    _, cache, _ = workspace
    missing = os.path.join(tmp_path, "missing.ckpt")
    assert main(["evaluate", missing, cache, "--out", str(tmp_path)]) == EXIT_DATA


def test_sweep_grid(workspace, tmp_path):
    _, cache, checkpoint = workspace
    out = str(tmp_path)
    args = ["sweep", "--checkpoints", checkpoint, "--caches", cache, "--p", "0.1", "0.3"]
    assert main(args + ["--horizons", "4.8", "--n-mc", "3", "--out", out]) == EXIT_OK
    sweep = pd.read_csv(os.path.join(out, "sweep.csv"))
    assert len(sweep) == 2
    assert sweep["p"].tolist() == [0.1, 0.3]
    assert set(sweep["model"]) == {"cnn1d+mc"}
    assert len(pd.read_csv(os.path.join(out, "baseline.csv"))) == 2
    assert len(pd.read_csv(os.path.join(out, "uncertainty.csv"))) == 2


def test_sweep_reports_missing_horizon(workspace, tmp_path):
    _, cache, checkpoint = workspace
    args = ["sweep", "--checkpoints", checkpoint, "--caches", cache, "--horizons", "4.8", "6.4"]
    assert main(args + ["--n-mc", "2", "--out", str(tmp_path)]) == EXIT_DATA


def test_sweep_uses_checkpoint_trained_at_each_p(workspace, tmp_path):
    root, cache, checkpoint = workspace
    config = os.path.join(root, "train.cfg")
    train_args = ["train", cache, "--arch", "cnn1d", "--dropout", "0.4", "--config", config]
    assert main(train_args + ["--out", str(tmp_path)]) == EXIT_OK
    other = os.path.join(tmp_path, "cnn1d_T8_F12_p0.4_s0.ckpt")
    out = os.path.join(tmp_path, "sweep")
    args = ["sweep", "--checkpoints", checkpoint, other, "--caches", cache, "--p", "0.2", "0.4"]
    assert main(args + ["--horizons", "4.8", "--n-mc", "2", "--out", out]) == EXIT_OK
    sweep = pd.read_csv(os.path.join(out, "sweep.csv"))
    assert sweep["checkpoint"].tolist() == ["cnn1d_T8_F12_p0.2_s0", "cnn1d_T8_F12_p0.4_s0"]
    baseline = pd.read_csv(os.path.join(out, "baseline.csv"))
    assert baseline["checkpoint"].tolist() == sweep["checkpoint"].tolist()
    # 0.3 matches neither checkpoint
    args = ["sweep", "--checkpoints", checkpoint, other, "--caches", cache, "--p", "0.3"]
    assert main(args + ["--horizons", "4.8", "--n-mc", "2", "--out", out]) == EXIT_USAGE


def test_sweep_rejects_duplicate_checkpoints(workspace, tmp_path):
    _, cache, checkpoint = workspace
    args = ["sweep", "--checkpoints", checkpoint, checkpoint, "--caches", cache]
    assert main(args + ["--out", str(tmp_path)]) == EXIT_USAGE


def test_sweep_rows_are_tagged_by_checkpoint_and_dataset(workspace, tmp_path):
    _, cache, checkpoint = workspace
    args = ["sweep", "--checkpoints", checkpoint, "--caches", cache, "--horizons", "4.8"]
    assert main(args + ["--n-mc", "2", "--out", str(tmp_path)]) == EXIT_OK
    for name in ("sweep.csv", "baseline.csv", "uncertainty.csv"):
        frame = pd.read_csv(os.path.join(tmp_path, name))
        assert frame["checkpoint"].tolist() == ["cnn1d_T8_F12_p0.2_s0"]
        assert frame["dataset"].tolist() == ["synthetic:12"]


def test_sweep_retrains_missing_horizon(workspace, tmp_path):
    root, cache, checkpoint = workspace
    out = str(tmp_path)
    assert main(["import", "--synthetic", "12", "--seed", "1", "--future", "5", "--out", out]) == EXIT_OK
    short = os.path.join(out, "synthetic12_T8_F5.cache.json")
    config = os.path.join(out, "retrain.cfg")
    with open(config, "w") as f:
        f.write("epochs = 1\nbatch_size = 64\nretrain = true\n")
    args = ["sweep", "--checkpoints", checkpoint, "--caches", cache, short, "--horizons", "4.8", "2.0"]
    assert main(args + ["--n-mc", "2", "--config", config, "--out", out]) == EXIT_OK
    assert os.path.exists(os.path.join(out, "cnn1d_T8_F5_p0.2_s0.ckpt"))
    sweep = pd.read_csv(os.path.join(out, "sweep.csv"))
    assert sweep["horizon_s"].tolist() == [4.8, 2.0]
    assert sweep["checkpoint"].tolist() == ["cnn1d_T8_F12_p0.2_s0", "cnn1d_T8_F5_p0.2_s0"]


def test_sweep_without_checkpoints_needs_retrain(workspace, tmp_path):
    _, cache, _ = workspace
    assert main(["sweep", "--caches", cache, "--out", str(tmp_path)]) == EXIT_USAGE


def test_train_every_configured_architecture(workspace, tmp_path):
    _, cache, _ = workspace
    config = os.path.join(tmp_path, "two.cfg")
    with open(config, "w") as f:
        f.write("epochs = 1\nbatch_size = 64\narchitectures = cnn1d, cnn_lstm\n")
    assert main(["train", cache, "--config", config, "--out", str(tmp_path)]) == EXIT_OK
    for stem in ("cnn1d_T8_F12_p0.2_s0", "cnn_lstm_T8_F12_p0.2_s0"):
        assert os.path.exists(os.path.join(tmp_path, f"{stem}.ckpt"))
    assert not os.path.exists(os.path.join(tmp_path, "lstm_ed_T8_F12_p0.2_s0.ckpt"))


def test_non_finite_checkpoint_exits_numeric(workspace, tmp_path):
    _, cache, checkpoint = workspace
    poisoned = os.path.join(tmp_path, "poisoned.ckpt")
    with open(poisoned, "wb") as f:
        f.write(read_bytes(checkpoint)[:-8] + np.array([np.inf], dtype="<f8").tobytes())
    assert main(["evaluate", poisoned, cache, "--out", str(tmp_path)]) == EXIT_NUMERIC
