import json
import os

import pytest

from raepinn.cli import EXIT_MISMATCH, EXIT_MISSING, EXIT_OK, EXIT_USAGE, main
from raepinn.io_utils import read_csv

TINY = """\
preset = "ac1d_i1"
seed = 0
[counts]
N_int = 64
N_sb = 8
N_tb = 16
[network]
hidden = [8, 8]
[weighting]
k_int = 5
[optimizer]
adam_iters = 20
lbfgs_iters = 3
[reference]
n = 32
dt = 1e-3
snapshots = 11
[logging]
log_every = 5
checkpoint_every = 10
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    os.environ["RAEPINN_REFERENCE_CACHE"] = str(root / "refs")
    try:
        code = main(["train", "--config", str(cfg), "--out", str(root / "run"), "--quiet"])
    finally:
        del os.environ["RAEPINN_REFERENCE_CACHE"]
    assert code == EXIT_OK
    return root, cfg


@pytest.fixture
def cache(trained, monkeypatch):
    monkeypatch.setenv("RAEPINN_REFERENCE_CACHE", str(trained[0] / "refs"))
    return trained


def test_train_writes_artifacts(trained):
    run = trained[0] / "run"
    for name in ("checkpoint_final.bin", "trainlog.csv", "summary.json", "config.json", "points.csv"):
        assert (run / name).exists(), name
    assert len(os.listdir(trained[0] / "refs")) == 1


def test_evaluate_untrained_net_is_order_one(cache):
    root, cfg = cache
    out = root / "eval"
    code = main(["evaluate", "--config", str(cfg), "--out", str(out), "--no-solve",
                 "--checkpoint", str(root / "run" / "checkpoint_final.bin")])
    assert code == EXIT_OK
    rep = json.loads((out / "evaluation.json").read_text())
    assert 0.3 < rep["relative_l2"]["u"] < 3.0
    comments, header, rows = read_csv(out / "pointwise_error.csv")
    assert header == ["x", "t", "u_pred", "u_ref", "abs_error"] and rows
    assert any("config_hash" in c for c in comments)


def test_evaluate_defaults_to_run_config(cache):
    root, _ = cache
    assert main(["evaluate", "--out", str(root / "run"), "--no-solve"]) == EXIT_OK
    assert (root / "run" / "evaluation.json").exists()


def test_diagnose_writes_report(cache):
    root, _ = cache
    assert main(["diagnose", "--run", str(root / "run"), "--out", str(root / "run")]) == EXIT_OK
    rep = json.loads((root / "run" / "diagnose.json").read_text())
    assert rep["theory_error"]["e_t_sq"] >= 0
    assert not rep["theory_error"]["constants_lower_bound"]
    assert "scaling_fit" in rep


def test_export_points(cache, tmp_path):
    _, cfg = cache
    path = tmp_path / "pts.csv"
    assert main(["export-points", "--config", str(cfg), "--path", str(path)]) == EXIT_OK
    _, header, rows = read_csv(path)
    assert header == ["role", "index", "axis", "x", "t"]
    assert len(rows) == 64 + 2 * 8 + 16


def test_reference_is_cached_and_exports_csv(cache, tmp_path, capsys):
    _, cfg = cache
    assert main(["reference", "--config", str(cfg)]) == EXIT_OK
    assert "already present" in capsys.readouterr().out
    csv = tmp_path / "ref.csv"
    assert main(["reference", "--config", str(cfg), "--force", "--csv", str(csv)]) == EXIT_OK
    _, header, rows = read_csv(csv)
    assert header == ["t", "x", "u"] and len(rows) == 11 * 32


def test_missing_prerequisites(tmp_path, cache):
    _, cfg = cache
    assert main(["evaluate", "--out", str(tmp_path / "nothing")]) == EXIT_MISSING
    assert main(["evaluate", "--config", str(cfg), "--out", str(tmp_path),
                 "--checkpoint", str(tmp_path / "none.bin")]) == EXIT_MISSING


def test_problem_mismatch_refused(cache, tmp_path):
    root, cfg = cache
    code = main(["evaluate", "--config", str(cfg), "--set", "problem.c1_sq=0.002", "--out", str(tmp_path),
                 "--checkpoint", str(root / "run" / "checkpoint_final.bin")])
    assert code == EXIT_MISMATCH


def test_config_errors_exit_with_usage(tmp_path, capsys):
    empty = tmp_path / "e.toml"
    empty.write_text("")
    assert main(["export-points", "--config", str(empty)]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "seed" in err and "preset or problem.name" in err
    assert main(["export-points", "--preset", "ac1d_i1", "--seed", "0", "--set", "nope=1"]) == EXIT_USAGE
