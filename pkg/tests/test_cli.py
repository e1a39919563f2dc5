import json

import pytest

from astgl.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, default_config, main
from astgl.dataset import load_dataset
from astgl.experiment import file_digests

TINY = [
    "--set", 'generation.counts={"A": 12, "B": 12, "C": 6}',
    "--set", "generation.chunk=64",
    "--set", "hyperparams.T_win=0.1",
    "--set", "hyperparams.K_s=2",
    "--set", "hyperparams.f_gcn=3",
    "--set", "hyperparams.f_tcn=3",
    "--set", "hyperparams.batch_size=16",
    "--set", "hyperparams.epochs=2",
]


def run(cmd, out, *extra):
    return main([cmd, "--out", str(out), *TINY, *extra])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert run("gen-data", out) == 0
    assert run("train", out) == 0
    return out


def test_gen_data_outputs(pipeline, capsys):
    for g in "ABC":
        ds = load_dataset(pipeline / "data" / g)
        assert len(ds) == {"A": 24, "B": 24, "C": 12}[g]
    assert (pipeline / "data" / "summary.txt").exists()
    resolved = json.loads((pipeline / "gen-data" / "resolved_config.json").read_text())
    assert resolved["generation"]["counts"] == {"A": 12, "B": 12, "C": 6}


def test_rerun_is_identical_and_seed_changes_cases(pipeline, tmp_path):
    assert run("gen-data", tmp_path / "same") == 0
    assert file_digests(tmp_path / "same" / "data") == file_digests(pipeline / "data")
    assert run("gen-data", tmp_path / "other", "--seed", "7") == 0
    for g in "ABC":
        a, b = load_dataset(pipeline / "data" / g), load_dataset(tmp_path / "other" / "data" / g)
        assert len(a) == len(b) and a.digest() != b.digest()


def test_snapshot_reproduces_run(pipeline, tmp_path):
    snap = pipeline / "gen-data" / "resolved_config.json"
    assert main(["gen-data", "--out", str(tmp_path), "--config", str(snap)]) == 0
    assert file_digests(tmp_path / "data") == file_digests(pipeline / "data")


def test_train_outputs(pipeline, capsys):
    for name in ("best.ckpt", "final.ckpt", "train_log.csv", "resolved_config.json"):
        assert (pipeline / "train" / name).exists()


def test_train_is_idempotent(pipeline, tmp_path):
    data = pipeline / "data"
    assert run("train", tmp_path, "--set", f"paths.data={data}") == 0
    a, b = file_digests(pipeline / "train"), file_digests(tmp_path / "train")
    a.pop("resolved_config.json"), b.pop("resolved_config.json")
    assert a == b


def test_eval_reports_gap_and_baseline(pipeline, capsys):
    assert run("eval", pipeline, "--baseline", "admittance") == 0
    text = capsys.readouterr().out
    assert "known-vs-unknown accuracy gap" in text
    assert "STGCN-admittance" in text
    rep = json.loads((pipeline / "eval" / "report.json").read_text())
    assert [r["group"] for r in rep["rows"]] == ["all", "A", "B", "C"]
    assert (pipeline / "eval" / "baseline_admittance.csv").exists()


def test_eval_single_group(pipeline, capsys):
    assert run("eval", pipeline, "--group", "C") == 0
    assert "gap" not in capsys.readouterr().out


def test_inspect_outputs(pipeline, capsys):
    assert run("inspect", pipeline, "--group", "all") == 0
    files = {p.name for p in (pipeline / "inspect").iterdir()}
    assert {"A_adp.csv", "alpha_sp.csv", "A_sp.csv", "sign_test.json"} <= files
    assert {f"embeddings_L{i}.csv" for i in range(1, 5)} <= files
    assert "sign test" in capsys.readouterr().out


def test_hpo_budget_one_and_reproducible(pipeline, tmp_path):
    args = ["--set", "hpo.budget=1", "--set", "hpo.epoch_cap=1", "--set", f"paths.data={pipeline / 'data'}",
            "--set", 'hpo.space={"T_win": [0.1], "lam": [0.001]}']
    assert run("hpo", tmp_path / "a", *args) == 0
    assert run("hpo", tmp_path / "b", *args) == 0
    assert (tmp_path / "a" / "hpo" / "trials.csv").read_bytes() == (tmp_path / "b" / "hpo" / "trials.csv").read_bytes()
    best = json.loads((tmp_path / "a" / "hpo" / "best_config.json").read_text())
    assert best["hyperparams"]["epochs"] == 2
    # the best config is itself a valid config file
    assert set(best) == set(default_config())
    assert best["hyperparams"]["lam"] == 0.001


def test_hpo_all_trials_failed(pipeline, tmp_path, capsys):
    # the stored windows are 0.5 s, so a 1.0 s draw cannot be trained
    args = ["--set", "hpo.budget=2", "--set", f"paths.data={pipeline / 'data'}",
            "--set", 'hpo.space={"T_win": [1.0]}']
    assert run("hpo", tmp_path, *args) == EXIT_NUMERIC
    assert "all 2 trials failed" in capsys.readouterr().err


def test_config_errors(tmp_path, capsys):
    assert run("train", tmp_path, "--set", "hyperparams.bogus=1") == EXIT_CONFIG
    assert "hyperparams.bogus: unknown key" in capsys.readouterr().err
    assert run("train", tmp_path, "--set", "hyperparams.K_s=0") == EXIT_CONFIG
    assert main(["train", "--out", str(tmp_path), "--config", str(tmp_path / "none.json")]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["nope"]) == EXIT_CONFIG
    assert run("hpo", tmp_path, "--set", "hpo.budget=0") == EXIT_CONFIG
    assert run("eval", tmp_path, "--set", "eval.group=D") == EXIT_CONFIG
    assert run("inspect", tmp_path, "--set", "inspect.group=D") == EXIT_CONFIG
    assert run("gen-data", tmp_path, "--set", 'generation.counts={"Z": 3}') == EXIT_CONFIG
    assert run("gen-data", tmp_path, "--set", "grid.n_buses=5") == EXIT_CONFIG


def test_resolved_config_written_before_failure(tmp_path):
    assert run("train", tmp_path) == EXIT_DATA
    assert (tmp_path / "train" / "resolved_config.json").exists()


def test_data_errors(pipeline, tmp_path):
    assert run("eval", tmp_path, "--set", f"paths.data={pipeline / 'data'}") == EXIT_DATA
    assert run("inspect", tmp_path) == EXIT_DATA
    small = tmp_path / "small"
    assert run("gen-data", small, "--set", "grid.n_buses=8", "--set", "grid.candidates_per_group=2") == 0
    ckpt = pipeline / "train" / "best.ckpt"
    assert run("eval", small, "--set", f"paths.checkpoint={ckpt}") == EXIT_DATA


def test_numerical_failure_exit(pipeline, tmp_path, monkeypatch):
    from astgl import tensor as T
    from astgl import training

    monkeypatch.setattr(training, "losses", lambda *a, **k: (_ for _ in ()).throw(T.NonFiniteError("inf")))
    assert run("train", tmp_path, "--set", f"paths.data={pipeline / 'data'}") == EXIT_NUMERIC
