import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from fedpca import cli, wdro

SMALL = ["--k", "6", "--clients", "4", "--rounds", "15", "--local-rounds", "5",
         "--sample-fraction", "0.5", "--eta", "0.05"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def train(cache, out, *extra):
    assert run("train", "--data", cache, "--out", out, *SMALL, *extra) == 0
    return out


def read(path):
    return path.read_bytes()


def test_prepare_data_outputs(synthetic_dir, synthetic_cache, capsys, tmp_path):
    assert synthetic_cache.exists()
    assert (synthetic_cache.parent / "labels.txt").exists()
    out = tmp_path / "again"
    assert run("prepare-data", "--train", synthetic_dir / "KDDTrain+.txt",
               "--test", synthetic_dir / "KDDTest+.txt", "--out", out) == 0
    text = capsys.readouterr().out
    assert "train records: 2,600" in text and "test records: 1,700" in text
    assert read(out / "dataset.cache") == read(synthetic_cache)


def test_missing_input_names_the_path(tmp_path, capsys):
    missing = tmp_path / "nowhere.txt"
    assert run("prepare-data", "--train", missing, "--test", missing, "--out", tmp_path) == 1
    assert str(missing) in capsys.readouterr().err
    assert run("train", "--data", tmp_path / "none.cache", "--out", tmp_path) == 1
    assert "none.cache" in capsys.readouterr().err


def test_bad_flags_exit_1(synthetic_cache, tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("train", "--algorithm", "sgd")
    assert exc.value.code == 1
    assert run("train", "--data", synthetic_cache, "--out", tmp_path, "--threshold-p", "1.5") == 1
    assert run("train", "--data", synthetic_cache, "--out", tmp_path, *SMALL, "--rho", "-1") == 1
    assert run("train", "--data", synthetic_cache, "--out", tmp_path, "--k", "99") == 1


def test_config_rejects_unknown_keys(synthetic_cache, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"learning_rate": 0.1}))
    assert run("train", "--config", cfg, "--data", synthetic_cache, "--out", tmp_path) == 1
    cfg.write_text("[1, 2]")
    assert run("train", "--config", cfg, "--data", synthetic_cache, "--out", tmp_path) == 1


def test_centralized_train_and_evaluate(synthetic_cache, tmp_path):
    out = train(synthetic_cache, tmp_path / "c", "--algorithm", "centralized")
    summary = json.loads((out / "summary.json").read_text())
    m = summary["evaluation"]["metrics"]
    assert 0 <= m["fpr"] <= 1 and m["tpr"] > m["fpr"]
    ev = tmp_path / "ev"
    assert run("evaluate", "--model", out / "model.bin", "--data", synthetic_cache, "--out", ev) == 0
    metrics = json.loads((ev / "metrics.json").read_text())
    assert metrics["metrics"] == m
    with open(ev / "per_class.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["group"] for r in rows} <= {"known", "new", "all"}


def test_fedpg_artifacts_and_config_echo(synthetic_cache, tmp_path):
    cfg = tmp_path / "cfg.json"
    text = '{"algorithm": "fedpg", "seed": 3, "rho": 2.0}\n'
    cfg.write_text(text)
    out = tmp_path / "pg"
    assert run("train", "--config", cfg, "--data", synthetic_cache, "--out", out, *SMALL,
               "--rho", "1.5", "--eval-every", "5") == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config_text"] == text
    assert summary["config"]["seed"] == 3 and summary["config"]["rho"] == 1.5
    with open(out / "history.csv") as fh:
        hist = list(csv.DictReader(fh))
    assert [int(r["round"]) for r in hist] == list(range(16))
    with open(out / "accuracy.csv") as fh:
        assert [int(r["round"]) for r in csv.DictReader(fh)] == [0, 5, 10, 15]
    assert (out / "timing.json").exists() and (out / "timing.csv").exists()


def test_self_learning_writes_one_model_per_client(synthetic_cache, tmp_path):
    out = train(synthetic_cache, tmp_path / "sl", "--algorithm", "self-learning")
    assert len(list((out / "models").glob("client_*.bin"))) == 4
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["clients"]) == 4 and "f1" in summary["average_metrics"]


@pytest.mark.parametrize("algo", ["fedpg", "fedpe", "centralized", "self-learning"])
def test_train_is_deterministic(synthetic_cache, tmp_path, algo):
    a = train(synthetic_cache, tmp_path / "a", "--algorithm", algo, "--seed", "7")
    b = train(synthetic_cache, tmp_path / "b", "--algorithm", algo, "--seed", "7")
    names = ["summary.json"]
    names += ["models/client_000.bin"] if algo == "self-learning" else ["model.bin"]
    if algo in ("fedpg", "fedpe"):
        names.append("history.csv")
    for name in names:
        assert read(a / name) == read(b / name), name


def test_other_commands_are_deterministic(synthetic_cache, tmp_path):
    model = train(synthetic_cache, tmp_path / "m") / "model.bin"
    for name, argv, files in [
        ("evaluate", ["--model", model, "--data", synthetic_cache], ["metrics.json", "per_class.csv"]),
        ("roc", ["--model", model, "--data", synthetic_cache, "--class-filter", "all",
                 "--class-filter", "DoS"], ["roc_all.csv", "roc_DoS.csv", "auc.json"]),
        ("wdro-check", ["--random", "5"], ["wdro_report.json"]),
    ]:
        assert run(name, *argv, "--out", tmp_path / "x") == 0
        first = [read(tmp_path / "x" / f) for f in files]
        assert run(name, *argv, "--out", tmp_path / "y") == 0
        assert first == [read(tmp_path / "y" / f) for f in files], name


def test_threshold_sweep_is_monotone(synthetic_cache, tmp_path):
    model = train(synthetic_cache, tmp_path / "m", "--algorithm", "centralized") / "model.bin"
    tprs, fprs = [], []
    for p in (0.3, 0.5, 0.7, 0.9, 0.99):
        assert run("evaluate", "--model", model, "--data", synthetic_cache,
                   "--threshold-p", p, "--out", tmp_path / f"p{p}") == 0
        m = json.loads((tmp_path / f"p{p}" / "metrics.json").read_text())["metrics"]
        tprs.append(m["tpr"])
        fprs.append(m["fpr"])
    assert np.all(np.diff(tprs) <= 0) and np.all(np.diff(fprs) <= 0)


def test_roc_of_trained_model_beats_random_basis(synthetic_cache, tmp_path):
    from fedpca import dataio
    from fedpca.pca import PcaModel, save_model

    model = train(synthetic_cache, tmp_path / "m", "--algorithm", "centralized") / "model.bin"
    assert run("roc", "--model", model, "--data", synthetic_cache, "--out", tmp_path / "r") == 0
    auc = json.loads((tmp_path / "r" / "auc.json").read_text())["auc"]["all"]
    cache = dataio.load_cache(str(synthetic_cache))
    d = len(cache.manifest)
    rng = np.random.default_rng(0)
    aucs = []
    for i in range(5):
        q = np.linalg.qr(rng.standard_normal((d, 6)))[0]
        path = tmp_path / f"rand{i}.bin"
        save_model(PcaModel.from_basis(q, cache.digest), str(path))
        assert run("roc", "--model", path, "--data", synthetic_cache, "--out", tmp_path / "rr") == 0
        aucs.append(json.loads((tmp_path / "rr" / "auc.json").read_text())["auc"]["all"])
    assert auc > 0.9
    assert auc > max(aucs)


def test_model_from_other_dataset_is_rejected(synthetic_cache, tmp_path):
    from fedpca.pca import PcaModel, save_model

    q = np.linalg.qr(np.random.default_rng(1).standard_normal((34, 3)))[0]
    path = tmp_path / "foreign.bin"
    save_model(PcaModel.from_basis(q, b"\x00" * 32), str(path))
    assert run("evaluate", "--model", path, "--data", synthetic_cache, "--out", tmp_path) == 1


def test_compare_same_run_and_mismatch(synthetic_cache, tmp_path, capsys):
    a = train(synthetic_cache, tmp_path / "a", "--eval-every", "5")
    assert run("compare", "--run-a", a, "--run-b", a, "--out", tmp_path / "cmp") == 0
    with open(tmp_path / "cmp" / "compare.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(r["objective_a"] == r["objective_b"] for r in rows)
    assert rows[5]["accuracy_a"] == rows[5]["accuracy_b"] != ""
    stats = json.loads((tmp_path / "cmp" / "compare.json").read_text())
    assert stats["a"]["rounds_to_within_5pct"] == stats["b"]["rounds_to_within_5pct"]
    b = train(synthetic_cache, tmp_path / "b", "--rounds", "10")
    assert run("compare", "--run-a", a, "--run-b", b, "--out", tmp_path / "cmp2") == 1
    assert run("compare", "--run-a", a, "--run-b", tmp_path, "--out", tmp_path / "cmp3") == 1


def test_resume_matches_uninterrupted_run(synthetic_cache, tmp_path):
    full = train(synthetic_cache, tmp_path / "full", "--checkpoint-every", "5")
    part = train(synthetic_cache, tmp_path / "part", "--checkpoint-every", "5", "--rounds", "10")
    assert run("train", "--data", synthetic_cache, "--out", part, *SMALL,
               "--checkpoint-every", "5", "--resume") == 0
    assert read(full / "model.bin") == read(part / "model.bin")
    assert read(full / "history.csv") == read(part / "history.csv")
    assert run("train", "--data", synthetic_cache, "--out", tmp_path / "fresh", *SMALL,
               "--resume") == 1


def test_wdro_check_exit_codes(tmp_path):
    inst = tmp_path / "two.json"
    wdro.save_instance(inst, wdro.two_point_instance())
    assert run("wdro-check", "--instance", inst, "--out", tmp_path / "ok") == 0
    report = json.loads((tmp_path / "ok" / "wdro_report.json").read_text())
    assert report["failed"] == 0 and report["max_duality_gap"] == pytest.approx(0, abs=1e-12)
    # gamma = 0 sits below gamma* = 1 on this instance and breaks the upper side
    assert run("wdro-check", "--instance", inst, "--gamma", "0", "--out", tmp_path / "bad") == 3
    report = json.loads((tmp_path / "bad" / "wdro_report.json").read_text())
    assert report["failed"] == 1 and "counterexample" in report["results"][0]
    assert run("wdro-check", "--random", "20") == 0
    assert run("wdro-check") == 1
    assert run("wdro-check", "--random", "2", "--m", "5") == 1


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "fedpca.cli", "wdro-check", "--random", "2"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "pass" in res.stdout
    res = subprocess.run([sys.executable, "-m", "fedpca.cli", "bogus"], capture_output=True)
    assert res.returncode == 1
