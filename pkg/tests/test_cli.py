import csv
import io
import json

import numpy as np
import pytest

from plforge.cli import (
    CURVE_COLUMNS,
    LOG_CSV_COLUMNS,
    SALT_ADAPT,
    SALT_SOURCE,
    SUMMARY_COLUMNS,
    RunConfig,
    SchemaError,
    derive_seed,
    main,
)
from plforge.matrix_io import FeatureBundle, load_bundle, save_bundle
from plforge.trainer import AdapterModel, TrainConfig, load_checkpoint, save_checkpoint

GOLDEN_SOURCE = "0a875389fea27cc3"
GOLDEN_TARGET = "f05188213391720b"


def rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text(), newline="")))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert main(["synth", "--out-dir", str(d)]) == 0
    assert main(["source-train", str(d / "source.fbun"), "--out", str(d / "m.adpt")]) == 0
    return d


def write_config(tmp_path, doc):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return str(path)


def test_config_defaults_and_seed_splitting():
    cfg = RunConfig.from_dict({})
    assert cfg.seed == 7 and cfg.synth.seed == 7
    assert cfg.source.seed == derive_seed(7, SALT_SOURCE)
    assert cfg.train.seed == derive_seed(7, SALT_ADAPT)
    assert cfg.source.seed != cfg.train.seed
    assert (cfg.train.epochs, cfg.train.batch_size, cfg.train.k, cfg.train.tau, cfg.train.iters) == (15, 64, 4, 0.1, 2)
    assert cfg.train.beta == 0.3 and cfg.train.gamma == 0.6 and cfg.source.alpha == 0.1
    round_trip = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert round_trip == cfg


@pytest.mark.parametrize(
    "doc",
    [
        {"bogus": 1},
        {"train": {"nope": 1}},
        {"train": {"seed": 3}},
        {"train": {"epochs": "15"}},
        {"train": {"epochs": 1.5}},
        {"train": {"use_cacl": 1}},
        {"train": {"gamma": 0.0}},
        {"synth": {"shift_translation": [1.0]}},
        {"seed": -1},
        {"seed": True},
        {"source": []},
        [],
    ],
)
def test_schema_violations(doc):
    with pytest.raises(SchemaError):
        RunConfig.from_dict(doc)


def test_schema_violation_exit_code(tmp_path, capsys):
    assert main(["synth", "--config", write_config(tmp_path, {"bogus": 1}), "--out-dir", str(tmp_path)]) == 2
    assert "bogus" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["synth", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["synth"])
    assert exc.value.code == 2


def test_synth_outputs_and_golden_checksums(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    assert main(["synth", "--out-dir", str(a)]) == 0
    out = capsys.readouterr().out
    assert f"checksum={GOLDEN_SOURCE}" in out and f"checksum={GOLDEN_TARGET}" in out
    assert main(["synth", "--out-dir", str(b)]) == 0
    for name in ("source.fbun", "target.fbun", "source.manifest.json", "target.manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert load_bundle(a / "target.fbun").has_labels


def test_synth_missing_out_dir(tmp_path):
    assert main(["synth", "--out-dir", str(tmp_path / "missing")]) == 1


def test_synth_seed_flag_changes_data(tmp_path):
    (tmp_path / "s").mkdir()
    assert main(["synth", "--seed", "8", "--out-dir", str(tmp_path / "s")]) == 0
    assert json.loads((tmp_path / "s" / "source.manifest.json").read_text())["checksum"] != GOLDEN_SOURCE


def test_source_train_is_deterministic_and_reports_validation(workdir, tmp_path, capsys):
    out = tmp_path / "again.adpt"
    assert main(["source-train", str(workdir / "source.fbun"), "--out", str(out)]) == 0
    assert "validation accuracy" in capsys.readouterr().out
    assert out.read_bytes() == (workdir / "m.adpt").read_bytes()


def test_source_train_refuses_unlabelled(tmp_path, capsys):
    save_bundle(FeatureBundle(np.ones((4, 2)), np.zeros((4, 3))), tmp_path / "u.fbun")
    assert main(["source-train", str(tmp_path / "u.fbun"), "--out", str(tmp_path / "m.adpt")]) == 1
    assert "labelled" in capsys.readouterr().err


def test_adapt_outputs_and_idempotence(workdir, tmp_path):
    runs = []
    for name in ("one", "two"):
        d = tmp_path / name
        d.mkdir()
        args = ["adapt", str(workdir / "target.fbun"), str(workdir / "m.adpt"), "--out-dir", str(d), "--epochs", "3"]
        assert main(args) == 0
        runs.append(d)
    for name in ("adapted.adpt", "epochs.csv"):
        assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()
    log = rows(runs[0] / "epochs.csv")
    assert list(log[0]) == list(LOG_CSV_COLUMNS)
    assert [r["epoch"] for r in log] == ["1", "2", "3"]
    assert {r["seed"] for r in log} == {"7"}
    source = load_checkpoint(workdir / "m.adpt")
    adapted = load_checkpoint(runs[0] / "adapted.adpt")
    assert adapted.F.tobytes() == source.F.tobytes()


def test_adapt_no_cacl_drops_contrastive_term(workdir, tmp_path):
    d = tmp_path / "nocl"
    d.mkdir()
    args = ["adapt", str(workdir / "target.fbun"), str(workdir / "m.adpt"), "--out-dir", str(d), "--epochs", "2", "--no-cacl"]
    assert main(args) == 0
    assert all(float(r["l_cl"]) == 0.0 for r in rows(d / "epochs.csv"))


def test_adapt_flag_overrides_config(workdir, tmp_path):
    cfg = write_config(tmp_path, {"train": {"epochs": 4, "gamma": 0.5}})
    d = tmp_path / "ovr"
    d.mkdir()
    args = ["adapt", str(workdir / "target.fbun"), str(workdir / "m.adpt"), "--config", cfg, "--out-dir", str(d), "--epochs", "1"]
    assert main(args) == 0
    assert len(rows(d / "epochs.csv")) == 1


def test_adapt_numeric_failure_exit_code(workdir, tmp_path):
    m = load_checkpoint(workdir / "m.adpt")
    save_checkpoint(AdapterModel(m.W * 1e300, m.b, m.F), tmp_path / "huge.adpt")
    d = tmp_path / "boom"
    d.mkdir()
    args = ["adapt", str(workdir / "target.fbun"), str(tmp_path / "huge.adpt"), "--out-dir", str(d), "--epochs", "1"]
    assert main(args) == 3


def test_select_output(workdir, tmp_path, capsys):
    out = tmp_path / "sel.csv"
    assert main(["select", str(workdir / "target.fbun"), str(workdir / "m.adpt"), "--out", str(out)]) == 0
    sel = rows(out)
    ids = [int(r["id"]) for r in sel]
    assert ids == sorted(ids) and len(set(ids)) == len(ids)
    labels = np.array([int(r["pseudo_label"]) for r in sel])
    # 300 samples in three pseudo-classes; each contributes ceil(0.6 * n_c)
    assert 180 <= len(ids) <= 183
    assert set(labels) == {0, 1, 2}
    for method in ("prob", "ent", "cossim"):
        assert main(["select", str(workdir / "target.fbun"), str(workdir / "m.adpt"), "--method", method, "--iters", "1"]) == 0
    assert capsys.readouterr().out.startswith("id,score,pseudo_label")


def test_select_gamma_out_of_range(workdir):
    args = ["select", str(workdir / "target.fbun"), str(workdir / "m.adpt"), "--gamma", "1.5"]
    assert main(args) == 2


def test_report_empty_input_has_header(tmp_path, capsys):
    assert main(["report"]) == 0
    assert capsys.readouterr().out.strip() == ",".join(SUMMARY_COLUMNS)


def test_report_merges_runs_by_seed(workdir, tmp_path):
    logs = []
    for seed in (3, 1):
        d = tmp_path / f"s{seed}"
        d.mkdir()
        args = ["adapt", str(workdir / "target.fbun"), str(workdir / "m.adpt"), "--out-dir", str(d), "--epochs", "2", "--seed", str(seed)]
        assert main(args) == 0
        logs.append(str(d / "epochs.csv"))
    summary, curve = tmp_path / "summary.csv", tmp_path / "curve.csv"
    assert main(["report", *logs, "--out", str(summary), "--curve", str(curve)]) == 0
    srows = rows(summary)
    assert list(srows[0]) == list(SUMMARY_COLUMNS)
    assert [r["seed"] for r in srows] == ["1", "3"]
    assert all(r["n_epochs"] == "2" for r in srows)
    crows = rows(curve)
    assert list(crows[0]) == list(CURVE_COLUMNS)
    assert [r["n_runs"] for r in crows] == ["2", "2"]
    # a repeated (seed, epoch) pair is rejected
    assert main(["report", logs[0], logs[0]]) == 1


def test_thread_cap_env(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("PLFORGE_THREADS", "1")
    assert main(["select", str(workdir / "target.fbun"), str(workdir / "m.adpt"), "--out", str(tmp_path / "a.csv")]) == 0
    monkeypatch.setenv("PLFORGE_THREADS", "zero")
    assert main(["select", str(workdir / "target.fbun"), str(workdir / "m.adpt")]) == 2

