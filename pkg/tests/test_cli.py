import json

import pytest

from sepsis_fusion import __version__, main
from sepsis_fusion.cohort import load_cohort
from sepsis_fusion.config import Config
from sepsis_fusion.errors import ConfigError


@pytest.fixture
def database(tmp_path):
    return f"sqlite:///{tmp_path / 'runs.db'}"


@pytest.fixture
def config_file(tmp_path):
    payload = {
        "name": "cli",
        "task": "detection",
        "genspec": "detection_default",
        "n": 200,
        "variants": ["CHANCE", "STATIC_ONLY"],
        "folds": 2,
        "models": {"historian": {"rounds": 3, "max_depth": 2}},
        "formats": ["json", "csv"],
    }
    path = tmp_path / "cli.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def test_version(capsys):
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_unknown_command():
    assert main(["bake"]) == 1


def test_synth_then_guard(tmp_path, capsys):
    raw = tmp_path / "raw.jsonl"
    guarded = tmp_path / "guarded.jsonl"
    assert main(["--seed", "3", "synth", "detection_default", "-n", "40", "-o", str(raw)]) == 0
    assert len(load_cohort(raw)) == 40
    assert main(["guard", str(raw), "--task", "detection", "-o", str(guarded)]) == 0
    assert "purged" in capsys.readouterr().out
    assert len(load_cohort(guarded)) <= 40


def test_synth_is_seeded(tmp_path):
    first, second = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    main(["--seed", "5", "synth", "mortality_default", "-n", "10", "-o", str(first)])
    main(["--seed", "5", "synth", "mortality_default", "-n", "10", "-o", str(second)])
    assert first.read_bytes() == second.read_bytes()


def test_guard_rejects_malformed_cohort(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n", encoding="utf-8")
    assert main(["guard", str(bad), "--task", "detection", "-o", str(tmp_path / "out.jsonl")]) == 2
    assert "error" in capsys.readouterr().err


def test_ablate_needs_config(database):
    assert main(["--database-url", database, "ablate"]) == 1


def test_invalid_config_file(tmp_path, database):
    path = tmp_path / "broken.json"
    path.write_text(json.dumps({"name": "x", "task": "triage", "genspec": "detection_default"}), encoding="utf-8")
    assert main(["--config", str(path), "--database-url", database, "ablate"]) == 1


def test_ablate_then_report(tmp_path, config_file, database, capsys):
    out = tmp_path / "out"
    assert main(["--config", str(config_file), "--out", str(out), "--database-url", database, "ablate"]) == 0
    assert (out / "cli_ablation.json").exists()
    assert (out / "cli_cells.csv").exists()
    capsys.readouterr()

    again = tmp_path / "again"
    assert main(["--out", str(again), "--database-url", database, "report", "--experiment", "cli",
                 "--format", "csv"]) == 0
    assert (again / "cli_cells.csv").read_bytes() == (out / "cli_cells.csv").read_bytes()


def test_report_without_runs(database):
    assert main(["--database-url", database, "report"]) == 1


def test_train_writes_bundle(tmp_path, config_file, capsys):
    out = tmp_path / "models"
    assert main(["--config", str(config_file), "--out", str(out), "train", "static_only"]) == 0
    assert (out / "cli_static_only" / "historian.json").exists()
    assert str(out / "cli_static_only") in capsys.readouterr().out


def test_sweep_rejects_bad_sizes(config_file, database):
    assert main(["--config", str(config_file), "--database-url", database, "sweep", "--sizes", "a,b"]) == 1


def test_bad_thread_setting_is_a_config_error(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(Config, "THREADS", "four")
    with pytest.raises(ConfigError):
        Config.threads()
    assert main(["synth", "detection_default", "-n", "5", "-o", str(tmp_path / "c.jsonl")]) == 1
    assert "SEPSIS_FUSION_THREADS" in capsys.readouterr().err
    assert not (tmp_path / "c.jsonl").exists()


def test_thread_setting_from_environment(monkeypatch):
    monkeypatch.setattr(Config, "THREADS", "3")
    assert Config.threads() == 3
    monkeypatch.setattr(Config, "THREADS", "0")
    with pytest.raises(ConfigError):
        Config.threads()
