import json
import re
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from sepsis_fusion import harness
from sepsis_fusion.errors import ConfigError, ModelError
from sepsis_fusion.harness import (
    DEFAULT_SIZES, REFERENCE_NOTE, TABLE_ROWS, Variant, experiment_config_from_dict, load_experiment_config,
    prepare_seed, run_ablation, run_calibration_study, run_cell, sample_size_sweep, summarize, train_variant,
)
from sepsis_fusion.reporting import Report, emit_report, load_stored_reports, store_report

TINY_MODELS = {
    "historian": {"rounds": 5, "max_depth": 2},
    "monitor": {"filters": 2, "kernel_width": 2, "hidden": 2, "attention": 2,
                "optimizer": {"epochs": 1, "batch_size": 64}},
    "reader": {"hash_dim": 256, "max_iter": 50},
    "visionary": {"width": 4, "optimizer": {"epochs": 2}},
    "gate": {"rounds": 5, "max_depth": 2},
    "fusionformer": {"hidden": 2, "temporal_attention": 2, "embedding": 2, "hash_dim": 256, "attention": 2,
                     "static_code": 2, "vision_code": 2, "optimizer": {"epochs": 2, "batch_size": 64}},
}


def tiny_payload(**overrides):
    payload = {
        "name": "tiny",
        "task": "detection",
        "genspec": "detection_default",
        "n": 300,
        "variants": ["CHANCE", "STATIC_ONLY", "NLP_ONLY", "MOE_TRIMODAL", "ORACLE"],
        "seeds": [0],
        "folds": 3,
        "models": TINY_MODELS,
    }
    payload.update(overrides)
    return payload


def tiny_config(**overrides):
    return experiment_config_from_dict(tiny_payload(**overrides))


@pytest.fixture(scope="module")
def ablation():
    return run_ablation(tiny_config())


class TestExperimentConfig:
    @pytest.mark.parametrize("overrides", [
        {"task": "triage"},
        {"name": ""},
        {"variants": []},
        {"variants": ["CHANCE", "CHANCE"]},
        {"variants": ["TRANSFORMER"]},
        {"seeds": []},
        {"cohort": "cohort.jsonl"},
        {"genspec": None},
        {"genspec": None, "cohort": "cohort.jsonl", "variants": ["ORACLE"]},
        {"folds": 1},
        {"n": 0},
        {"target_sensitivity": 1.5},
        {"sizes": [500, 200]},
        {"guard": {"buffer": 4}},
        {"guard": {"buffer_hours": -1.0}},
        {"models": {"transformer": {}}},
        {"models": {"historian": {"rounds": 0}}},
        {"models": {"monitor": {"depth": 3}}},
        {"colour": "blue"},
    ])
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            tiny_config(**overrides)

    def test_default_size_per_task(self):
        config = tiny_config(n=None, task="mortality", genspec="mortality_default")
        assert config.cohort_size == DEFAULT_SIZES["mortality"]

    def test_model_sections(self):
        config = tiny_config()
        assert config.model_params("historian").rounds == 5
        assert config.model_params("monitor").optimizer.epochs == 1
        assert config.model_params("visionary").width == 4

    def test_to_dict_roundtrip(self):
        config = tiny_config(sizes=[100, 200])
        assert experiment_config_from_dict(json.loads(json.dumps(config.to_dict()))) == config

    @pytest.mark.parametrize("name", ["detection_ablation", "detection_calibration", "mortality_ablation",
                                      "abx_ablation", "abx_redundancy", "abx_sweep"])
    def test_presets(self, name):
        assert load_experiment_config(name).name

    def test_config_file(self, tmp_path):
        path = tmp_path / "experiment.json"
        path.write_text(json.dumps(tiny_payload()), encoding="utf-8")
        assert load_experiment_config(path) == tiny_config()

    def test_missing_config(self):
        with pytest.raises(ConfigError):
            load_experiment_config("no_such_experiment")

    def test_every_variant_has_a_row_label(self):
        assert set(TABLE_ROWS) == set(Variant)
        assert len(set(TABLE_ROWS.values())) == len(Variant)


class TestPrepareSeed:
    def test_splits_partition_guarded_cohort(self):
        data = prepare_seed(tiny_config(), 0)
        ids = [r.id for part in (data.train, data.val, data.test) for r in part]
        assert len(ids) == len(set(ids))
        assert len(ids) + data.audit.records_excluded == 300

    def test_deterministic(self):
        first, second = prepare_seed(tiny_config(), 4), prepare_seed(tiny_config(), 4)
        assert first.train == second.train and first.test == second.test

    def test_cohort_file_source(self, tmp_path, small_cohort):
        from sepsis_fusion.cohort import save_cohort
        path = tmp_path / "cohort.jsonl"
        save_cohort(small_cohort, path)
        config = tiny_config(genspec=None, cohort=str(path), n=None, variants=["CHANCE"])
        data = prepare_seed(config, 0)
        assert data.spec is None
        assert len(data.train) > len(data.test) > 0


class TestAblation:
    def test_cells_cover_every_variant(self, ablation):
        cells = ablation.tables["cells"]
        assert cells["variant"].tolist() == ["CHANCE", "STATIC_ONLY", "NLP_ONLY", "MOE_TRIMODAL", "ORACLE"]
        assert (cells["status"] == "ok").all()
        assert ablation.kind == "ablation"

    def test_chance_and_oracle(self, ablation):
        cells = ablation.tables["cells"].set_index("variant")
        assert cells.loc["CHANCE", "test_auc"] == 0.5
        assert np.isnan(cells.loc["ORACLE", "train_auc"])
        assert cells.loc["ORACLE", "test_auc"] > 0.6

    def test_summary_and_extras(self, ablation):
        summary = ablation.tables["summary"]
        assert (summary["n_ok"] == 1).all()
        assert (summary["test_auc_std"] == 0.0).all()
        assert set(ablation.tables["gate_importance"]["block"]) == {
            "historian", "monitor", "reader", "missing_flags", "context"}
        assert "degradation" in ablation.tables

    def test_wall_time_only_in_store_rows(self, ablation):
        assert "wall_time" not in ablation.tables["cells"].columns
        assert all("wall_time" in row for row in ablation.cells)

    def test_thread_count_does_not_change_results(self, ablation):
        threaded = run_ablation(tiny_config(), threads=3)
        pd.testing.assert_frame_equal(threaded.tables["cells"], ablation.tables["cells"])
        pd.testing.assert_frame_equal(threaded.tables["gate_importance"], ablation.tables["gate_importance"])

    def test_failed_cell_is_recorded(self, monkeypatch):
        def broken(variant, data, config):
            raise ModelError("boom")

        monkeypatch.setattr(harness, "fit_variant", broken)
        config = tiny_config(variants=["CHANCE"])
        row, fitted = run_cell(config, Variant.CHANCE, prepare_seed(config, 0))
        assert fitted is None
        assert row["status"] == "error"
        assert "boom" in row["error"]
        assert np.isnan(row["test_auc"])


def test_summarize_ignores_failed_seeds():
    rows = [dict({column: np.nan for column in harness.METRIC_COLUMNS}, variant="A", table_row="a", status=status)
            for status in ("ok", "ok", "error")]
    frame = pd.DataFrame(rows)
    frame["test_auc"] = [0.6, 0.8, np.nan]
    summary = summarize(frame, ["variant"])
    assert summary.loc[0, "n_ok"] == 2
    assert summary.loc[0, "test_auc_mean"] == pytest.approx(0.7)
    assert summary.loc[0, "test_auc_std"] == pytest.approx(0.1)


class TestSweep:
    def test_sizes_in_order(self):
        report = sample_size_sweep(tiny_config(variants=["CHANCE", "STATIC_ONLY"]), sizes=(150, 300))
        sweep = report.tables["sweep"]
        assert sweep["size"].tolist() == [150, 150, 300, 300]
        assert list(report.tables["sweep_summary"].columns[:2]) == ["variant", "size"]

    def test_rejects_unsorted_sizes(self):
        with pytest.raises(ConfigError):
            sample_size_sweep(tiny_config(), sizes=(300, 150))

    def test_needs_a_size(self):
        with pytest.raises(ConfigError):
            sample_size_sweep(tiny_config())


class TestCalibration:
    @pytest.fixture(scope="class")
    def study(self):
        return run_calibration_study(tiny_config(variants=["MOE_TRIMODAL"], n=400), target_sensitivity=0.85)

    def test_policy_meets_target_on_validation(self, study):
        policy = study.tables["policy"].iloc[0]
        assert policy["val_sensitivity"] >= 0.85

    def test_lower_threshold_never_misses_more(self, study):
        policy = study.tables["policy"].iloc[0]
        if policy["threshold"] <= 0.5:
            assert policy["test_fn_calibrated"] <= policy["test_fn_default"]
            assert policy["test_sensitivity_calibrated"] >= policy["test_sensitivity_default"]
        else:
            assert policy["test_fn_calibrated"] >= policy["test_fn_default"]

    def test_tables(self, study):
        assert set(study.tables) == {"policy", "confusion", "classification_report", "roc", "operating_points", "pr"}
        assert study.tables["operating_points"]["name"].tolist() == ["default", "calibrated"]
        assert tuple(study.tables["roc"].iloc[0]) == (0.0, 0.0)
        assert study.notes[0] == REFERENCE_NOTE

    def test_roc_figure_marks_operating_points(self, study, tmp_path):
        written = emit_report(study, ("svg",), tmp_path)
        roc = tmp_path / "tiny_roc.svg"
        assert roc in written
        text = roc.read_text(encoding="utf-8")
        assert text.count("threshold ") >= 2
        shown = [float(v) for v in re.findall(r"AUC = ([0-9.]+)", text)]
        assert shown
        assert abs(shown[0] - study.cells[0]["test_auc"]) < 1e-6

    def test_needs_binary_task(self):
        config = tiny_config(task="antibiotic", genspec="abx_default", variants=["MOE_TRIMODAL"])
        with pytest.raises(ConfigError):
            run_calibration_study(config)


class TestReports:
    def test_emitted_file_names(self, ablation, tmp_path):
        written = emit_report(ablation, ("json", "csv", "svg"), tmp_path)
        names = {path.name for path in written}
        assert {"tiny_ablation.json", "tiny_cells.csv", "tiny_summary.csv", "tiny_auc.svg",
                "tiny_gate_importance.svg"} <= names
        assert all(path.exists() for path in written)

    def test_csv_header_comment(self, ablation, tmp_path):
        emit_report(ablation, ("csv",), tmp_path)
        lines = (tmp_path / "tiny_cells.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "# columns: " + ", ".join(ablation.tables["cells"].columns)
        assert len(lines) == len(ablation.tables["cells"]) + 2

    def test_json_has_no_nan(self, ablation, tmp_path):
        emit_report(ablation, ("json",), tmp_path)
        payload = json.loads((tmp_path / "tiny_ablation.json").read_text(encoding="utf-8"))
        cells = payload["tables"]["cells"]
        row = dict(zip(cells["columns"], cells["rows"][-1]))
        assert row["variant"] == "ORACLE" and row["train_auc"] is None

    def test_rerun_is_byte_identical(self, ablation, tmp_path):
        first = emit_report(ablation, ("json", "csv", "svg"), tmp_path / "a")
        second = emit_report(ablation, ("json", "csv", "svg"), tmp_path / "b")
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes()

    def test_unknown_format(self, ablation, tmp_path):
        with pytest.raises(ConfigError):
            emit_report(ablation, ("xlsx",), tmp_path)

    def test_store_roundtrip(self, ablation, store):
        run_id = store_report(ablation, tiny_config().to_dict())
        (stored,) = load_stored_reports(run_id=run_id)
        assert stored.experiment == "tiny" and stored.kind == "ablation"
        assert list(stored.tables) == list(ablation.tables)
        assert stored.tables["cells"]["variant"].tolist() == ablation.tables["cells"]["variant"].tolist()
        assert load_stored_reports(experiment="tiny")[0].kind == "ablation"

    def test_empty_store(self, store):
        with pytest.raises(ConfigError):
            load_stored_reports()


def test_train_variant_writes_bundle(tmp_path):
    report, bundle = train_variant(tiny_config(), Variant.STATIC_ONLY, 0, tmp_path)
    assert bundle == tmp_path / "tiny_static_only"
    assert (bundle / "historian.json").exists()
    assert isinstance(report, Report)
    assert report.tables["cells"]["status"].tolist() == ["ok"]


@pytest.mark.slow
class TestAcceptance:
    def test_calibrated_threshold_reduces_missed_cases(self):
        config = load_experiment_config("detection_calibration")
        report = run_calibration_study(replace(config, n=4000))
        policy = report.tables["policy"].iloc[0]
        assert policy["val_sensitivity"] >= 0.85
        assert policy["test_sensitivity_calibrated"] >= 0.80
        assert policy["test_fn_calibrated"] < policy["test_fn_default"]
        assert REFERENCE_NOTE in report.notes

    def test_ablation_files_are_reproducible(self, tmp_path):
        config = replace(load_experiment_config("detection_ablation"), n=1500, seeds=(0, 1))
        first = emit_report(run_ablation(config, threads=1), config.formats, tmp_path / "one")
        second = emit_report(run_ablation(config, threads=4), config.formats, tmp_path / "four")
        assert [p.name for p in first] == [p.name for p in second]
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes()

    def test_stacking_beats_deep_fusion_on_abx(self):
        config = replace(load_experiment_config("abx_ablation"), n=2000, seeds=(0, 1, 2, 3, 4),
                         variants=("MOE_TRIMODAL", "FUSIONFORMER"))
        summary = run_ablation(config, threads=4).tables["summary"].set_index("variant")
        moe, fusion = summary.loc["MOE_TRIMODAL"], summary.loc["FUSIONFORMER"]
        assert moe["n_ok"] == fusion["n_ok"] == 5
        assert moe["test_auc_mean"] > fusion["test_auc_mean"]
        assert fusion["overfit_gap_mean"] > moe["overfit_gap_mean"]

    def test_deep_fusion_gap_shrinks_with_size(self):
        config = replace(load_experiment_config("abx_sweep"), variants=("FUSIONFORMER",))
        assert config.sizes == (500, 2000, 8000, 32000)
        summary = sample_size_sweep(config, threads=4).tables["sweep_summary"]
        gaps = summary[summary["variant"] == "FUSIONFORMER"].sort_values("size")["overfit_gap_mean"].to_numpy()
        assert len(gaps) == 4
        assert (np.diff(gaps) <= 0).sum() >= 2
