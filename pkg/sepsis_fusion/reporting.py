"""Report tables, their file emitters and the results store."""
from dataclasses import dataclass, field
from pathlib import Path
import logging
import json
import math

import numpy as np
import pandas as pd

from sepsis_fusion import Session
from sepsis_fusion.errors import ConfigError, OutputError
from sepsis_fusion.metrics import roc_area
from sepsis_fusion import plots
from sepsis_fusion.utils.seeding import content_hash

logger = logging.getLogger(__name__)

FORMATS = ("json", "csv", "svg")
FLOAT_FORMAT = "%.6f"


@dataclass
class Report:
    experiment: str
    kind: str
    tables: dict = field(default_factory=dict)  # name -> DataFrame, emitted in insertion order
    notes: tuple = ()
    cells: tuple = field(default=(), repr=False)  # raw cell rows with wall times, store only
    wall_time: float | None = None


def _plain(value):
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def report_to_payload(report):
    tables = {}
    for name, frame in report.tables.items():
        rows = [[_plain(v) for v in row] for row in frame.itertuples(index=False, name=None)]
        tables[name] = {"columns": [str(c) for c in frame.columns], "rows": rows}
    return {"experiment": report.experiment, "kind": report.kind, "notes": list(report.notes), "tables": tables}


def report_from_payload(payload):
    tables = {
        name: pd.DataFrame(table["rows"], columns=table["columns"])
        for name, table in payload["tables"].items()
    }
    return Report(payload["experiment"], payload["kind"], tables, tuple(payload.get("notes", ())))


# Emitters

def write_csv(frame, path):
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write("# columns: " + ", ".join(str(c) for c in frame.columns) + "\n")
        frame.to_csv(handle, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def _figures(report, outdir):
    stem = report.experiment
    tables = report.tables
    written = []
    if "summary" in tables and len(tables["summary"]):
        summary = tables["summary"]
        written.append(plots.bar_figure(
            list(summary["table_row"]), list(summary["test_auc_mean"]), outdir / f"{stem}_auc.svg",
            title=f"{stem}: test AUC by variant", ylabel="Test AUC",
            errors=list(summary["test_auc_std"].fillna(0.0)),
        ))
    if "sweep_summary" in tables and len(tables["sweep_summary"]):
        sweep = tables["sweep_summary"]
        sizes = sorted(sweep["size"].unique())
        for column, name, ylabel in (("test_auc_mean", "sweep", "Test AUC"),
                                     ("overfit_gap_mean", "overfit_gap", "Train - validation AUC")):
            series = {variant: [float(part.set_index("size").loc[s, column]) for s in sizes]
                      for variant, part in sweep.groupby("variant", sort=False)}
            written.append(plots.line_figure(sizes, series, outdir / f"{stem}_{name}.svg",
                                             title=f"{stem}: {ylabel} vs cohort size",
                                             xlabel="Cohort size", ylabel=ylabel, logx=True))
    if "roc" in tables and len(tables["roc"]):
        roc = tables["roc"]
        points = list(zip(roc["fpr"], roc["tpr"]))
        marks = ()
        if "operating_points" in tables:
            ops = tables["operating_points"]
            marks = [(f"threshold {t:.3f}", x, y) for t, x, y in zip(ops["threshold"], ops["fpr"], ops["tpr"])]
        written.append(plots.roc_figure(points, roc_area(points), outdir / f"{stem}_roc.svg",
                                        title=f"{stem}: ROC", operating_points=marks))
    if "pr" in tables and len(tables["pr"]):
        pr = tables["pr"]
        recall, precision = np.asarray(pr["recall"]), np.asarray(pr["precision"])
        ap = float(np.sum(np.diff(recall) * precision[1:]))
        written.append(plots.pr_figure(recall, precision, ap, outdir / f"{stem}_pr.svg",
                                       title=f"{stem}: precision-recall"))
    if "gate_importance" in tables and len(tables["gate_importance"]):
        importance = tables["gate_importance"].groupby("block", sort=False)["share"].mean()
        written.append(plots.bar_figure(list(importance.index), list(importance.values),
                                        outdir / f"{stem}_gate_importance.svg",
                                        title=f"{stem}: gate gain share", ylabel="Share of gain"))
    if "training_curves" in tables and len(tables["training_curves"]):
        curves = tables["training_curves"]
        first = curves[curves["seed"] == curves["seed"].iloc[0]]
        written.append(plots.line_figure(list(first["epoch"]),
                                         {"train AUC": list(first["train_auc"]), "val AUC": list(first["val_auc"])},
                                         outdir / f"{stem}_training_curves.svg",
                                         title=f"{stem}: deep fusion training curves",
                                         xlabel="Epoch", ylabel="AUC"))
    return written


# Emit report logic
def emit_report(report, formats, outdir):
    """Write <experiment>_<name>.<ext> files; returns the written paths in order."""
    formats = tuple(formats)
    unknown = sorted(set(formats) - set(FORMATS))
    if unknown:
        raise ConfigError(f"unknown report formats {unknown}")
    outdir = Path(outdir)
    written = []
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        if "json" in formats:
            path = outdir / f"{report.experiment}_{report.kind}.json"
            path.write_text(json.dumps(report_to_payload(report), sort_keys=True, indent=2, allow_nan=False) + "\n",
                            encoding="utf-8")
            written.append(path)
        if "csv" in formats:
            for name, frame in report.tables.items():
                written.append(write_csv(frame, outdir / f"{report.experiment}_{name}.csv"))
        if "svg" in formats:
            written.extend(_figures(report, outdir))
    except OSError as exc:
        raise OutputError(f"cannot write report files to {outdir}: {exc}") from exc
    for note in report.notes:
        logger.info("%s: %s", report.experiment, note)
    return written


# Results store

def store_report(report, config_payload):
    """Record a run, its cell timings and the report payload; returns the run id."""
    from sepsis_fusion.models import CellResult, ExperimentRun, StoredReport

    with Session() as session:
        run = ExperimentRun(
            name=report.experiment,
            kind=report.kind,
            config_json=json.dumps(config_payload, sort_keys=True),
            config_hash=content_hash(config_payload),
            wall_time=report.wall_time,
        )
        for cell in report.cells:
            metrics = {k: _plain(v) for k, v in cell.items() if k not in ("variant", "seed", "task", "status",
                                                                          "error", "wall_time")}
            run.cells.append(CellResult(
                variant=cell["variant"], seed=int(cell["seed"]), task=cell["task"], status=cell["status"],
                metrics_json=json.dumps(metrics, sort_keys=True), error=cell.get("error"),
                wall_time=cell.get("wall_time"),
            ))
        run.reports.append(StoredReport(
            experiment=report.experiment, report_kind=report.kind,
            payload_json=json.dumps(report_to_payload(report), allow_nan=False),
        ))
        session.add(run)
        session.commit()
        return run.id


def load_stored_reports(run_id=None, experiment=None):
    """Reports of one run (by id, or the latest run of an experiment)."""
    from sepsis_fusion.models import ExperimentRun

    with Session() as session:
        query = session.query(ExperimentRun)
        if run_id is not None:
            run = query.filter_by(id=run_id).first()
        elif experiment is not None:
            run = query.filter_by(name=experiment).order_by(ExperimentRun.id.desc()).first()
        else:
            run = query.order_by(ExperimentRun.id.desc()).first()
        if run is None:
            raise ConfigError("no stored run matches the request")
        return [report_from_payload(json.loads(stored.payload_json)) for stored in run.reports]
