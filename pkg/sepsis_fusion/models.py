from datetime import datetime
import json

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import relationship

from sepsis_fusion import Base


class ExperimentRun(Base):
    __tablename__ = "experiment_run"

    id = Column(Integer, primary_key=True)
    name = Column(String(200), nullable=False)
    kind = Column(String(50), nullable=False)  # ablation, sweep, calibration
    config_json = Column(Text, nullable=False)
    config_hash = Column(String(64), nullable=False)
    wall_time = Column(Float)
    created_at = Column(DateTime, default=datetime.now)

    cells = relationship("CellResult", backref="run", cascade="all, delete", passive_deletes=True)
    reports = relationship("StoredReport", backref="run", cascade="all, delete", passive_deletes=True)


class CellResult(Base):
    __tablename__ = "cell_result"

    id = Column(Integer, primary_key=True)
    variant = Column(String(50), nullable=False)
    seed = Column(Integer, nullable=False)
    task = Column(String(50), nullable=False)
    status = Column(String(20), nullable=False)
    metrics_json = Column(Text, nullable=False)
    error = Column(Text)
    wall_time = Column(Float)
    created_at = Column(DateTime, default=datetime.now)

    run_id = Column(Integer, ForeignKey("experiment_run.id", ondelete="CASCADE"), nullable=False)

    @property
    def metrics(self):
        return json.loads(self.metrics_json)


class StoredReport(Base):
    __tablename__ = "stored_report"

    id = Column(Integer, primary_key=True)
    experiment = Column(String(200), nullable=False)
    report_kind = Column(String(50), nullable=False)
    payload_json = Column(Text, nullable=False)  # tables and notes, see reporting.report_to_payload
    created_at = Column(DateTime, default=datetime.now)

    run_id = Column(Integer, ForeignKey("experiment_run.id", ondelete="CASCADE"), nullable=False)
