from sqlalchemy import Column, Integer, String, Float, DateTime, Boolean, Text, ForeignKey
from sqlalchemy.orm import declarative_base, relationship
from sqlalchemy.sql import func
from pydantic import BaseModel, ConfigDict
from typing import Optional, Dict
from datetime import datetime

Base = declarative_base()

class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String, nullable=False)  # train, eval, sweep, ...
    run_dir = Column(String, nullable=False, unique=True)
    status = Column(String, default="RUNNING")  # RUNNING, COMPLETED, FAILED
    seed = Column(Integer, nullable=False)
    method = Column(String, nullable=True)  # uncertainty method of the trained / evaluated model
    dataset = Column(String, nullable=True)
    config_json = Column(Text, nullable=False)  # resolved ExperimentConfig
    error_message = Column(Text, nullable=True)
    started_at = Column(DateTime, default=func.now())
    completed_at = Column(DateTime, nullable=True)

    # Relationships
    metrics = relationship("MetricRow", back_populates="run", cascade="all, delete-orphan")
    results = relationship("EvalResultRow", back_populates="run", cascade="all, delete-orphan")

    def __repr__(self):
        return f"<Run(id={self.id}, command='{self.command}', status='{self.status}', run_dir='{self.run_dir}')>"

class MetricRow(Base):
    __tablename__ = "metric_rows"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    epoch = Column(Integer, nullable=False)
    split = Column(String, nullable=False)  # train or validation
    loss = Column(Float, nullable=False)
    macro_f1 = Column(Float, nullable=False)
    lr = Column(Float, nullable=False)

    run = relationship("Run", back_populates="metrics")

class EvalResultRow(Base):
    __tablename__ = "eval_results"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    method = Column(String, nullable=False)
    p = Column(Float, nullable=False)
    dataset = Column(String, nullable=False)
    condition = Column(String, nullable=False)  # clean, wgn, bank, keywords, ...
    snr_db = Column(Float, nullable=True)  # NULL for clean rows
    shifted = Column(Boolean, default=False)
    seed = Column(Integer, nullable=False)
    macro_f1 = Column(Float, nullable=False)
    per_class_f1_json = Column(Text, nullable=True)
    created_at = Column(DateTime, default=func.now())

    run = relationship("Run", back_populates="results")

    def __repr__(self):
        return f"<EvalResultRow(method='{self.method}', condition='{self.condition}', snr_db={self.snr_db}, macro_f1={self.macro_f1:.2f})>"

# Pydantic models for listing the ledger
class RunResponse(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    id: int
    command: str
    run_dir: str
    status: str
    seed: int
    method: Optional[str] = None
    dataset: Optional[str] = None
    error_message: Optional[str] = None
    started_at: datetime
    completed_at: Optional[datetime] = None

class EvalResultResponse(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    id: int
    run_id: int
    method: str
    p: float
    dataset: str
    condition: str
    snr_db: Optional[float] = None
    shifted: bool
    seed: int
    macro_f1: float
    per_class_f1_json: Optional[str] = None

class LedgerSummary(BaseModel):
    runs: int
    completed: int
    failed: int
    results: int
    best_by_condition: Dict[str, float] = {}
