from sqlalchemy import create_engine
from sqlalchemy.engine import make_url
from sqlalchemy.orm import sessionmaker
from models import Base, Run, MetricRow, EvalResultRow, RunResponse, EvalResultResponse, LedgerSummary
from config import config
from typing import List, Optional, Sequence
from datetime import datetime
from pathlib import Path
import json
import logging

# Logger setup
logger = logging.getLogger(__name__)

def make_engine(database_url: str):
    """Engine for the ledger; sqlite parent directories are created on demand"""
    url = make_url(database_url)
    connect_args = {}
    if url.drivername.startswith("sqlite"):
        connect_args["check_same_thread"] = False
        if url.database and url.database != ":memory:":
            Path(url.database).parent.mkdir(parents=True, exist_ok=True)
    return create_engine(database_url, connect_args=connect_args)

class DatabaseManager:
    """Run ledger: one Run per CLI invocation, with its metric history and evaluation rows"""

    def __init__(self, database_url: Optional[str] = None):
        self.database_url = database_url or config.DATABASE_URL
        self.engine = make_engine(self.database_url)
        self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)
        self.create_tables()

    def create_tables(self):
        """Create all database tables"""
        Base.metadata.create_all(bind=self.engine)

    def start_run(self, command: str, run_dir: str, seed: int, config_json: str,
                  method: Optional[str] = None, dataset: Optional[str] = None) -> int:
        db = self.SessionLocal()
        try:
            run = Run(command=command, run_dir=str(run_dir), seed=seed, config_json=config_json,
                      method=method, dataset=dataset, status="RUNNING")
            db.add(run)
            db.commit()
            db.refresh(run)
            logger.info(f"Ledger: started run {run.id} ({command}) in {run_dir}")
            return run.id
        except Exception as e:
            logger.error(f"Error recording run start: {e}")
            db.rollback()
            raise
        finally:
            db.close()

    def finish_run(self, run_id: int, status: str = "COMPLETED", error_message: Optional[str] = None):
        db = self.SessionLocal()
        try:
            run = db.get(Run, run_id)
            if run is None:
                logger.warning(f"Ledger: run {run_id} not found")
                return
            run.status = status
            run.error_message = error_message
            run.completed_at = datetime.now()
            db.commit()
        except Exception as e:
            logger.error(f"Error finishing run {run_id}: {e}")
            db.rollback()
            raise
        finally:
            db.close()

    def add_metrics(self, run_id: int, records: Sequence) -> int:
        """Store train/validation MetricRecords for a run"""
        db = self.SessionLocal()
        try:
            for r in records:
                db.add(MetricRow(run_id=run_id, epoch=r.epoch, split=r.split, loss=r.loss,
                                 macro_f1=r.macro_f1, lr=r.lr))
            db.commit()
            return len(records)
        except Exception as e:
            logger.error(f"Error storing metrics for run {run_id}: {e}")
            db.rollback()
            raise
        finally:
            db.close()

    def add_results(self, run_id: int, rows: Sequence) -> int:
        """Store evaluation ResultRows for a run"""
        db = self.SessionLocal()
        try:
            for row in rows:
                db.add(EvalResultRow(run_id=run_id, method=row.method, p=row.p, dataset=row.dataset,
                                     condition=row.condition, snr_db=row.snr_db, shifted=row.shifted,
                                     seed=row.seed, macro_f1=row.macro_f1,
                                     per_class_f1_json=json.dumps(row.per_class_f1, sort_keys=True)))
            db.commit()
            return len(rows)
        except Exception as e:
            logger.error(f"Error storing results for run {run_id}: {e}")
            db.rollback()
            raise
        finally:
            db.close()

    def list_runs(self, limit: int = 50, command: Optional[str] = None) -> List[RunResponse]:
        db = self.SessionLocal()
        try:
            query = db.query(Run)
            if command:
                query = query.filter(Run.command == command)
            runs = query.order_by(Run.id.desc()).limit(limit).all()
            return [RunResponse.model_validate(r) for r in runs]
        finally:
            db.close()

    def list_results(self, run_id: Optional[int] = None, method: Optional[str] = None,
                     dataset: Optional[str] = None) -> List[EvalResultResponse]:
        db = self.SessionLocal()
        try:
            query = db.query(EvalResultRow)
            if run_id is not None:
                query = query.filter(EvalResultRow.run_id == run_id)
            if method:
                query = query.filter(EvalResultRow.method == method)
            if dataset:
                query = query.filter(EvalResultRow.dataset == dataset)
            rows = query.order_by(EvalResultRow.id).all()
            return [EvalResultResponse.model_validate(r) for r in rows]
        finally:
            db.close()

    def get_metrics(self, run_id: int) -> List[MetricRow]:
        db = self.SessionLocal()
        try:
            return db.query(MetricRow).filter(MetricRow.run_id == run_id).order_by(MetricRow.id).all()
        finally:
            db.close()

    def summary(self) -> LedgerSummary:
        db = self.SessionLocal()
        try:
            best = {}
            for row in db.query(EvalResultRow).all():
                key = f"{row.dataset}/{row.condition}" + (f"@{row.snr_db:g}dB" if row.snr_db is not None else "")
                best[key] = max(best.get(key, float("-inf")), row.macro_f1)
            return LedgerSummary(
                runs=db.query(Run).count(),
                completed=db.query(Run).filter(Run.status == "COMPLETED").count(),
                failed=db.query(Run).filter(Run.status == "FAILED").count(),
                results=db.query(EvalResultRow).count(),
                best_by_condition=best,
            )
        finally:
            db.close()
