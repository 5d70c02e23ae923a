"""
Run ledger: runs, metric history and evaluation rows in SQLite
"""

import json

import pytest

from database import DatabaseManager
from evaluation import ResultRow
from train import MetricRecord


@pytest.fixture
def ledger(tmp_path):
    return DatabaseManager(f"sqlite:///{tmp_path / 'nested' / 'ledger.db'}")


def test_database_file_and_parents_are_created(tmp_path, ledger):
    assert (tmp_path / "nested" / "ledger.db").exists()


def test_run_lifecycle(ledger):
    run_id = ledger.start_run("train", "/runs/a", seed=3, config_json="{}", method="dsu", dataset="gsc12")
    runs = ledger.list_runs()
    assert len(runs) == 1 and runs[0].status == "RUNNING"
    ledger.finish_run(run_id)
    done = ledger.list_runs(command="train")[0]
    assert done.status == "COMPLETED"
    assert done.completed_at is not None
    assert ledger.list_runs(command="eval") == []


def test_failed_run_keeps_the_error(ledger):
    run_id = ledger.start_run("eval", "/runs/b", seed=0, config_json="{}")
    ledger.finish_run(run_id, status="FAILED", error_message="DataError: empty dataset")
    run = ledger.list_runs()[0]
    assert run.status == "FAILED"
    assert "empty dataset" in run.error_message


def test_finishing_an_unknown_run_is_harmless(ledger):
    ledger.finish_run(999)
    assert ledger.list_runs() == []


def test_metrics_and_results(ledger):
    run_id = ledger.start_run("train", "/runs/c", seed=1, config_json="{}")
    records = [MetricRecord(epoch=0, split="train", loss=1.2, macro_f1=40.0, lr=0.01),
               MetricRecord(epoch=0, split="validation", loss=1.1, macro_f1=45.5, lr=0.01)]
    assert ledger.add_metrics(run_id, records) == 2
    assert [m.split for m in ledger.get_metrics(run_id)] == ["train", "validation"]

    rows = [ResultRow(method="dsu", p=0.5, dataset="gsc12", condition="wgn", snr_db=snr, seed=1,
                      macro_f1=f1, per_class_f1={"yes": f1})
            for snr, f1 in [(0.0, 80.0), (-5.0, 70.0)]]
    assert ledger.add_results(run_id, rows) == 2
    stored = ledger.list_results(run_id=run_id, method="dsu")
    assert [r.snr_db for r in stored] == [0.0, -5.0]
    assert json.loads(stored[0].per_class_f1_json) == {"yes": 80.0}
    assert ledger.list_results(dataset="libri11") == []


def test_summary(ledger):
    first = ledger.start_run("sweep", "/runs/d", seed=0, config_json="{}")
    second = ledger.start_run("sweep", "/runs/e", seed=1, config_json="{}")
    ledger.add_results(first, [ResultRow(method="none", p=0.0, dataset="gsc12", condition="wgn", snr_db=0.0,
                                         seed=0, macro_f1=60.0)])
    ledger.add_results(second, [ResultRow(method="dsu", p=0.5, dataset="gsc12", condition="wgn", snr_db=0.0,
                                          seed=1, macro_f1=65.0)])
    ledger.finish_run(first)
    ledger.finish_run(second, status="FAILED")
    summary = ledger.summary()
    assert (summary.runs, summary.completed, summary.failed, summary.results) == (2, 1, 1, 2)
    assert summary.best_by_condition == {"gsc12/wgn@0dB": 65.0}


def test_run_dirs_are_unique(ledger):
    ledger.start_run("train", "/runs/same", seed=0, config_json="{}")
    with pytest.raises(Exception):
        ledger.start_run("train", "/runs/same", seed=0, config_json="{}")
