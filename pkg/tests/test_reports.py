import csv
import json
from pathlib import Path

import pytest

from cospace.reports import (
    render_bandwidth,
    render_latency_table,
    render_model_metrics,
    render_sweep_table,
    run_privacy_audit,
    write_latency_files,
    write_model_metrics,
    write_sweep_csv,
)
from cospace.sim import LatencyReport, StatRow

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

TABLE2_LABELS = [
    "Transcription", "Initial Stage", "User Confirmation", "Text to Speech",
    "Refined Stage", "Local Processing", "Communication",
]


def sample_report():
    report = LatencyReport()
    for key in (
        "transcription", "initialStage", "userConfirmation", "textToSpeech",
        "refinedStage", "localProcessing", "communication",
        "totalWithoutConfirmation", "responseSync", "interactionSync",
    ):
        report.rows[key] = StatRow(mean=0.1, std=0.01, count=4)
    return report


def test_latency_table_has_decomposition_row_labels():
    table = render_latency_table(sample_report())
    for label in TABLE2_LABELS:
        assert label in table
    assert "(stub)" in table  # transcription and TTS are stubbed rows


def test_latency_files_written(tmp_path):
    write_latency_files(sample_report(), tmp_path)
    assert (tmp_path / "latency.txt").exists()
    payload = json.loads((tmp_path / "latency.json").read_bytes())
    assert payload["initialStage"]["count"] == 4


def test_sweep_csv_header_and_rows(tmp_path):
    rows = [(0.5, 0.1, 0.012), (1.0, 0.1, 0.015)]
    path = tmp_path / "sweep.csv"
    write_sweep_csv(rows, path)
    with open(path, newline="") as fh:
        got = list(csv.reader(fh))
    assert got[0] == ["distance", "tagSize", "meanInconsistency"]
    assert len(got) == 3
    assert got[1][0] == "0.5"


def test_sweep_csv_empty_is_header_only(tmp_path):
    path = tmp_path / "empty.csv"
    write_sweep_csv([], path)
    with open(path, newline="") as fh:
        got = list(csv.reader(fh))
    assert got == [["distance", "tagSize", "meanInconsistency"]]
    assert "distance" in render_sweep_table([])


def test_model_metrics_table_mirrors_accuracy_columns(tmp_path):
    metrics = {
        "mock": {
            "classificationAccuracy": 0.8933,
            "cropRecall": 0.7143,
            "cropFallout": 0.0,
            "generationTime": 2.415,
        }
    }
    table = render_model_metrics(metrics)
    assert "CA (%)" in table and "CR (%)" in table and "CF (%)" in table and "GT (s)" in table
    assert "89.33" in table and "71.43" in table
    write_model_metrics(metrics, tmp_path)
    saved = json.loads((tmp_path / "model_metrics.json").read_text())
    assert saved["mock"]["classificationAccuracy"] == pytest.approx(0.8933)


def test_privacy_audit_summary_direction_and_table():
    summary = run_privacy_audit(SCENARIOS / "audit_trials.yaml")
    assert summary.trials == 50
    assert summary.cropped["highlySensitive"] < summary.original["highlySensitive"]
    assert summary.original["highlySensitive"] > 0.5  # corpus seeds sensitive objects
    table = summary.table()
    assert "Original Frames" in table and "Cropped Frames" in table


def test_bandwidth_render():
    account = {
        "durationS": 2.0,
        "bytesToClients": {"control": 100, "sync": 960},
        "bytesToServer": {"control": 50, "sync": 480},
        "bytesPerSecondToClients": {"control": 50.0, "sync": 480.0},
        "recordsForwardedPerObject": {1: 20},
        "recordsPerSecondPerObject": {1: 10.0},
    }
    text = render_bandwidth(account)
    assert "object 1: 10.0 records/s" in text
