"""Report rendering: latency tables, sweep CSVs, audit summaries.

Column orders mirror the measurement tables the system is usually
compared against, so runs can sit side by side with published numbers.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import yaml

from .errors import ScenarioError
from .privacy import (
    MockDetector,
    PrivacyLevel,
    PrivacyPolicy,
    Rect,
    parse_frame_corpus,
    privacy_audit,
)
from .sim import LatencyReport

LATENCY_ROW_LABELS = [
    ("transcription", "Transcription"),
    ("initialStage", "Initial Stage"),
    ("userConfirmation", "User Confirmation"),
    ("textToSpeech", "Text to Speech"),
    ("refinedStage", "Refined Stage"),
    ("localProcessing", "Local Processing"),
    ("communication", "Communication"),
    ("totalWithoutConfirmation", "Total w/o Confirm"),
    ("responseSync", "Response Synchronization"),
    ("interactionSync", "Interaction Synchronization"),
]

STUBBED_KEYS = {"transcription", "textToSpeech"}


def render_latency_table(report: LatencyReport) -> str:
    lines = [f"{'Latency Type':<28} {'Value (s)':>20} {'n':>6}"]
    lines.append("-" * 56)
    for key, label in LATENCY_ROW_LABELS:
        row = report.rows.get(key)
        if row is None:
            continue
        value = f"{row.mean:.3f} +/- {row.std:.3f}"
        if key in STUBBED_KEYS:
            value += " (stub)"
        lines.append(f"{label:<28} {value:>20} {row.count:>6}")
    return "\n".join(lines) + "\n"


def write_sweep_csv(rows: list[tuple[float, float, float]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["distance", "tagSize", "meanInconsistency"])
        for distance, tag_size, mean in rows:
            writer.writerow([distance, tag_size, f"{mean:.6f}"])


def render_sweep_table(rows: list[tuple[float, float, float]]) -> str:
    lines = [f"{'distance (m)':>12} {'tag size (m)':>12} {'mean inconsistency (m)':>24}"]
    for distance, tag_size, mean in rows:
        lines.append(f"{distance:>12.2f} {tag_size:>12.2f} {mean:>24.4f}")
    return "\n".join(lines) + "\n"


def write_latency_files(report: LatencyReport, out_dir) -> None:
    from pathlib import Path

    from .protocol import dumps_canonical

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "latency.txt", "w", encoding="utf-8") as fh:
        fh.write(render_latency_table(report))
    with open(out / "latency.json", "wb") as fh:
        fh.write(dumps_canonical(report.to_payload()))


def write_model_metrics(metrics: dict[str, dict[str, float]], out_dir) -> None:
    """Structured accuracy report (CA, CR, CF, GT columns) as text + JSON."""
    import json
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "model_metrics.txt", "w", encoding="utf-8") as fh:
        fh.write(render_model_metrics(metrics))
    with open(out / "model_metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)


def render_model_metrics(metrics: dict[str, dict[str, float]]) -> str:
    """Accuracy table: one column block per model, CA/CR/CF/GT rows."""
    models = list(metrics)
    header = f"{'Metric':<10}" + "".join(f"{m:>12}" for m in models)
    rows = [header, "-" * len(header)]
    for key, label, scale in (
        ("classificationAccuracy", "CA (%)", 100.0),
        ("cropRecall", "CR (%)", 100.0),
        ("cropFallout", "CF (%)", 100.0),
        ("generationTime", "GT (s)", 1.0),
    ):
        cells = "".join(
            f"{metrics[m].get(key, 0. ) * scale:>12.2f}" for m in models
        )
        rows.append(f"{label:<10}{cells}")
    return "\n".join(rows) + "\n"


@dataclass(frozen=True)
class AuditSummary:
    """Fraction of trials with at least one object present, per level."""

    original: dict[str, float]
    cropped: dict[str, float]
    trials: int

    def table(self) -> str:
        lines = [f"{'Privacy Level':<18} {'Original Frames':>16} {'Cropped Frames':>16}"]
        lines.append("-" * 52)
        for level in PrivacyLevel:
            lines.append(
                f"{level.value:<18} "
                f"{self.original[level.value] * 100:>15.2f}% "
                f"{self.cropped[level.value] * 100:>15.2f}%"
            )
        return "\n".join(lines) + "\n"


def run_privacy_audit(trials_path, policy: PrivacyPolicy | None = None) -> AuditSummary:
    """Aggregate before/after presence over an audit trial spec file."""
    from pathlib import Path

    trials_path = Path(trials_path)
    with open(trials_path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or doc.get("version") != 1:
        raise ScenarioError("audit trials file must be a mapping with version: 1")
    detector = MockDetector(
        parse_frame_corpus((trials_path.parent / doc["corpus"]).read_text(encoding="utf-8"))
    )
    policy = policy or PrivacyPolicy()
    counts_orig = {level: 0 for level in PrivacyLevel}
    counts_crop = {level: 0 for level in PrivacyLevel}
    trials = doc.get("trials", [])
    if not trials:
        raise ScenarioError("audit trials file has no trials")
    for trial in trials:
        detections = detector.detect(trial["frame"])
        crop = trial.get("crop")
        rect = Rect(*crop) if crop is not None else None
        before = privacy_audit(detections, None, policy)
        after = privacy_audit(detections, rect, policy)
        for level in PrivacyLevel:
            counts_orig[level] += int(before.for_level(level))
            counts_crop[level] += int(after.for_level(level))
    n = len(trials)
    return AuditSummary(
        original={lv.value: counts_orig[lv] / n for lv in PrivacyLevel},
        cropped={lv.value: counts_crop[lv] / n for lv in PrivacyLevel},
        trials=n,
    )


def render_bandwidth(account: dict) -> str:
    out = io.StringIO()
    out.write(f"duration: {account['durationS']:.3f} s\n")
    for direction in ("bytesToClients", "bytesToServer"):
        for channel, total in account[direction].items():
            out.write(f"{direction}.{channel}: {total} B\n")
    for oid, rate in sorted(account["recordsPerSecondPerObject"].items()):
        out.write(f"object {oid}: {rate:.1f} records/s forwarded\n")
    return out.getvalue()
