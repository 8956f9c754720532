"""Report data files behind the figures: KDE curves, energy and layer
histograms, transfer matrices, calibration rows, yes-ratio bars.

Everything is written atomically (temp file + rename) as CSV or
line-delimited JSON; plotting is out of scope.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from collections import Counter

import numpy as np

from .evalharness import MetricBundle, MmeScore, TransferCounts, format_percent
from .numerics import gaussian_kde


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return out.getvalue()


def write_metrics_csv(path, bundles: dict[str, MetricBundle], parse_rule: str) -> None:
    rows = [
        [
            label,
            format_percent(b.accuracy),
            format_percent(b.precision),
            format_percent(b.recall),
            format_percent(b.specificity),
            format_percent(b.f1),
            format_percent(b.yes_ratio),
            format_percent(b.gap),
            b.tp,
            b.fp,
            b.tn,
            b.fn,
            b.unparsed,
            ";".join(sorted(b.degenerate)),
            parse_rule,
        ]
        for label, b in bundles.items()
    ]
    atomic_write_text(
        path,
        _csv_text(
            [
                "label",
                "accuracy",
                "precision",
                "recall",
                "specificity",
                "f1",
                "yes_ratio",
                "gap",
                "tp",
                "fp",
                "tn",
                "fn",
                "unparsed",
                "degenerate",
                "parse_rule",
            ],
            rows,
        ),
    )


def write_metrics_jsonl(path, bundles: dict[str, MetricBundle], parse_rule: str) -> None:
    lines = []
    for label, b in bundles.items():
        lines.append(
            json.dumps(
                {
                    "label": label,
                    "accuracy": b.accuracy,
                    "precision": b.precision,
                    "recall": b.recall,
                    "specificity": b.specificity,
                    "f1": b.f1,
                    "yes_ratio": b.yes_ratio,
                    "gap": b.gap,
                    "counts": {
                        "tp": b.tp,
                        "fp": b.fp,
                        "tn": b.tn,
                        "fn": b.fn,
                        "unparsed": b.unparsed,
                    },
                    "degenerate": sorted(b.degenerate),
                    "parse_rule": parse_rule,
                },
                sort_keys=True,
            )
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_mme_csv(path, score: MmeScore) -> None:
    rows = [
        [
            s.subtask,
            s.questions,
            s.images,
            s.correct,
            s.both_correct,
            f"{s.acc:.2f}",
            f"{s.acc_plus:.2f}",
            f"{s.score:.2f}",
        ]
        for s in score.subtasks
    ]
    rows.append(["total", "", "", "", "", "", "", f"{score.total:.2f}"])
    atomic_write_text(
        path,
        _csv_text(
            ["subtask", "questions", "images", "correct", "both_correct", "acc", "acc_plus", "score"],
            rows,
        ),
    )


def write_mme_jsonl(path, score: MmeScore) -> None:
    lines = [
        json.dumps(
            {
                "subtask": s.subtask,
                "questions": s.questions,
                "images": s.images,
                "correct": s.correct,
                "both_correct": s.both_correct,
                "acc": s.acc,
                "acc_plus": s.acc_plus,
                "score": s.score,
            },
            sort_keys=True,
        )
        for s in score.subtasks
    ]
    lines.append(json.dumps({"subtask": "total", "score": score.total}, sort_keys=True))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_kde_csv(path, samples_by_verdict: dict[str, list[float]], grid_points: int = 201) -> None:
    """Confidence KDE per verdict on a [0, 1] grid, plus the raw samples."""
    grid = np.linspace(0.0, 1.0, grid_points)
    rows = []
    for verdict in sorted(samples_by_verdict):
        samples = samples_by_verdict[verdict]
        density = gaussian_kde(samples, grid)
        rows.extend([verdict, f"{x:.6f}", f"{d:.10g}"] for x, d in zip(grid, density))
    atomic_write_text(path, _csv_text(["verdict", "confidence", "density"], rows))


def write_confidence_samples_csv(path, samples_by_verdict: dict[str, list[float]]) -> None:
    rows = [
        [verdict, f"{value:.10g}"]
        for verdict in sorted(samples_by_verdict)
        for value in samples_by_verdict[verdict]
    ]
    atomic_write_text(path, _csv_text(["verdict", "confidence"], rows))


def layer_selection_histogram(records) -> Counter:
    counts: Counter = Counter()
    for record in records:
        counts.update(step.chosen_layer for step in record.steps)
    return counts


def write_layer_histogram_csv(path, records, num_layers: int | None = None) -> None:
    counts = layer_selection_histogram(records)
    top = max(counts, default=-1) + 1
    layers = range(num_layers if num_layers is not None else top)
    rows = [[layer, counts.get(layer, 0)] for layer in layers]
    atomic_write_text(path, _csv_text(["layer", "selections"], rows))


def write_energy_samples_csv(path, records) -> None:
    """Long-format per-step, per-layer energies from energy-strategy records."""
    rows = []
    for ri, record in enumerate(records):
        for si, step in enumerate(record.steps):
            if step.energies is None:
                continue
            rows.extend(
                [ri, si, layer, f"{e:.10g}"] for layer, e in enumerate(step.energies)
            )
    atomic_write_text(path, _csv_text(["record", "step", "layer", "energy"], rows))


def write_transfer_csv(path, counts: TransferCounts, first: str = "with_visual",
                       second: str = "without_visual") -> None:
    rows = [
        ["yes", "yes", counts.yes_yes],
        ["yes", "no", counts.yes_no],
        ["no", "yes", counts.no_yes],
        ["no", "no", counts.no_no],
    ]
    atomic_write_text(path, _csv_text([first, second, "count"], rows))


def write_calibration_csv(path, rows, flags) -> None:
    table = [
        [
            r.verdict,
            f"{r.accuracy:.6f}",
            f"{r.mean_confidence:.6f}",
            f"{r.calibration_gap:.6f}",
            r.count,
        ]
        for r in rows
    ]
    for flag in flags:
        table.append([f"# {flag}", "", "", "", ""])
    atomic_write_text(
        path, _csv_text(["verdict", "accuracy", "mean_confidence", "calibration_gap", "count"], table)
    )


def write_yes_ratio_csv(path, bundles: dict[str, MetricBundle]) -> None:
    rows = [
        [label, format_percent(b.yes_ratio), format_percent(b.gap)]
        for label, b in bundles.items()
    ]
    atomic_write_text(path, _csv_text(["label", "yes_ratio", "gap"], rows))
