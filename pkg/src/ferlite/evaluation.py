"""Metrics and report rendering: confusion matrices, per-class
precision/recall/F1, comparison tables, and learning-curve exports.

All printed values are rounded half-up at the displayed precision.
Prior-work comparison rows ship as a packaged data file of cited values
and are never recomputed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .controller import EpochRecord


@dataclass(frozen=True)
class ConfusionMatrix:
    """K x K counts; rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class ClassReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float


def confusion(
    preds: Sequence[int], truths: Sequence[int], num_classes: int
) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {truths.shape}")
    for name, values in (("preds", preds), ("truths", truths)):
        if values.size and (values.min() < 0 or values.max() >= num_classes):
            raise ValueError(f"{name} contain labels outside 0..{num_classes - 1}")
    flat = truths * num_classes + preds
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    matrix = counts.reshape(num_classes, num_classes)
    matrix.setflags(write=False)
    return ConfusionMatrix(counts=matrix)


def report(matrix: ConfusionMatrix) -> ClassReport:
    """Per-class P/R/F1 plus overall accuracy and unweighted macro means.

    Precision of an unpredicted class is 0 by convention; F1 is 0 when
    P + R = 0.
    """
    counts = matrix.counts.astype(np.float64)
    if matrix.total == 0:
        raise ValueError("confusion matrix is empty")
    diag = np.diag(counts)
    col_sums = counts.sum(axis=0)
    row_sums = counts.sum(axis=1)
    precision = np.divide(diag, col_sums, out=np.zeros_like(diag), where=col_sums > 0)
    recall = np.divide(diag, row_sums, out=np.zeros_like(diag), where=row_sums > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(diag), where=pr > 0)
    return ClassReport(
        precision=precision,
        recall=recall,
        f1=f1,
        support=matrix.counts.sum(axis=1),
        accuracy=float(diag.sum() / matrix.total),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
    )


def normalize_rows(matrix: ConfusionMatrix) -> np.ndarray:
    """Rows divided by their sums (zero rows stay zero); diagonal = recall."""
    counts = matrix.counts.astype(np.float64)
    row_sums = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, row_sums, out=np.zeros_like(counts), where=row_sums > 0)


def round_half_up(value: float, ndigits: int) -> float:
    quantum = Decimal(1).scaleb(-ndigits)
    return float(Decimal(repr(float(value))).quantize(quantum, rounding=ROUND_HALF_UP))


def format_percent(fraction: float, ndigits: int = 2) -> str:
    return f"{round_half_up(fraction * 100.0, ndigits):.{ndigits}f}%"


def load_prior_results() -> list[dict]:
    text = resources.files("ferlite.data").joinpath("prior_results.json").read_text()
    return json.loads(text)


def _table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [
        max(len(str(headers[i])), *(len(str(row[i])) for row in rows)) if rows else len(headers[i])
        for i in range(len(headers))
    ]
    def fmt(cells: Sequence[str]) -> str:
        return "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(row) for row in rows)
    return "\n".join(lines) + "\n"


def render_tables(
    class_report: ClassReport,
    metadata: dict,
    prior_rows: list[dict] | None = None,
) -> dict[str, str]:
    """Render the performance, per-class, and comparison tables.

    metadata keys used: class_names (list), test_loss (float or None),
    params_total, params_trainable, run_label.
    """
    k = len(class_report.precision)
    class_names = metadata.get("class_names") or [f"class_{i}" for i in range(k)]

    perf_rows = [["Test accuracy", format_percent(class_report.accuracy)]]
    test_loss = metadata.get("test_loss")
    perf_rows.append(
        ["Test loss", f"{round_half_up(test_loss, 4):.4f}" if test_loss is not None else "see logs"]
    )
    if metadata.get("params_total") is not None:
        perf_rows.append(["Parameters (total)", f"{metadata['params_total']:,}"])
    if metadata.get("params_trainable") is not None:
        perf_rows.append(["Parameters (trainable)", f"{metadata['params_trainable']:,}"])
    performance = _table(["Metric", "Value"], perf_rows)

    def fmt2(value: float) -> str:
        return f"{round_half_up(value, 2):.2f}"

    per_class_rows = [
        [class_names[i], fmt2(class_report.precision[i]), fmt2(class_report.recall[i]),
         fmt2(class_report.f1[i]), str(int(class_report.support[i]))]
        for i in range(k)
    ]
    per_class_rows.append(
        ["Overall", fmt2(class_report.macro_precision), fmt2(class_report.macro_recall),
         fmt2(class_report.macro_f1), str(int(class_report.support.sum()))]
    )
    per_class = _table(["Class", "Precision", "Recall", "F1", "Support"], per_class_rows)

    comparison_rows = [
        [row["model"], f"{row['accuracy']}", f"{row['params_m']}", row["source"]]
        for row in (prior_rows or [])
    ]
    params_m = metadata.get("params_total")
    comparison_rows.append(
        [
            metadata.get("run_label", "this run"),
            f"{round_half_up(class_report.accuracy * 100.0, 2):.2f}",
            f"{round_half_up(params_m / 1e6, 1):.1f}" if params_m is not None else "-",
            "this run",
        ]
    )
    comparison = _table(["Model", "Accuracy (%)", "Params (M)", "Source"], comparison_rows)

    return {"performance": performance, "per_class": per_class, "comparison": comparison}


def export_curves(
    history: Sequence[EpochRecord],
    out_dir: str | Path,
    phase_boundary_after: int | None = None,
) -> tuple[Path, Path]:
    """Write accuracy and loss curve files (epoch,train,validation rows).

    The phase boundary, when known, is annotated in a leading metadata
    row so plotting tools can mark it.
    """
    if not history:
        raise ValueError("history is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def write(path: Path, train_field: str, val_field: str) -> None:
        lines = []
        if phase_boundary_after is not None:
            lines.append(f"# phase_boundary_after_epoch={phase_boundary_after}")
        lines.append("epoch,train,validation")
        for record in history:
            lines.append(
                f"{record.epoch},{getattr(record, train_field)!r},{getattr(record, val_field)!r}"
            )
        path.write_text("\n".join(lines) + "\n")

    acc_path = out_dir / "curves_accuracy.csv"
    loss_path = out_dir / "curves_loss.csv"
    write(acc_path, "train_acc", "val_acc")
    write(loss_path, "train_loss", "val_loss")
    return acc_path, loss_path


def parse_history_csv(path: str | Path) -> list[EpochRecord]:
    """Read a training-history CSV back into epoch records."""
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != "epoch,phase,lr,train_loss,train_acc,val_loss,val_acc":
        raise ValueError(f"{path}: line 1: bad or missing history header")
    records = []
    for number, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 7:
            raise ValueError(f"{path}: line {number}: expected 7 fields, got {len(parts)}")
        try:
            records.append(
                EpochRecord(
                    epoch=int(parts[0]),
                    phase=parts[1],
                    lr=float(parts[2]),
                    train_loss=float(parts[3]),
                    train_acc=float(parts[4]),
                    val_loss=float(parts[5]),
                    val_acc=float(parts[6]),
                )
            )
        except ValueError as exc:
            raise ValueError(f"{path}: line {number}: {exc}") from None
    return records
