"""Confusion matrices, accuracy / precision / recall / F1, and table and chart emitters."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ClassLabel, DatasetManifest, make_batches
from .models import DISPLAY_NAMES, ConfigurationError, Model, forward
from .tensor import UsageError

TABLE_COLUMNS = ("Model", "Test Accuracy", "Test Precision", "Test Recall", "Test F1-Score")
METRIC_NAMES = ("accuracy", "precision", "recall", "f1")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    classes: tuple[ClassLabel, ...]
    title: str

    def __post_init__(self):
        if not self.classes or len(set(self.classes)) != len(self.classes):
            raise ValueError("task classes must be non-empty and distinct")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    @property
    def positive_index(self) -> int | None:
        """Index of VT for the binary task, whose headline scores are VT-positive."""
        return self.classes.index(ClassLabel.VT) if self.name == "binary" else None


# Classes are kept in code order (NT < NVT < VT < NVR) so subsets preserve relative order.
TASKS = {
    "binary": TaskSpec("binary", (ClassLabel.NT, ClassLabel.VT), "VT vs. NT"),
    "three_class": TaskSpec("three_class", (ClassLabel.NT, ClassLabel.NVT, ClassLabel.VT), "VT vs. NVT vs. NT"),
    "four_class": TaskSpec("four_class", tuple(ClassLabel), "VT vs. NVT vs. NT vs. NVR"),
}
TASK_ALIASES = {"binary": "binary", "two": "binary", "three": "three_class", "three_class": "three_class",
                "four": "four_class", "four_class": "four_class"}


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[TASK_ALIASES[name]]
    except KeyError:
        raise UsageError(f"unknown task {name!r}; expected binary, three or four") from None


def task_for_classes(num_classes: int) -> TaskSpec:
    return {2: TASKS["binary"], 3: TASKS["three_class"], 4: TASKS["four_class"]}[num_classes]


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    counts: np.ndarray

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def one_vs_rest(self, c: int) -> tuple[int, int, int, int]:
        """(TP, FP, FN, TN) for class ``c`` against all others."""
        tp = int(self.counts[c, c])
        fp = int(self.counts[:, c].sum()) - tp
        fn = int(self.counts[c, :].sum()) - tp
        return tp, fp, fn, self.total - tp - fp - fn


def confusion(true_labels: Sequence[int], predicted_labels: Sequence[int], k: int) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    p = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise UsageError(f"label vectors differ in length: {t.size} vs {p.size}")
    if t.size and (t.min() < 0 or p.min() < 0 or t.max() >= k or p.max() >= k):
        raise UsageError(f"labels must lie in [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def _f1(precision: float, recall: float) -> float:
    return _ratio(2 * precision * recall, precision + recall)


@dataclass
class MetricsReport:
    task: str
    model: str
    accuracy: float
    precision: float
    recall: float
    f1: float
    averaging: str
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    confusion: list[list[int]] = field(default_factory=list)
    split: str = "test"

    def row(self) -> tuple[float, float, float, float]:
        return self.accuracy, self.precision, self.recall, self.f1

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> MetricsReport:
        return cls(**json.loads(text))


def metrics(
    cm: ConfusionMatrix,
    averaging: str = "macro",
    positive: int | None = None,
    class_names: Sequence[str] | None = None,
    task: str = "",
    model: str = "",
) -> MetricsReport:
    """Accuracy plus one-vs-rest precision, recall and F1.

    ``macro`` reports the unweighted mean over classes; ``binary`` reports
    the scores of the ``positive`` class.  A zero denominator scores 0.
    """
    if cm.total == 0:
        raise UsageError("confusion matrix is empty")
    names = list(class_names) if class_names is not None else [str(i) for i in range(cm.k)]
    per_class = {}
    for c in range(cm.k):
        tp, fp, fn, _ = cm.one_vs_rest(c)
        p = _ratio(tp, tp + fp)
        r = _ratio(tp, tp + fn)
        per_class[names[c]] = {"precision": p, "recall": r, "f1": _f1(p, r), "support": int(cm.counts[c].sum())}
    accuracy = float(np.trace(cm.counts)) / cm.total
    if averaging == "macro":
        precision = float(np.mean([v["precision"] for v in per_class.values()]))
        recall = float(np.mean([v["recall"] for v in per_class.values()]))
        f1 = float(np.mean([v["f1"] for v in per_class.values()]))
        tag = "macro"
    elif averaging == "binary":
        if positive is None:
            raise UsageError("binary averaging needs a positive class index")
        chosen = per_class[names[positive]]
        precision, recall, f1 = chosen["precision"], chosen["recall"], chosen["f1"]
        tag = f"binary(positive={names[positive]})"
    else:
        raise UsageError(f"unknown averaging mode {averaging!r}")
    return MetricsReport(
        task=task, model=model, accuracy=accuracy, precision=precision, recall=recall, f1=f1,
        averaging=tag, per_class=per_class, confusion=cm.counts.tolist(),
    )


def predict_labels(model: Model, manifest: DatasetManifest, task: TaskSpec, split: str, batch_size: int = 32):
    """Eval-mode argmax predictions and true task indices for one split."""
    truth, pred = [], []
    for batch in make_batches(manifest, split, batch_size, shuffle=False, side=model.spec.input_side,
                              classes=task.classes, dtype=model.parameters()[0].dtype):
        logits = forward(model, batch.pixels, training=False)
        pred.append(np.argmax(logits.data, axis=1))
        truth.append(batch.labels)
    if not truth:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(truth), np.concatenate(pred)


def evaluate(model: Model, manifest: DatasetManifest, task: TaskSpec, split: str = "test",
             batch_size: int = 32) -> MetricsReport:
    if model.spec.num_classes != task.num_classes:
        raise ConfigurationError(
            f"model has {model.spec.num_classes} outputs but task {task.name} has {task.num_classes} classes"
        )
    truth, pred = predict_labels(model, manifest, task, split, batch_size)
    cm = confusion(truth, pred, task.num_classes)
    pos = task.positive_index
    report = metrics(cm, averaging="binary" if pos is not None else "macro", positive=pos,
                     class_names=task.class_names, task=task.name,
                     model=DISPLAY_NAMES.get(model.spec.name, model.spec.name))
    report.split = split
    return report


# ---------------------------------------------------------------------------
# emitters
# ---------------------------------------------------------------------------

def _check_same_task(reports: Sequence[MetricsReport]) -> None:
    tasks = {r.task for r in reports}
    if len(tasks) > 1:
        raise UsageError(f"reports mix tasks: {sorted(tasks)}")


def emit_table(reports: Sequence[MetricsReport], fmt: str = "markdown") -> str:
    """One row per model with 4-decimal accuracy, precision, recall, F1."""
    _check_same_task(reports)
    rows = [[r.model] + [f"{v:.4f}" for v in r.row()] for r in reports]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TABLE_COLUMNS)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(TABLE_COLUMNS) + " |", "|" + "|".join(["---"] * len(TABLE_COLUMNS)) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    raise UsageError(f"unknown table format {fmt!r}")


_COLORS = ("#4c72b0", "#dd8452", "#55a868", "#c44e52")


def render_chart(reports: Sequence[MetricsReport], title: str = "") -> str:
    """Grouped bar chart (models x metrics) as a standalone SVG document."""
    if not reports:
        raise UsageError("a chart needs at least one report")
    _check_same_task(reports)
    width, height = 640, 400
    left, right, top, bottom = 60, 150, 40, 60
    plot_w, plot_h = width - left - right, height - top - bottom
    group_w = plot_w / len(reports)
    bar_w = group_w * 0.8 / len(METRIC_NAMES)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="14">{_esc(title)}</text>')
    for tick in range(6):
        v = tick / 5
        y = top + plot_h * (1 - v)
        out.append(f'<line x1="{left}" y1="{y:.1f}" x2="{left + plot_w}" y2="{y:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end" font-size="11">{v:.1f}</text>')
    out.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>')
    out.append(f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>')
    for gi, report in enumerate(reports):
        gx = left + gi * group_w + group_w * 0.1
        for mi, value in enumerate(report.row()):
            v = min(max(value, 0.0), 1.0)
            h = plot_h * v
            out.append(
                f'<rect class="bar" x="{gx + mi * bar_w:.2f}" y="{top + plot_h - h:.2f}" width="{bar_w:.2f}" '
                f'height="{h:.2f}" fill="{_COLORS[mi]}"><title>{_esc(report.model)} {METRIC_NAMES[mi]}: '
                f'{value:.4f}</title></rect>'
            )
        out.append(f'<text x="{left + (gi + 0.5) * group_w:.1f}" y="{top + plot_h + 18}" text-anchor="middle" '
                   f'font-size="12">{_esc(report.model)}</text>')
    out.append(f'<text x="{left + plot_w / 2:.1f}" y="{height - 15}" text-anchor="middle" font-size="12">Model</text>')
    out.append(f'<text x="16" y="{top + plot_h / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {top + plot_h / 2:.1f})">Score</text>')
    lx = left + plot_w + 15
    for mi, name in enumerate(("Accuracy", "Precision", "Recall", "F1-Score")):
        y = top + 10 + mi * 20
        out.append(f'<rect x="{lx}" y="{y - 9}" width="12" height="12" fill="{_COLORS[mi]}"/>')
        out.append(f'<text x="{lx + 18}" y="{y + 1}" font-size="12">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_chart(reports: Sequence[MetricsReport], path, title: str = "") -> None:
    Path(path).write_text(render_chart(reports, title), encoding="utf-8")


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
