"""Confusion-matrix accumulation, per-class IoU, mIoU, and run comparison.

Classes with an empty IoU denominator are undefined and excluded from the
mean rather than counted as zero; CSV reports carry percentages rounded to
two decimals while internal floats keep full precision.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imagecore import IGNORE_LABEL, FormatError


def new_confusion(n_classes: int) -> np.ndarray:
    if n_classes < 1:
        raise ValueError("need at least one class")
    return np.zeros((n_classes, n_classes), dtype=np.int64)


def accumulate(cm: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Add one prediction/ground-truth pair into ``cm`` (rows = gt).

    Pixels whose ground truth is the ignore label are skipped.
    """
    k = cm.shape[0]
    p = np.asarray(pred)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"pred {p.shape} and gt {g.shape} dims differ")
    mask = g != IGNORE_LABEL
    pv = p[mask].astype(np.int64)
    gv = g[mask].astype(np.int64)
    if pv.size and (pv.min() < 0 or pv.max() >= k):
        raise ValueError(f"prediction label outside [0, {k})")
    if gv.size and (gv.min() < 0 or gv.max() >= k):
        raise ValueError(f"ground-truth label outside [0, {k})")
    counts = np.bincount(gv * k + pv, minlength=k * k).reshape(k, k)
    cm += counts
    return cm


def iou_per_class(cm: np.ndarray) -> np.ndarray:
    """Per-class IoU; classes with empty union come back as NaN."""
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=1) + cm.sum(axis=0) - np.diag(cm)
    out = np.full(cm.shape[0], np.nan)
    defined = union > 0
    out[defined] = tp[defined] / union[defined]
    return out


def miou(cm: np.ndarray) -> float:
    ious = iou_per_class(cm)
    defined = ~np.isnan(ious)
    if not defined.any():
        raise ValueError("no class has a defined IoU")
    return float(ious[defined].mean())


@dataclass(frozen=True)
class ClassResult:
    class_id: int
    class_name: str
    tp: int
    fp: int
    fn: int
    iou: float  # NaN when undefined


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[ClassResult, ...]
    miou: float

    def iou_by_name(self) -> dict[str, float]:
        return {r.class_name: r.iou for r in self.rows}


def report_from_confusion(cm: np.ndarray, class_names: list[str]) -> EvalReport:
    if cm.shape[0] != len(class_names):
        raise ValueError("class name count does not match confusion matrix")
    ious = iou_per_class(cm)
    rows = []
    for c, name in enumerate(class_names):
        tp = int(cm[c, c])
        fp = int(cm[:, c].sum() - cm[c, c])
        fn = int(cm[c, :].sum() - cm[c, c])
        rows.append(ClassResult(c, name, tp, fp, fn, float(ious[c])))
    return EvalReport(rows=tuple(rows), miou=miou(cm))


def _fmt_pct(value: float) -> str:
    return "" if np.isnan(value) else f"{100.0 * value:.2f}"


def write_eval_csv(path: str | Path, report: EvalReport) -> None:
    lines = ["# undefined classes excluded from mIoU; iou in percent"]
    lines.append("class_id,class_name,tp,fp,fn,iou")
    for r in report.rows:
        lines.append(f"{r.class_id},{r.class_name},{r.tp},{r.fp},{r.fn},{_fmt_pct(r.iou)}")
    lines.append(f"mIoU,,,,,{_fmt_pct(report.miou)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_eval_csv(path: str | Path) -> EvalReport:
    rows = []
    miou_val = None
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#") or line.startswith("class_id,"):
            continue
        fields = line.split(",")
        if fields[0] == "mIoU":
            miou_val = float(fields[5]) / 100.0
            continue
        iou = float(fields[5]) / 100.0 if fields[5] else float("nan")
        rows.append(
            ClassResult(int(fields[0]), fields[1], int(fields[2]), int(fields[3]), int(fields[4]), iou)
        )
    if miou_val is None:
        raise FormatError(f"missing mIoU footer in {path!s}")
    return EvalReport(rows=tuple(rows), miou=miou_val)


@dataclass(frozen=True)
class CompareReport:
    class_ids: tuple[int, ...]
    class_names: tuple[str, ...]
    iou_a: tuple[float, ...]
    iou_b: tuple[float, ...]
    moving: tuple[bool, ...]
    miou_a: float
    miou_b: float
    moving_mean_a: float
    moving_mean_b: float

    @property
    def miou_delta(self) -> float:
        return self.miou_b - self.miou_a

    @property
    def moving_mean_delta(self) -> float:
        return self.moving_mean_b - self.moving_mean_a


def compare_runs(
    report_a: EvalReport,
    report_b: EvalReport,
    moving_classes: set[str] | None = None,
) -> CompareReport:
    """Per-class IoU deltas between two runs over the same class set."""
    names_a = [r.class_name for r in report_a.rows]
    names_b = [r.class_name for r in report_b.rows]
    if names_a != names_b:
        raise ValueError(f"class sets differ: {names_a} vs {names_b}")
    moving_classes = moving_classes or set()
    unknown = moving_classes - set(names_a)
    if unknown:
        raise ValueError(f"moving classes not in reports: {sorted(unknown)}")

    moving = tuple(n in moving_classes for n in names_a)
    iou_a = tuple(r.iou for r in report_a.rows)
    iou_b = tuple(r.iou for r in report_b.rows)
    mm_a = _defined_mean([x for x, m in zip(iou_a, moving) if m])
    mm_b = _defined_mean([x for x, m in zip(iou_b, moving) if m])
    return CompareReport(
        class_ids=tuple(r.class_id for r in report_a.rows),
        class_names=tuple(names_a),
        iou_a=iou_a,
        iou_b=iou_b,
        moving=moving,
        miou_a=report_a.miou,
        miou_b=report_b.miou,
        moving_mean_a=mm_a,
        moving_mean_b=mm_b,
    )


def _defined_mean(values: list[float]) -> float:
    defined = [v for v in values if not np.isnan(v)]
    return float(np.mean(defined)) if defined else float("nan")


def write_compare_csv(path: str | Path, cmp: CompareReport) -> None:
    lines = ["class_id,class_name,iou_a,iou_b,delta,moving"]
    for i in range(len(cmp.class_ids)):
        a, b = cmp.iou_a[i], cmp.iou_b[i]
        delta = "" if (np.isnan(a) or np.isnan(b)) else f"{100.0 * (b - a):.2f}"
        lines.append(
            f"{cmp.class_ids[i]},{cmp.class_names[i]},{_fmt_pct(a)},{_fmt_pct(b)},"
            f"{delta},{int(cmp.moving[i])}"
        )
    lines.append(
        f"mIoU,,{_fmt_pct(cmp.miou_a)},{_fmt_pct(cmp.miou_b)},{100.0 * cmp.miou_delta:.2f},"
    )
    if any(cmp.moving):
        lines.append(
            f"moving_mean,,{_fmt_pct(cmp.moving_mean_a)},{_fmt_pct(cmp.moving_mean_b)},"
            f"{100.0 * cmp.moving_mean_delta:.2f},"
        )
    Path(path).write_text("\n".join(lines) + "\n")
