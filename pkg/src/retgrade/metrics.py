"""Evaluation suite: per-class sensitivity/specificity, overall accuracy,
macro precision/recall, and macro one-vs-rest AUC.

Rates with zero denominators are reported as explicit None, never coerced to
0 or 1, and excluded (with a flag) from macro averages. AUC uses the rank
statistic with average ranks on ties, which equals pair counting with half
credit for tied pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .fundus import DataError, DatasetManifest, load_image

N_CLASSES = 5


@dataclass
class ConfusionMatrix:
    """Rows are true grades, columns predicted grades."""

    counts: np.ndarray  # (5,5) int64

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def class_counts(self, cls: int) -> tuple[int, int, int, int]:
        """One-vs-rest (TP, TN, FP, FN) for a grade."""
        tp = int(self.counts[cls, cls])
        fn = int(self.counts[cls].sum()) - tp
        fp = int(self.counts[:, cls].sum()) - tp
        tn = self.total - tp - fn - fp
        return tp, tn, fp, fn


def confusion(pairs: Sequence[tuple[int, int]]) -> ConfusionMatrix:
    if not pairs:
        raise DataError("confusion requires at least one (true, predicted) pair")
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for true, predicted in pairs:
        if not (0 <= true < N_CLASSES and 0 <= predicted < N_CLASSES):
            raise DataError(f"grade pair ({true}, {predicted}) outside [0,4]")
        counts[true, predicted] += 1
    return ConfusionMatrix(counts=counts)


def sensitivity(cm: ConfusionMatrix, cls: int) -> Optional[float]:
    """TP/(TP+FN); None when the class has no true samples."""
    tp, _tn, _fp, fn = cm.class_counts(cls)
    if tp + fn == 0:
        return None
    return tp / (tp + fn)


def specificity(cm: ConfusionMatrix, cls: int) -> Optional[float]:
    """TN/(TN+FP); None when the class has no true negatives or false positives."""
    _tp, tn, fp, _fn = cm.class_counts(cls)
    if tn + fp == 0:
        return None
    return tn / (tn + fp)


def precision(cm: ConfusionMatrix, cls: int) -> Optional[float]:
    """TP/(TP+FP); None when the class is never predicted."""
    tp, _tn, fp, _fn = cm.class_counts(cls)
    if tp + fp == 0:
        return None
    return tp / (tp + fp)


def accuracy(cm: ConfusionMatrix) -> float:
    """Multiclass overall accuracy: trace / total."""
    if cm.total == 0:
        raise DataError("accuracy of an empty confusion matrix is undefined")
    return int(np.trace(cm.counts)) / cm.total


@dataclass
class MacroPR:
    precision: float
    recall: float
    undefined_precision_classes: list[int]
    undefined_recall_classes: list[int]

    def __iter__(self):  # allows (p, r) unpacking
        return iter((self.precision, self.recall))


def macro_precision_recall(cm: ConfusionMatrix) -> MacroPR:
    """Unweighted class means; undefined classes are excluded and flagged."""
    precisions = {c: precision(cm, c) for c in range(N_CLASSES)}
    recalls = {c: sensitivity(cm, c) for c in range(N_CLASSES)}
    p_defined = [v for v in precisions.values() if v is not None]
    r_defined = [v for v in recalls.values() if v is not None]
    if not p_defined or not r_defined:
        raise DataError("macro precision/recall undefined for every class")
    return MacroPR(
        precision=sum(p_defined) / len(p_defined),
        recall=sum(r_defined) / len(r_defined),
        undefined_precision_classes=[c for c, v in precisions.items() if v is None],
        undefined_recall_classes=[c for c, v in recalls.items() if v is None],
    )


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


@dataclass
class AucResult:
    macro: float
    per_class: dict[int, Optional[float]]
    excluded_classes: list[int]


def auc_ovr(samples: Sequence[tuple[int, Sequence[float]]]) -> AucResult:
    """Macro one-vs-rest AUC over (true grade, 5 probabilities) samples.

    Per class, AUC is P(score(pos) > score(neg)) + 0.5*P(tie), computed from
    the rank statistic. Classes missing a positive or a negative are excluded
    and flagged.
    """
    truths = np.array([t for t, _ in samples], dtype=np.int64)
    if len(np.unique(truths)) < 2:
        raise DataError("auc_ovr requires at least 2 distinct true classes")
    probs = np.array([list(p) for _, p in samples], dtype=np.float64)
    per_class: dict[int, Optional[float]] = {}
    excluded: list[int] = []
    values = []
    for cls in range(N_CLASSES):
        pos = truths == cls
        n_pos = int(pos.sum())
        n_neg = len(truths) - n_pos
        if n_pos == 0 or n_neg == 0:
            per_class[cls] = None
            excluded.append(cls)
            continue
        ranks = _average_ranks(probs[:, cls])
        auc = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
        per_class[cls] = auc
        values.append(auc)
    return AucResult(macro=sum(values) / len(values), per_class=per_class,
                     excluded_classes=excluded)


@dataclass
class MetricReport:
    model_id: str
    total: int
    confusion: list[list[int]]
    per_class: dict[int, dict]
    macro_precision: float
    macro_recall: float
    accuracy: float
    auc: float
    auc_per_class: dict[int, Optional[float]]
    undefined_precision_classes: list[int] = field(default_factory=list)
    undefined_recall_classes: list[int] = field(default_factory=list)
    auc_excluded_classes: list[int] = field(default_factory=list)

    def to_json(self, indent: Optional[int] = None) -> str:
        payload = {
            "model": self.model_id,
            "total": self.total,
            "confusion": self.confusion,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "auc": self.auc,
            "auc_per_class": {str(k): v for k, v in self.auc_per_class.items()},
            "overall_accuracy": self.accuracy,
            "undefined_precision_classes": self.undefined_precision_classes,
            "undefined_recall_classes": self.undefined_recall_classes,
            "auc_excluded_classes": self.auc_excluded_classes,
        }
        return json.dumps(payload, indent=indent)


TABLE_HEADER = f"{'Model':<24}{'Precision':>10}{'Recall':>8}{'AUC':>7}  Overall Accuracy"


def format_table(report: MetricReport) -> str:
    """One aligned row per model, mirroring the published results layout."""
    row = (f"{report.model_id:<24}"
           f"{report.macro_precision:>10.2f}"
           f"{report.macro_recall:>8.2f}"
           f"{report.auc:>7.2f}"
           f"  {report.accuracy * 100:.2f}%")
    return TABLE_HEADER + "\n" + row + "\n"


def compute_report(model_id: str,
                   pairs: Sequence[tuple[int, int]],
                   samples: Sequence[tuple[int, Sequence[float]]]) -> MetricReport:
    """Assemble every metric from prediction pairs and probability samples."""
    cm = confusion(pairs)
    macro = macro_precision_recall(cm)
    auc = auc_ovr(samples)
    per_class = {}
    for cls in range(N_CLASSES):
        tp, tn, fp, fn = cm.class_counts(cls)
        per_class[cls] = {
            "tp": tp, "tn": tn, "fp": fp, "fn": fn,
            "sensitivity": sensitivity(cm, cls),
            "specificity": specificity(cm, cls),
            "precision": precision(cm, cls),
        }
    return MetricReport(
        model_id=model_id,
        total=cm.total,
        confusion=cm.counts.tolist(),
        per_class=per_class,
        macro_precision=macro.precision,
        macro_recall=macro.recall,
        accuracy=accuracy(cm),
        auc=auc.macro,
        auc_per_class=auc.per_class,
        undefined_precision_classes=macro.undefined_precision_classes,
        undefined_recall_classes=macro.undefined_recall_classes,
        auc_excluded_classes=auc.excluded_classes,
    )


def report(model, manifest: DatasetManifest, root=None) -> MetricReport:
    """Run the model over every manifest entry and assemble the full report."""
    from .model import predict  # local import to avoid a cycle

    if not manifest.entries:
        raise DataError("report requires a nonempty manifest")
    root = Path(root) if root is not None else Path(".")
    pairs = []
    samples = []
    for entry in manifest.entries:
        try:
            img = load_image(root / entry.path)
            result = predict(model, img)
        except DataError as exc:
            raise DataError(f"evaluating {entry.path}: {exc}") from exc
        pairs.append((entry.label, result.grade))
        samples.append((entry.label, result.probabilities))
    return compute_report(model.model_id or "model", pairs, samples)
