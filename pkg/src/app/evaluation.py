"""
Splitting, metrics, early stopping and the single-vs-federated comparison.

Labels are demand-level indices 0..N_CLASSES-1. Balanced accuracy is the
mean recall over the classes present in the truth vector; classes that
never occur in the truth are left out of the mean.
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import src.config as config
from src.app.errors import EmptyInput, InvalidConfig, LabelOutOfRange, LengthMismatch, MismatchedTestSets, TooFewSamples
from src.app.nn import ModelParams

CONTINUE = "continue"
STOP = "stop"


@dataclass(frozen=True)
class Split:
    train_idx: List[int]
    val_idx: List[int]
    test_idx: List[int]
    ratios: Tuple[float, float, float] = config.SPLIT_RATIOS

    @property
    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train_idx), len(self.val_idx), len(self.test_idx)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    balanced_accuracy: float
    confusion: List[List[int]]
    per_class_recall: List[Optional[float]]
    n_test: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "confusion": self.confusion,
            "per_class_recall": self.per_class_recall,
            "n_test": self.n_test,
        }

    @classmethod
    def from_dict(cls, document: dict) -> "MetricsReport":
        try:
            return cls(
                float(document["accuracy"]),
                float(document["balanced_accuracy"]),
                [[int(v) for v in row] for row in document["confusion"]],
                [None if r is None else float(r) for r in document["per_class_recall"]],
                int(document["n_test"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidConfig("metrics", f"not a metrics document: {e}")


@dataclass(frozen=True)
class ComparisonReport:
    single: MetricsReport
    federated: MetricsReport
    accuracy_delta: float
    balanced_accuracy_delta: float

    def to_dict(self) -> dict:
        return {
            "single": self.single.to_dict(),
            "federated": self.federated.to_dict(),
            "accuracy_delta": self.accuracy_delta,
            "balanced_accuracy_delta": self.balanced_accuracy_delta,
            "n_test": self.single.n_test,
        }

    def render_table(self) -> str:
        rows = [
            ("metric", "single", "federated", "delta (single - fed)"),
            ("accuracy", f"{self.single.accuracy:.4f}", f"{self.federated.accuracy:.4f}", f"{self.accuracy_delta:+.4f}"),
            (
                "balanced_accuracy",
                f"{self.single.balanced_accuracy:.4f}",
                f"{self.federated.balanced_accuracy:.4f}",
                f"{self.balanced_accuracy_delta:+.4f}",
            ),
            ("n_test", str(self.single.n_test), str(self.federated.n_test), ""),
        ]
        widths = [max(len(row[i]) for row in rows) for i in range(4)]
        lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


@dataclass
class EarlyStopState:
    patience: float = config.PATIENCE
    best_metric: float = math.inf
    best_round: int = 0
    rounds_since_best: int = 0
    best_snapshot: Optional[ModelParams] = field(default=None, repr=False)


def largest_remainder_sizes(n: int, ratios: Sequence[float]) -> List[int]:
    """Integer part sizes summing to n, closest to ratios * n.

    Floors first, then the leftover units go to the largest fractional parts
    (earlier parts win ties). Ratios are read as exact decimals.
    """
    exact = [Fraction(str(r)) * n for r in ratios]
    sizes = [int(math.floor(e)) for e in exact]
    leftover = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


def split(
    n: int,
    ratios: Sequence[float] = config.SPLIT_RATIOS,
    seed: int = 0,
    labels: Optional[Sequence[int]] = None,
) -> Split:
    """Seeded shuffle of range(n) cut into train / val / test.

    With `labels` the split is stratified: every label group is split on its
    own and the groups are concatenated.

    Raises:
        TooFewSamples: n < 3
    """
    if n < 3:
        raise TooFewSamples(f"need at least 3 samples to split, got {n}")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidConfig("split.ratios", f"need three non-negative ratios summing to 1, got {list(ratios)}")

    rng = np.random.default_rng(seed)
    if labels is None:
        order = [int(i) for i in rng.permutation(n)]
        sizes = largest_remainder_sizes(n, ratios)
        return Split(
            order[: sizes[0]],
            order[sizes[0] : sizes[0] + sizes[1]],
            order[sizes[0] + sizes[1] :],
            tuple(ratios),
        )

    if len(labels) != n:
        raise LengthMismatch(f"{len(labels)} labels for {n} samples")
    parts: Tuple[List[int], List[int], List[int]] = ([], [], [])
    for label in sorted(set(int(l) for l in labels)):
        members = [i for i in range(n) if int(labels[i]) == label]
        shuffled = [members[int(j)] for j in rng.permutation(len(members))]
        sizes = largest_remainder_sizes(len(members), ratios)
        parts[0].extend(shuffled[: sizes[0]])
        parts[1].extend(shuffled[sizes[0] : sizes[0] + sizes[1]])
        parts[2].extend(shuffled[sizes[0] + sizes[1] :])
    return Split(parts[0], parts[1], parts[2], tuple(ratios))


def accuracy(preds: Sequence[int], truth: Sequence[int]) -> float:
    p, t = _check_pair(preds, truth)
    return float(np.count_nonzero(p == t)) / len(t)


def per_class_recall(preds: Sequence[int], truth: Sequence[int], n_classes: int = config.N_CLASSES) -> List[Optional[float]]:
    """Recall per class; None for classes absent from the truth."""
    p, t = _check_pair(preds, truth)
    recalls: List[Optional[float]] = []
    for label in range(n_classes):
        members = t == label
        total = int(np.count_nonzero(members))
        recalls.append(None if total == 0 else float(np.count_nonzero(p[members] == label)) / total)
    return recalls


def balanced_accuracy(preds: Sequence[int], truth: Sequence[int], n_classes: int = config.N_CLASSES) -> float:
    recalls = [r for r in per_class_recall(preds, truth, n_classes) if r is not None]
    return float(sum(recalls) / len(recalls))


def confusion(preds: Sequence[int], truth: Sequence[int], n_classes: int = config.N_CLASSES) -> List[List[int]]:
    """matrix[true][predicted] counts; empty input gives the zero matrix."""
    p = np.asarray(preds, dtype=np.int64).ravel()
    t = np.asarray(truth, dtype=np.int64).ravel()
    if len(p) != len(t):
        raise LengthMismatch(f"{len(p)} predictions for {len(t)} labels")
    for values in (p, t):
        if len(values) and (values.min() < 0 or values.max() >= n_classes):
            raise LabelOutOfRange(f"labels must lie in 0..{n_classes - 1}")
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (t, p), 1)
    return matrix.tolist()


def metrics_report(preds: Sequence[int], truth: Sequence[int], n_classes: int = config.N_CLASSES) -> MetricsReport:
    return MetricsReport(
        accuracy=accuracy(preds, truth),
        balanced_accuracy=balanced_accuracy(preds, truth, n_classes),
        confusion=confusion(preds, truth, n_classes),
        per_class_recall=per_class_recall(preds, truth, n_classes),
        n_test=len(truth),
    )


def early_stop_update(
    state: EarlyStopState, round_metric: float, round_number: int, snapshot: ModelParams
) -> Tuple[EarlyStopState, str]:
    """Track the best (lowest) validation loss and decide whether to stop.

    A round improves only when it beats the best by more than
    EARLY_STOP_TOLERANCE. Infinite patience never stops.
    """
    if round_metric < state.best_metric - config.EARLY_STOP_TOLERANCE:
        updated = EarlyStopState(state.patience, round_metric, round_number, 0, snapshot)
    else:
        updated = EarlyStopState(
            state.patience, state.best_metric, state.best_round, state.rounds_since_best + 1, state.best_snapshot
        )
    decision = STOP if updated.rounds_since_best >= updated.patience else CONTINUE
    return updated, decision


def compare(single: MetricsReport, fed: MetricsReport) -> ComparisonReport:
    """Deltas single - federated for the two headline metrics.

    Raises:
        MismatchedTestSets: the reports were computed on test sets of different sizes
    """
    if single.n_test != fed.n_test:
        raise MismatchedTestSets(f"single n_test {single.n_test} != federated n_test {fed.n_test}")
    return ComparisonReport(
        single,
        fed,
        single.accuracy - fed.accuracy,
        single.balanced_accuracy - fed.balanced_accuracy,
    )


def majority_baseline(train_labels: Sequence[int], test_labels: Sequence[int]) -> MetricsReport:
    """Metrics of always predicting the most frequent training label."""
    counts = np.bincount(np.asarray(train_labels, dtype=np.int64), minlength=config.N_CLASSES)
    majority = int(np.argmax(counts))
    return metrics_report([majority] * len(test_labels), test_labels)


def summarize_by_facility(
    preds: Sequence[int], truth: Sequence[int], owners: Sequence[str]
) -> Dict[str, Dict[str, float]]:
    """Accuracy and balanced accuracy on each facility's share of the test set."""
    p = np.asarray(preds, dtype=np.int64)
    t = np.asarray(truth, dtype=np.int64)
    o = np.asarray(owners)
    summary: Dict[str, Dict[str, float]] = {}
    for owner in sorted(set(owners)):
        mask = o == owner
        summary[owner] = {
            "accuracy": accuracy(p[mask], t[mask]),
            "balanced_accuracy": balanced_accuracy(p[mask], t[mask]),
            "n_test": int(np.count_nonzero(mask)),
        }
    return summary


def _check_pair(preds: Sequence[int], truth: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.int64).ravel()
    t = np.asarray(truth, dtype=np.int64).ravel()
    if len(p) != len(t):
        raise LengthMismatch(f"{len(p)} predictions for {len(t)} labels")
    if len(t) == 0:
        raise EmptyInput("metrics of an empty label vector")
    return p, t


def lookup_baseline(samples: Sequence) -> Optional[Tuple[MetricsReport, MetricsReport]]:
    """Learnability check: a (cell, hour) majority-label table against the majority class.

    The table is fit on samples from the first half of the slot range and
    scored on the second half; (cell, hour) keys never seen fall back to the
    overall majority label. Returns (table metrics, majority metrics), or
    None when the samples span fewer than two slots.
    """
    indices = sorted({s.slot.index for s in samples})
    if len(indices) < 2:
        return None
    cut = indices[len(indices) // 2]
    fit = [s for s in samples if s.slot.index < cut]
    scored = [s for s in samples if s.slot.index >= cut]

    fit_labels = [int(s.label) for s in fit]
    majority = int(np.argmax(np.bincount(np.asarray(fit_labels, dtype=np.int64), minlength=config.N_CLASSES)))
    table: Dict[Tuple[object, int], np.ndarray] = {}
    for s in fit:
        counts = table.setdefault((s.cell, s.slot.hour_of_day), np.zeros(config.N_CLASSES, dtype=np.int64))
        counts[int(s.label)] += 1

    truth = [int(s.label) for s in scored]
    preds = [
        int(np.argmax(table[(s.cell, s.slot.hour_of_day)])) if (s.cell, s.slot.hour_of_day) in table else majority
        for s in scored
    ]
    return metrics_report(preds, truth), majority_baseline(fit_labels, truth)
