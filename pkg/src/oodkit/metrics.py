"""ROC/AUC/FPR95 for OOD detection plus the FNR5-filtered
classification AUC and the table/CSV report generator.

Convention throughout: ID is the positive class and a sample counts as
detected-ID at threshold t when its score is >= t. AUC is available
through two independent routes, trapezoidal integration of the ROC
curve and the Mann-Whitney rank statistic with half credit for ties;
the two agree to floating-point accuracy and the test suite holds them
to 1e-9.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import FormatError, InputError, UndefinedMetricError
from .scoring import DEFAULT_QUANTILE, quantile_threshold

__all__ = [
    "RocCurve",
    "roc",
    "auc",
    "auc_mann_whitney",
    "fpr_at_tpr",
    "classification_auc",
    "auc_at_fnr5",
    "OodResult",
    "ExitResult",
    "ClassificationResult",
    "MetricsReport",
    "evaluate_ood",
    "evaluate_exits",
    "evaluate_classification",
    "write_metrics_csv",
    "read_metrics_csv",
    "write_exits_csv",
    "read_exits_csv",
    "write_classification_csv",
    "read_classification_csv",
    "write_roc_csv",
    "read_roc_csv",
]


def _as_scores(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise InputError(f"{name} score list is empty")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} scores must be finite")
    return arr


@dataclass(frozen=True)
class RocCurve:
    """Threshold-swept (FPR, TPR) points from (0,0) to (1,1)."""

    fpr: np.ndarray
    tpr: np.ndarray

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc(id_scores, ood_scores) -> RocCurve:
    """Sweep thresholds over the union of scores, highest first.

    TPR is the ID fraction >= threshold, FPR the OOD fraction >=
    threshold; the fixed endpoints (0,0) and (1,1) are appended.
    """
    ids = np.sort(_as_scores(id_scores, "ID"))
    oods = np.sort(_as_scores(ood_scores, "OOD"))
    thresholds = np.unique(np.concatenate([ids, oods]))[::-1]
    tpr = (ids.size - np.searchsorted(ids, thresholds, side="left")) / ids.size
    fpr = (oods.size - np.searchsorted(oods, thresholds, side="left")) / oods.size
    fpr = np.concatenate([[0.0], fpr, [1.0]])
    tpr = np.concatenate([[0.0], tpr, [1.0]])
    keep = np.ones(len(fpr), dtype=bool)
    keep[1:] = (np.diff(fpr) != 0) | (np.diff(tpr) != 0)
    return RocCurve(fpr=fpr[keep], tpr=tpr[keep])


def auc(id_scores, ood_scores) -> float:
    """Area under the ROC curve by trapezoidal integration."""
    curve = roc(id_scores, ood_scores)
    widths = np.diff(curve.fpr)
    heights = (curve.tpr[1:] + curve.tpr[:-1]) / 2.0
    return float(np.sum(widths * heights))


def auc_mann_whitney(id_scores, ood_scores) -> float:
    """AUC as the normalized Mann-Whitney U statistic.

    Computed from midranks, so ties get half credit; equals the
    trapezoidal value without enumerating score pairs.
    """
    ids = _as_scores(id_scores, "ID")
    oods = _as_scores(ood_scores, "OOD")
    combined = np.concatenate([ids, oods])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty(combined.size)
    sorted_vals = combined[order]
    # midranks over runs of equal values (1-based ranks)
    idx = 0
    while idx < sorted_vals.size:
        end = idx
        while end + 1 < sorted_vals.size and sorted_vals[end + 1] == sorted_vals[idx]:
            end += 1
        ranks[order[idx : end + 1]] = (idx + end) / 2.0 + 1.0
        idx = end + 1
    r_id = ranks[: ids.size].sum()
    u = r_id - ids.size * (ids.size + 1) / 2.0
    return float(u / (ids.size * oods.size))


def fpr_at_tpr(id_scores, ood_scores, tpr_target: float = DEFAULT_QUANTILE) -> float:
    """OOD fraction accepted at the threshold keeping tpr_target of ID.

    The threshold comes from the shared quantile rule, so FPR95 here
    and gate calibration mean exactly the same "95%".
    """
    ids = _as_scores(id_scores, "ID")
    oods = _as_scores(ood_scores, "OOD")
    tau = quantile_threshold(ids, tpr_target)
    return float(np.mean(oods >= tau))


def classification_auc(scores_pos, scores_neg) -> float:
    """Binary AUC with the positive class detected by score >= t."""
    try:
        return auc(scores_pos, scores_neg)
    except InputError as exc:
        raise UndefinedMetricError(f"AUC undefined: {exc}") from exc


def auc_at_fnr5(
    ood_scores,
    malignant_scores,
    cancer_labels,
    fnr: float = 0.05,
) -> float:
    """Cancer-vs-rest AUC after dropping the most-OOD ID samples.

    The floor(fnr*n) samples with the lowest OOD scores are removed
    (stable order on ties), then the malignant-class score separates
    cancer from non-cancer on the remainder.
    """
    ood_arr = _as_scores(ood_scores, "OOD-score")
    malig = _as_scores(malignant_scores, "malignant")
    labels = np.asarray(cancer_labels, dtype=np.int64).reshape(-1)
    if not (ood_arr.size == malig.size == labels.size):
        raise InputError(
            f"mismatched lengths: {ood_arr.size} OOD scores, {malig.size} malignant "
            f"scores, {labels.size} labels"
        )
    if not 0 <= fnr < 1:
        raise InputError(f"fnr must lie in [0, 1), got {fnr}")
    drop = int(np.floor(fnr * ood_arr.size))
    keep = np.argsort(ood_arr, kind="stable")[drop:]
    kept_scores = malig[keep]
    kept_labels = labels[keep]
    pos = kept_scores[kept_labels == 1]
    neg = kept_scores[kept_labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError(
            "AUC undefined: filtered set contains a single class "
            f"({pos.size} cancer, {neg.size} non-cancer)"
        )
    return auc(pos, neg)


# ---------------------------------------------------------------------------
# report assembly


@dataclass(frozen=True)
class OodResult:
    method: str
    ood_set: str
    auc_pct: float
    fpr95_pct: float


@dataclass(frozen=True)
class ExitResult:
    """Per-exit AUC/FPR95 for one OOD set (energy method)."""

    ood_set: str
    auc_pct: tuple[float, float, float]
    fpr95_pct: tuple[float, float, float]


@dataclass(frozen=True)
class ClassificationResult:
    method: str
    auc_pct: float
    auc_fnr5_pct: float


@dataclass
class MetricsReport:
    ood: list[OodResult] = field(default_factory=list)
    exits: list[ExitResult] = field(default_factory=list)
    classification: list[ClassificationResult] = field(default_factory=list)
    absent: list[tuple[str, str]] = field(default_factory=list)


def evaluate_ood(method: str, ood_set: str, id_scores, ood_scores) -> OodResult:
    return OodResult(
        method=method,
        ood_set=ood_set,
        auc_pct=100.0 * auc(id_scores, ood_scores),
        fpr95_pct=100.0 * fpr_at_tpr(id_scores, ood_scores),
    )


def evaluate_exits(ood_set: str, id_exit_scores, ood_exit_scores) -> ExitResult:
    """Columns of per-exit scores -> one per-exit table row."""
    id_cols = np.asarray(id_exit_scores, dtype=np.float64)
    ood_cols = np.asarray(ood_exit_scores, dtype=np.float64)
    if id_cols.ndim != 2 or ood_cols.ndim != 2 or id_cols.shape[1] != ood_cols.shape[1]:
        raise InputError("per-exit scores must be (n_samples, n_exits) arrays")
    aucs = tuple(100.0 * auc(id_cols[:, e], ood_cols[:, e]) for e in range(id_cols.shape[1]))
    fprs = tuple(
        100.0 * fpr_at_tpr(id_cols[:, e], ood_cols[:, e]) for e in range(id_cols.shape[1])
    )
    return ExitResult(ood_set=ood_set, auc_pct=aucs, fpr95_pct=fprs)


def evaluate_classification(method: str, ood_scores, malignant_scores, cancer_labels) -> ClassificationResult:
    pos = np.asarray(malignant_scores)[np.asarray(cancer_labels) == 1]
    neg = np.asarray(malignant_scores)[np.asarray(cancer_labels) == 0]
    return ClassificationResult(
        method=method,
        auc_pct=100.0 * classification_auc(pos, neg),
        auc_fnr5_pct=100.0 * auc_at_fnr5(ood_scores, malignant_scores, cancer_labels),
    )


def build_report(
    ood_runs: Mapping[tuple[str, str], tuple[Sequence[float], Sequence[float]]],
    exit_runs: Mapping[str, tuple[Sequence[Sequence[float]], Sequence[Sequence[float]]]] | None = None,
    classification_runs: Mapping[str, tuple[Sequence[float], Sequence[float], Sequence[int]]] | None = None,
    expected_pairs: Sequence[tuple[str, str]] | None = None,
) -> MetricsReport:
    """Assemble the three tables; requested-but-missing pairs are
    listed as absent rather than zero-filled."""
    report = MetricsReport()
    for (method, ood_set), (id_s, ood_s) in ood_runs.items():
        report.ood.append(evaluate_ood(method, ood_set, id_s, ood_s))
    for ood_set, (id_cols, ood_cols) in (exit_runs or {}).items():
        report.exits.append(evaluate_exits(ood_set, id_cols, ood_cols))
    for method, (ood_s, malig, labels) in (classification_runs or {}).items():
        report.classification.append(evaluate_classification(method, ood_s, malig, labels))
    if expected_pairs:
        have = {(r.method, r.ood_set) for r in report.ood}
        report.absent = [pair for pair in expected_pairs if pair not in have]
    return report


# ---------------------------------------------------------------------------
# CSV formats (header row, '.' decimals, LF endings)


def _write_rows(path: str | Path, header: list[str], rows: list[list[str]]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _read_rows(path: str | Path, header: list[str]) -> list[list[str]]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got != header:
            raise FormatError(f"{path}: expected header {header}, got {got}")
        return [row for row in reader if row]


METRICS_HEADER = ["method", "ood_set", "auc_pct", "fpr95_pct"]
EXITS_HEADER = [
    "ood_set",
    "auc_exit1",
    "auc_exit2",
    "auc_exit3",
    "fpr95_exit1",
    "fpr95_exit2",
    "fpr95_exit3",
]
CLASSIFICATION_HEADER = ["method", "auc_pct", "auc_fnr5_pct"]
ROC_HEADER = ["fpr", "tpr"]


def write_metrics_csv(path: str | Path, rows: Sequence[OodResult]) -> None:
    _write_rows(
        path,
        METRICS_HEADER,
        [[r.method, r.ood_set, repr(r.auc_pct), repr(r.fpr95_pct)] for r in rows],
    )


def read_metrics_csv(path: str | Path) -> list[OodResult]:
    return [
        OodResult(method=m, ood_set=s, auc_pct=float(a), fpr95_pct=float(f))
        for m, s, a, f in _read_rows(path, METRICS_HEADER)
    ]


def write_exits_csv(path: str | Path, rows: Sequence[ExitResult]) -> None:
    _write_rows(
        path,
        EXITS_HEADER,
        [
            [r.ood_set, *(repr(v) for v in r.auc_pct), *(repr(v) for v in r.fpr95_pct)]
            for r in rows
        ],
    )


def read_exits_csv(path: str | Path) -> list[ExitResult]:
    return [
        ExitResult(
            ood_set=row[0],
            auc_pct=tuple(float(v) for v in row[1:4]),
            fpr95_pct=tuple(float(v) for v in row[4:7]),
        )
        for row in _read_rows(path, EXITS_HEADER)
    ]


def write_classification_csv(path: str | Path, rows: Sequence[ClassificationResult]) -> None:
    _write_rows(
        path,
        CLASSIFICATION_HEADER,
        [[r.method, repr(r.auc_pct), repr(r.auc_fnr5_pct)] for r in rows],
    )


def read_classification_csv(path: str | Path) -> list[ClassificationResult]:
    return [
        ClassificationResult(method=m, auc_pct=float(a), auc_fnr5_pct=float(f))
        for m, a, f in _read_rows(path, CLASSIFICATION_HEADER)
    ]


def write_roc_csv(path: str | Path, curve: RocCurve) -> None:
    _write_rows(
        path,
        ROC_HEADER,
        [[repr(float(f)), repr(float(t))] for f, t in zip(curve.fpr, curve.tpr)],
    )


def read_roc_csv(path: str | Path) -> RocCurve:
    rows = _read_rows(path, ROC_HEADER)
    return RocCurve(
        fpr=np.array([float(r[0]) for r in rows]),
        tpr=np.array([float(r[1]) for r in rows]),
    )
