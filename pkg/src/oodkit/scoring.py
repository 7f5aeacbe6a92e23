"""Per-sample OOD scores, threshold calibration, and the ID/OOD gate.

Two post-hoc scores are computed from logits:

* max-softmax: the largest softmax probability.
* energy: E = -T * log(sum_i exp(logit_i / T)), evaluated through a
  max-subtracted log-sum-exp so it never overflows. Raw energy is very
  negative for confidently classified inputs, so the gate and all ROC
  work use the negated "ID score" s = -E (higher means more ID); the
  raw value is always recoverable as -s.

Multi-exit gating calibrates one threshold per exit on ID scores (the
q-quantile rule: the floor((1-q)*n)-th smallest score) and accepts a
sample as ID only when every exit clears its threshold. The scalar
view of that conjunction is the minimum per-exit margin.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CalibrationError, FormatError, InputError

__all__ = [
    "Method",
    "Origin",
    "ScoreRecord",
    "ThresholdSet",
    "msp_score",
    "energy",
    "energy_id_score",
    "exit_id_scores",
    "quantile_threshold",
    "calibrate",
    "gate",
    "gate_margin",
    "write_scores_csv",
    "read_scores_csv",
    "write_thresholds",
    "read_thresholds",
    "DEFAULT_TEMPERATURE",
    "DEFAULT_QUANTILE",
]

DEFAULT_TEMPERATURE = 0.001
DEFAULT_QUANTILE = 0.95
MIN_CALIBRATION_SCORES = 20

SCORES_HEADER = ["sample_id", "method", "exit1", "exit2", "exit3", "combined", "origin"]


class Method(str, Enum):
    SOFTMAX = "softmax"
    ENERGY = "energy"
    ENSEMBLE = "ensemble"
    ENSEMBLE_WEIGHTED = "ensemble_weighted"


class Origin(str, Enum):
    ID = "ID"
    OOD = "OOD"


def _check_logits(logits) -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise InputError("empty logit vector")
    if not np.all(np.isfinite(arr)):
        raise InputError("logits must be finite")
    return arr


def msp_score(logits) -> float:
    """Largest softmax probability; higher means more ID."""
    arr = _check_logits(logits)
    exps = np.exp(arr - arr.max())
    return float(exps.max() / exps.sum())


def energy(logits, temperature: float = DEFAULT_TEMPERATURE) -> float:
    """Temperature-scaled negative log-sum-exp of the logits."""
    if temperature <= 0:
        raise InputError(f"temperature must be positive, got {temperature}")
    arr = _check_logits(logits)
    m = float(arr.max())
    return -m - temperature * math.log(np.exp((arr - m) / temperature).sum())


def energy_id_score(logits, temperature: float = DEFAULT_TEMPERATURE) -> float:
    """Gate-oriented energy score s = -E; higher means more ID."""
    return -energy(logits, temperature)


def exit_id_scores(exit_logits: np.ndarray, temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """Per-exit ID scores for a (3, K) stack of exit logits."""
    stack = np.asarray(exit_logits, dtype=np.float64)
    if stack.ndim != 2:
        raise InputError(f"expected (n_exits, K) logits, got shape {stack.shape}")
    return np.array([energy_id_score(row, temperature) for row in stack])


# ---------------------------------------------------------------------------
# calibration and gating


def quantile_threshold(scores, q: float = DEFAULT_QUANTILE) -> float:
    """The floor((1-q)*n)-th smallest score.

    At least a q-fraction of the input scores are >= the returned
    threshold. This single rule backs FPR95 calibration, the gate, and
    the FNR5 filter.
    """
    if not 0 < q < 1:
        raise CalibrationError(f"quantile must lie in (0, 1), got {q}")
    arr = np.sort(np.asarray(scores, dtype=np.float64).reshape(-1), kind="stable")
    if arr.size == 0:
        raise CalibrationError("no scores to calibrate on")
    return float(arr[int(math.floor((1.0 - q) * arr.size))])


@dataclass(frozen=True)
class ThresholdSet:
    """Per-exit gate thresholds plus provenance for mismatch checks."""

    taus: tuple[float, ...]
    quantile: float
    method: Method
    fingerprint: str
    model_fingerprint: str = ""

    def __post_init__(self):
        if not self.taus:
            raise CalibrationError("threshold set needs at least one exit threshold")
        if not 0 < self.quantile < 1:
            raise CalibrationError(f"quantile must lie in (0, 1), got {self.quantile}")


def _scores_fingerprint(per_exit_scores: Sequence[np.ndarray], method: Method, q: float) -> str:
    digest = hashlib.sha256()
    digest.update(f"{method.value}|{q!r}".encode())
    for col in per_exit_scores:
        digest.update(b"|")
        digest.update(np.ascontiguousarray(col, dtype="<f8").tobytes())
    return digest.hexdigest()


def calibrate(
    per_exit_scores: Sequence[Iterable[float]],
    q: float = DEFAULT_QUANTILE,
    *,
    method: Method = Method.ENERGY,
    model_fingerprint: str = "",
) -> ThresholdSet:
    """Calibrate one threshold per exit from ID scores.

    Each exit needs at least 20 scores; the returned set records the
    quantile and a digest of the calibration scores.
    """
    cols = [np.asarray(list(col), dtype=np.float64) for col in per_exit_scores]
    if not cols:
        raise CalibrationError("no exits to calibrate")
    for e, col in enumerate(cols, start=1):
        if col.size < MIN_CALIBRATION_SCORES:
            raise CalibrationError(
                f"exit {e}: need at least {MIN_CALIBRATION_SCORES} ID scores, got {col.size}"
            )
    taus = tuple(quantile_threshold(col, q) for col in cols)
    return ThresholdSet(
        taus=taus,
        quantile=q,
        method=method,
        fingerprint=_scores_fingerprint(cols, method, q),
        model_fingerprint=model_fingerprint,
    )


def _check_gate_args(exit_scores, thresholds: ThresholdSet) -> np.ndarray:
    arr = np.asarray(exit_scores, dtype=np.float64).reshape(-1)
    if arr.size != len(thresholds.taus):
        raise InputError(
            f"got {arr.size} exit scores for {len(thresholds.taus)} thresholds"
        )
    if not np.all(np.isfinite(arr)):
        raise InputError("exit scores must be finite")
    return arr


def gate(exit_scores, thresholds: ThresholdSet) -> Origin:
    """ID iff every exit score clears its threshold (>= convention)."""
    arr = _check_gate_args(exit_scores, thresholds)
    ok = all(s >= t for s, t in zip(arr, thresholds.taus))
    return Origin.ID if ok else Origin.OOD


def gate_margin(exit_scores, thresholds: ThresholdSet) -> float:
    """min_e (score_e - tau_e); >= 0 exactly when the gate says ID."""
    arr = _check_gate_args(exit_scores, thresholds)
    return float(min(s - t for s, t in zip(arr, thresholds.taus)))


# ---------------------------------------------------------------------------
# records and files


@dataclass(frozen=True)
class ScoreRecord:
    """One sample's OOD score; exit columns are energy-method only."""

    sample_id: str
    method: Method
    combined: float
    origin: Origin
    exit_scores: tuple[float, ...] = ()

    def __post_init__(self):
        if not math.isfinite(self.combined):
            raise InputError(f"combined score for {self.sample_id!r} is not finite")
        if self.exit_scores and self.method is not Method.ENERGY:
            raise InputError(
                f"per-exit scores only apply to the energy method, not {self.method.value}"
            )


def write_scores_csv(path: str | Path, records: Sequence[ScoreRecord]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORES_HEADER)
        for r in records:
            exits = list(r.exit_scores) + [None] * (3 - len(r.exit_scores))
            writer.writerow(
                [
                    r.sample_id,
                    r.method.value,
                    *("" if v is None else repr(float(v)) for v in exits),
                    repr(float(r.combined)),
                    r.origin.value,
                ]
            )


def read_scores_csv(path: str | Path) -> list[ScoreRecord]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"scores file not found: {path}")
    records: list[ScoreRecord] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCORES_HEADER:
            raise FormatError(f"{path}: bad scores header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(SCORES_HEADER):
                raise FormatError(f"{path} row {lineno}: expected {len(SCORES_HEADER)} fields")
            sample_id, method, e1, e2, e3, combined, origin = row
            try:
                exits = tuple(float(v) for v in (e1, e2, e3) if v != "")
                records.append(
                    ScoreRecord(
                        sample_id=sample_id,
                        method=Method(method),
                        combined=float(combined),
                        origin=Origin(origin),
                        exit_scores=exits,
                    )
                )
            except ValueError as exc:
                raise FormatError(f"{path} row {lineno}: {exc}") from exc
    return records


def write_thresholds(path: str | Path, thresholds: ThresholdSet) -> None:
    lines = [
        f"method = {thresholds.method.value}",
        f"quantile = {thresholds.quantile!r}",
    ]
    lines += [f"tau.{e} = {tau!r}" for e, tau in enumerate(thresholds.taus, start=1)]
    lines += [
        f"fingerprint = {thresholds.fingerprint}",
        f"model_fingerprint = {thresholds.model_fingerprint}",
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_thresholds(path: str | Path) -> ThresholdSet:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"thresholds file not found: {path}")
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    try:
        taus = []
        for e in range(1, 4):
            if f"tau.{e}" in entries:
                taus.append(float(entries[f"tau.{e}"]))
        return ThresholdSet(
            taus=tuple(taus),
            quantile=float(entries["quantile"]),
            method=Method(entries["method"]),
            fingerprint=entries.get("fingerprint", ""),
            model_fingerprint=entries.get("model_fingerprint", ""),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed thresholds file: {exc}") from exc
