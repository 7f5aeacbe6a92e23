"""Command-line front end.

Subcommands: synth, train, train-ensemble, corrupt, score, calibrate,
evaluate, report. Every command is a pure function of its input files
plus the resolved config, so a pipeline script with fixed seeds
reproduces byte-identical outputs. Exit codes: 0 success, 1 internal
error, 2 usage or input error.

Config files are INI-style key-value text; CLI flags override config
keys. See README for the full key reference and a worked pipeline.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import shutil
import sys
import traceback
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as dio
from . import ensemble as ens
from . import metrics as met
from . import scoring
from .errors import (
    CalibrationError,
    ConfigurationError,
    DataError,
    FormatError,
    InputError,
    ShapeError,
    ToolkitError,
    UndefinedMetricError,
)
from .model import ModelConfig, MultiExitModel, train_model
from .scoring import Method, Origin, ScoreRecord

USAGE_ERRORS = (
    ConfigurationError,
    InputError,
    DataError,
    FormatError,
    CalibrationError,
    ShapeError,
    UndefinedMetricError,
    FileNotFoundError,
)

CLASSIFICATION_HEADER = ["sample_id", "method", "ood_score", "malignant_score", "cancer_label"]

_METHOD_FLAGS = {
    "softmax": Method.SOFTMAX,
    "energy": Method.ENERGY,
    "ensemble": Method.ENSEMBLE,
    "ensemble-weighted": Method.ENSEMBLE_WEIGHTED,
}


# ---------------------------------------------------------------------------
# config


class RunConfig:
    """INI config plus flag overrides, with typed accessors."""

    def __init__(self, parser: configparser.ConfigParser, overrides: dict[str, str]):
        self._parser = parser
        self._overrides = overrides

    @classmethod
    def load(cls, path: str | None, overrides: dict[str, str] | None = None) -> "RunConfig":
        parser = configparser.ConfigParser()
        if path is not None:
            cfg_path = Path(path)
            if not cfg_path.exists():
                raise InputError(f"config file not found: {cfg_path}")
            parser.read(cfg_path, encoding="utf-8")
        return cls(parser, dict(overrides or {}))

    def get(self, section: str, key: str, default=None, cast=str):
        dotted = f"{section}.{key}"
        if dotted in self._overrides:
            raw = self._overrides[dotted]
        elif self._parser.has_option(section, key):
            raw = self._parser.get(section, key)
        else:
            if default is None:
                raise InputError(f"missing config key [{section}] {key}")
            return default
        try:
            return cast(raw)
        except ValueError as exc:
            raise InputError(f"config key [{section}] {key}: {exc}") from exc

    def items(self) -> dict[str, str]:
        flat = {
            f"{section}.{key}": value
            for section in self._parser.sections()
            for key, value in self._parser.items(section)
        }
        flat.update(self._overrides)
        return flat

    # typed views ---------------------------------------------------------

    def model_config(self, seed: int | None = None) -> ModelConfig:
        ints = lambda raw: tuple(int(v) for v in raw.split(","))  # noqa: E731
        return ModelConfig(
            input_size=self.get("model", "input_size", 128, int),
            channels=self.get("model", "channels", (16, 32, 64, 128, 128), ints),
            exit_blocks=self.get("model", "exit_blocks", (2, 4), ints),
            exit_channels=self.get("model", "exit_channels", 128, int),
            hidden=self.get("model", "hidden", 256, int),
            n_classes=self.get("model", "classes", 3, int),
            seed=self.train_seed() if seed is None else seed,
        )

    def train_seed(self) -> int:
        return self.get("train", "seed", 0, int)

    def malignant_class(self) -> int:
        return self.get("model", "malignant_class", self.get("model", "classes", 3, int) - 1, int)

    def ensemble_spec(self) -> ens.EnsembleSpec:
        floats = lambda raw: tuple(float(v) for v in raw.split(","))  # noqa: E731
        ints = lambda raw: tuple(int(v) for v in raw.split(","))  # noqa: E731
        names = lambda raw: tuple(v.strip() for v in raw.split(","))  # noqa: E731
        return ens.EnsembleSpec(
            n_members=self.get("ensemble", "members", 20, int),
            leave_out_range=(
                self.get("ensemble", "leave_out_min", 0.0, float),
                self.get("ensemble", "leave_out_max", 0.15, float),
            ),
            learning_rate_range=(
                self.get("ensemble", "lr_min", 1e-4, float),
                self.get("ensemble", "lr_max", 1e-3, float),
            ),
            optimizers=self.get("ensemble", "optimizers", ("adam", "rmsprop"), names),
            epochs_range=(
                self.get("ensemble", "epochs_min", 25, int),
                self.get("ensemble", "epochs_max", 85, int),
            ),
            batch_sizes=self.get("ensemble", "batch_sizes", (8, 16, 32, 64, 128), ints),
            master_seed=self.get("ensemble", "master_seed", 0, int),
        )

    def corruption_config(self) -> dio.CorruptionConfig:
        names = lambda raw: tuple(v.strip() for v in raw.split(","))  # noqa: E731
        return dio.CorruptionConfig(
            seed=self.get("corrupt", "seed", 0, int),
            operations=self.get("corrupt", "operations", ("dark_region", "blur", "noise"), names),
            dark_region_count=(
                self.get("corrupt", "dark_count_min", 1, int),
                self.get("corrupt", "dark_count_max", 3, int),
            ),
            dark_region_size=(
                self.get("corrupt", "dark_size_min", 0.10, float),
                self.get("corrupt", "dark_size_max", 0.30, float),
            ),
            blur_sigma=(
                self.get("corrupt", "blur_sigma_min", 1.0, float),
                self.get("corrupt", "blur_sigma_max", 3.0, float),
            ),
            noise_sigma=(
                self.get("corrupt", "noise_sigma_min", 0.05, float),
                self.get("corrupt", "noise_sigma_max", 0.15, float),
            ),
        )

    def temperature(self) -> float:
        return self.get("scoring", "temperature", scoring.DEFAULT_TEMPERATURE, float)

    def quantile(self) -> float:
        return self.get("scoring", "quantile", scoring.DEFAULT_QUANTILE, float)

    def path(self, key: str, default: str | None = None) -> Path:
        return Path(self.get("paths", key, default))


def _config_from_args(args) -> RunConfig:
    overrides: dict[str, str] = {}
    if getattr(args, "seed", None) is not None:
        for key in ("train.seed", "ensemble.master_seed", "corrupt.seed", "synth.seed"):
            overrides[key] = str(args.seed)
    if getattr(args, "temperature", None) is not None:
        overrides["scoring.temperature"] = str(args.temperature)
    if getattr(args, "quantile", None) is not None:
        overrides["scoring.quantile"] = str(args.quantile)
    return RunConfig.load(args.config, overrides)


# ---------------------------------------------------------------------------
# shared helpers


@contextmanager
def _locked_dir(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(
            f"output directory {directory} is in use (remove {lock} if stale)"
        ) from None
    os.close(fd)
    try:
        yield directory
    finally:
        lock.unlink(missing_ok=True)


def _write_run_lock(directory: Path, command: str, config: RunConfig, extra: dict[str, str]) -> None:
    entries = {f"config.{k}": v for k, v in config.items().items()}
    entries.update(extra)
    lines = [f"command = {command}"] + [f"{k} = {v}" for k, v in sorted(entries.items())]
    (directory / "run.lock").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_split(config: RunConfig, manifest: Path, split: str) -> dio.LoadedDataset:
    size = config.get("model", "input_size", 128, int)
    ds = dio.load_dataset(manifest, size)
    sub = ds.subset(split)
    if len(sub) == 0:
        raise DataError(f"{manifest}: no rows with split {split!r}")
    return sub


def _write_classification_csv(path: Path, rows: list[list[str]]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CLASSIFICATION_HEADER)
        writer.writerows(rows)


def _read_classification_csv(path: Path) -> tuple[str, np.ndarray, np.ndarray, np.ndarray]:
    if not path.exists():
        raise FormatError(f"classification scores not found: {path}")
    methods: set[str] = set()
    ood, malig, labels = [], [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CLASSIFICATION_HEADER:
            raise FormatError(f"{path}: bad header {header}")
        for row in reader:
            if not row:
                continue
            methods.add(row[1])
            ood.append(float(row[2]))
            malig.append(float(row[3]))
            labels.append(int(row[4]))
    if len(methods) != 1:
        raise FormatError(f"{path}: expected one method, found {sorted(methods)}")
    return methods.pop(), np.array(ood), np.array(malig), np.array(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    config = _config_from_args(args)
    out_dir = Path(args.out_dir) if args.out_dir else config.path("output_dir", "out") / "synth"
    n_classes = config.get("model", "classes", 3, int)
    size = config.get("model", "input_size", 128, int)
    seed = config.get("synth", "seed", 0, int)
    counts = {
        "train": config.get("synth", "per_class_train", 20, int),
        "calibrate": config.get("synth", "per_class_calibrate", 10, int),
        "test": config.get("synth", "per_class_test", 10, int),
    }
    total = sum(counts.values())
    images, labels = dio.make_synthetic(n_classes, total, size, seed)
    with _locked_dir(out_dir):
        (out_dir / "images").mkdir(exist_ok=True)
        rows: list[dio.ManifestRow] = []
        cursor = 0
        for split in dio.SPLITS:
            for i in range(counts[split] * n_classes):
                label = int(labels[cursor])
                rel = f"images/{split}_{i:04d}_c{label}.png"
                dio.write_png(out_dir / rel, images[cursor])
                rows.append(dio.ManifestRow(rel, str(label), split))
                cursor += 1
        dio.write_manifest(out_dir / "manifest.csv", rows)
    print(f"wrote {len(rows)} images and manifest under {out_dir}")
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    manifest = config.path("manifest")
    if not manifest.exists():
        raise InputError(f"manifest not found: {manifest}")
    train_set = _load_split(config, manifest, "train")
    seed = config.train_seed()
    model = MultiExitModel(config.model_config())
    history = train_model(
        model,
        train_set.images,
        train_set.labels,
        epochs=config.get("train", "epochs", 30, int),
        batch_size=config.get("train", "batch_size", 8, int),
        optimizer=config.get("train", "optimizer", "adam"),
        learning_rate=config.get("train", "learning_rate", 1e-3, float),
        seed=seed,
    )
    model_dir = config.path("model_dir")
    with _locked_dir(model_dir):
        ckpt.save_model(model, model_dir, training_seed=seed)
        _write_run_lock(
            model_dir,
            "train",
            config,
            {
                "seed": str(seed),
                "model_fingerprint": ckpt.model_fingerprint(model),
                "final_loss": repr(history[-1]),
            },
        )
    print(f"trained {len(history)} epochs, final loss {history[-1]:.4f}; saved to {model_dir}")
    return 0


def cmd_train_ensemble(args) -> int:
    config = _config_from_args(args)
    manifest = config.path("manifest")
    if not manifest.exists():
        raise InputError(f"manifest not found: {manifest}")
    train_set = _load_split(config, manifest, "train")
    spec = config.ensemble_spec()
    ensemble_dir = config.path("ensemble_dir")
    with _locked_dir(ensemble_dir):
        ensemble = ens.train_ensemble(
            spec,
            train_set.images,
            train_set.labels,
            config.model_config(seed=spec.master_seed),
            out_dir=ensemble_dir,
        )
        extra = {
            "master_seed": str(spec.master_seed),
            "ensemble_fingerprint": ensemble.fingerprint(),
        }
        for member, model in zip(ensemble.member_configs, ensemble.members):
            extra[f"member.{member.index}.fingerprint"] = ckpt.model_fingerprint(model)
        _write_run_lock(ensemble_dir, "train-ensemble", config, extra)
    print(f"trained {len(ensemble)} members; saved to {ensemble_dir}")
    return 0


def cmd_corrupt(args) -> int:
    config = _config_from_args(args)
    manifest = Path(args.data) if args.data else config.path("manifest")
    src = _load_split(config, manifest, args.split)
    corruption = config.corruption_config()
    out_dir = Path(args.out_dir)
    with _locked_dir(out_dir):
        (out_dir / "images").mkdir(exist_ok=True)
        rows: list[dio.ManifestRow] = []
        for i in range(len(src)):
            corrupted = dio.corrupt(src.images[i], corruption, sample_seed=i)
            rel = f"images/corrupt_{i:04d}_c{int(src.labels[i])}.png"
            dio.write_png(out_dir / rel, corrupted)
            rows.append(dio.ManifestRow(rel, str(int(src.labels[i])), args.split))
        dio.write_manifest(out_dir / "manifest.csv", rows)
    print(f"corrupted {len(rows)} images into {out_dir}")
    return 0


def _softmax_probs(logits: np.ndarray) -> np.ndarray:
    exps = np.exp(logits - logits.max())
    return exps / exps.sum()


def _load_scoring_inputs(args, config: RunConfig):
    """Returns (images, labels_or_None, sample_ids)."""
    if args.idx_images or args.idx_labels:
        if not (args.idx_images and args.idx_labels):
            raise InputError("--idx-images and --idx-labels must be given together")
        images, labels = dio.load_idx(args.idx_images, args.idx_labels)
        size = config.get("model", "input_size", 128, int)
        if images.shape[2] != size or images.shape[3] != size:
            images = np.stack(
                [dio.bilinear_resize(img[0], size, size)[None] for img in images]
            )
        ids = [f"idx_{i:05d}" for i in range(len(images))]
        return images, labels, ids
    manifest = Path(args.data) if args.data else config.path("manifest")
    subset = _load_split(config, manifest, args.split)
    return subset.images, subset.labels, subset.sample_ids


def cmd_score(args) -> int:
    config = _config_from_args(args)
    method = _METHOD_FLAGS[args.method]
    origin = Origin(args.origin)
    temperature = config.temperature()
    images, labels, sample_ids = _load_scoring_inputs(args, config)

    thresholds = None
    if args.thresholds:
        thresholds = scoring.read_thresholds(args.thresholds)
        if thresholds.method is not method:
            raise InputError(
                f"thresholds were calibrated for method {thresholds.method.value!r}; "
                f"refusing to score method {method.value!r} with them"
            )

    ensemble_obj = None
    model = None
    if method in (Method.ENSEMBLE, Method.ENSEMBLE_WEIGHTED):
        ensemble_dir = Path(args.ensemble_dir) if args.ensemble_dir else config.path("ensemble_dir")
        ensemble_obj = ens.load_ensemble(ensemble_dir)
        fingerprint = ensemble_obj.fingerprint()
    else:
        model_dir = Path(args.model_dir) if args.model_dir else config.path("model_dir")
        model = ckpt.load_model(model_dir)
        fingerprint = ckpt.model_fingerprint(model)
    if thresholds is not None and thresholds.model_fingerprint:
        if thresholds.model_fingerprint != fingerprint:
            raise InputError(
                "thresholds belong to a different model "
                f"(threshold fingerprint {thresholds.model_fingerprint[:12]}..., "
                f"current {fingerprint[:12]}...)"
            )

    malignant_class = config.malignant_class()
    records: list[ScoreRecord] = []
    classification_rows: list[list[str]] = []
    for i, sample_id in enumerate(sample_ids):
        image = images[i]
        exit_scores: tuple[float, ...] = ()
        if method is Method.SOFTMAX:
            logits = model.forward_final(image).data
            combined = scoring.msp_score(logits)
            malignant = float(_softmax_probs(logits)[malignant_class]) if labels is not None else None
        elif method is Method.ENERGY:
            stack = model.exit_logits(image)
            per_exit = scoring.exit_id_scores(stack, temperature)
            exit_scores = tuple(float(v) for v in per_exit)
            combined = (
                scoring.gate_margin(per_exit, thresholds)
                if thresholds is not None
                else float(per_exit[-1])
            )
            malignant = float(_softmax_probs(stack[-1])[malignant_class]) if labels is not None else None
        else:
            out = ens.ensemble_predict(ensemble_obj, image)
            combined = ens.ensemble_id_score(out, weighted=method is Method.ENSEMBLE_WEIGHTED)
            if thresholds is not None:
                combined = scoring.gate_margin([combined], thresholds)
            malignant = float(out.mean[malignant_class]) if labels is not None else None
        records.append(
            ScoreRecord(
                sample_id=sample_id,
                method=method,
                combined=combined,
                origin=origin,
                exit_scores=exit_scores,
            )
        )
        if args.classification_out and labels is not None:
            classification_rows.append(
                [
                    sample_id,
                    method.value,
                    repr(float(combined)),
                    repr(float(malignant)),
                    str(int(labels[i] == malignant_class)),
                ]
            )

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    scoring.write_scores_csv(out_path, records)
    if args.classification_out:
        if labels is None:
            raise InputError("--classification-out needs labeled manifest input")
        _write_classification_csv(Path(args.classification_out), classification_rows)
    print(f"scored {len(records)} samples ({method.value}, origin {origin.value}) -> {out_path}")
    return 0


def cmd_calibrate(args) -> int:
    config = _config_from_args(args)
    records = scoring.read_scores_csv(Path(args.scores))
    id_records = [r for r in records if r.origin is Origin.ID]
    if not id_records:
        raise CalibrationError(f"{args.scores}: no ID-origin records to calibrate on")
    methods = {r.method for r in id_records}
    if len(methods) != 1:
        raise CalibrationError(f"{args.scores}: mixed methods {sorted(m.value for m in methods)}")
    method = methods.pop()
    if method is Method.ENERGY:
        if any(len(r.exit_scores) != 3 for r in id_records):
            raise CalibrationError(f"{args.scores}: energy records must carry 3 exit scores")
        columns = [[r.exit_scores[e] for r in id_records] for e in range(3)]
    else:
        columns = [[r.combined for r in id_records]]

    model_fp = ""
    if args.model_dir:
        model_fp = ckpt.model_fingerprint(ckpt.load_model(Path(args.model_dir)))
    elif args.ensemble_dir:
        model_fp = ens.load_ensemble(Path(args.ensemble_dir)).fingerprint()

    thresholds = scoring.calibrate(
        columns, config.quantile(), method=method, model_fingerprint=model_fp
    )
    scoring.write_thresholds(Path(args.out), thresholds)
    taus = ", ".join(f"{t:.6g}" for t in thresholds.taus)
    print(f"calibrated {len(thresholds.taus)} threshold(s) at q={thresholds.quantile}: {taus}")
    return 0


def _records_scores(records: list[ScoreRecord], expect: Origin, path: str) -> np.ndarray:
    bad = [r for r in records if r.origin is not expect]
    if bad:
        raise InputError(
            f"{path}: {len(bad)} records have origin {bad[0].origin.value!r}, expected {expect.value!r}"
        )
    return np.array([r.combined for r in records])


def cmd_evaluate(args) -> int:
    id_records = scoring.read_scores_csv(Path(args.id))
    ood_records = scoring.read_scores_csv(Path(args.ood))
    methods = {r.method for r in id_records} | {r.method for r in ood_records}
    if len(methods) != 1:
        raise InputError(
            f"ID and OOD score files disagree on method: {sorted(m.value for m in methods)}"
        )
    method = methods.pop()
    id_scores = _records_scores(id_records, Origin.ID, args.id)
    ood_scores = _records_scores(ood_records, Origin.OOD, args.ood)

    out_dir = Path(args.out_dir)
    with _locked_dir(out_dir):
        row = met.evaluate_ood(method.value, args.set_name, id_scores, ood_scores)
        met.write_metrics_csv(out_dir / "metrics.csv", [row])
        met.write_roc_csv(
            out_dir / f"roc_{method.value}_{args.set_name}.csv",
            met.roc(id_scores, ood_scores),
        )
        has_exits = all(len(r.exit_scores) == 3 for r in id_records + ood_records)
        if method is Method.ENERGY and has_exits:
            id_cols = np.array([r.exit_scores for r in id_records])
            ood_cols = np.array([r.exit_scores for r in ood_records])
            met.write_exits_csv(
                out_dir / "exits.csv", [met.evaluate_exits(args.set_name, id_cols, ood_cols)]
            )
    print(
        f"{method.value} vs {args.set_name}: auc={row.auc_pct:.1f}% fpr95={row.fpr95_pct:.1f}% "
        f"-> {out_dir}"
    )
    return 0


def _print_table(title: str, header: list[str], rows: list[list[str]]) -> None:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    print(title)
    print("  " + "  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in rows:
        print("  " + "  ".join(v.ljust(w) for v, w in zip(row, widths)))


def cmd_report(args) -> int:
    out_dir = Path(args.out_dir)
    ood_rows: list[met.OodResult] = []
    exit_rows: list[met.ExitResult] = []
    roc_files: list[Path] = []
    for input_dir in (Path(p) for p in args.inputs):
        ood_rows.extend(met.read_metrics_csv(input_dir / "metrics.csv"))
        exits_path = input_dir / "exits.csv"
        if exits_path.exists():
            exit_rows.extend(met.read_exits_csv(exits_path))
        roc_files.extend(sorted(input_dir.glob("roc_*.csv")))

    classification_rows: list[met.ClassificationResult] = []
    for cls_path in (Path(p) for p in args.classification or []):
        method, ood_scores, malig, labels = _read_classification_csv(cls_path)
        classification_rows.append(met.evaluate_classification(method, ood_scores, malig, labels))

    with _locked_dir(out_dir):
        met.write_metrics_csv(out_dir / "metrics.csv", ood_rows)
        if exit_rows:
            met.write_exits_csv(out_dir / "exits.csv", exit_rows)
        if classification_rows:
            met.write_classification_csv(out_dir / "classification.csv", classification_rows)
        for src in roc_files:
            shutil.copyfile(src, out_dir / src.name)

    _print_table(
        "OOD detection (AUC% up, FPR95% down)",
        ["method", "ood_set", "auc_pct", "fpr95_pct"],
        [[r.method, r.ood_set, f"{r.auc_pct:.1f}", f"{r.fpr95_pct:.1f}"] for r in ood_rows],
    )
    if exit_rows:
        _print_table(
            "Per-exit energy results",
            ["ood_set", "auc_e1", "auc_e2", "auc_e3", "fpr95_e1", "fpr95_e2", "fpr95_e3"],
            [
                [r.ood_set]
                + [f"{v:.1f}" for v in r.auc_pct]
                + [f"{v:.1f}" for v in r.fpr95_pct]
                for r in exit_rows
            ],
        )
    if classification_rows:
        _print_table(
            "Cancer-vs-rest classification",
            ["method", "auc_pct", "auc_fnr5_pct"],
            [[r.method, f"{r.auc_pct:.1f}", f"{r.auc_fnr5_pct:.1f}"] for r in classification_rows],
        )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodkit",
        description="OOD detection toolkit: train, score, calibrate, evaluate, report.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="INI config file; flags override its keys")
        p.add_argument("--seed", type=int, help="override the command's primary seed")

    p = sub.add_parser("synth", help="generate a synthetic blob dataset (PNG + manifest)")
    common(p)
    p.add_argument("--out-dir", help="output directory (default <output_dir>/synth)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the multi-exit model on the manifest's train split")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-ensemble", help="train a diversified deep ensemble")
    common(p)
    p.set_defaults(func=cmd_train_ensemble)

    p = sub.add_parser("corrupt", help="produce a corrupted copy of a manifest split")
    common(p)
    p.add_argument("--data", help="source manifest (default [paths] manifest)")
    p.add_argument("--split", default="test", choices=dio.SPLITS)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("score", help="compute per-sample OOD scores into a CSV")
    common(p)
    p.add_argument("--method", required=True, choices=sorted(_METHOD_FLAGS))
    p.add_argument("--data", help="manifest to score (default [paths] manifest)")
    p.add_argument("--split", default="test", choices=dio.SPLITS)
    p.add_argument("--idx-images", help="IDX image file (alternative to --data)")
    p.add_argument("--idx-labels", help="IDX label file")
    p.add_argument("--origin", default="ID", choices=[o.value for o in Origin])
    p.add_argument("--out", required=True, help="scores CSV path")
    p.add_argument("--thresholds", help="thresholds file; energy scores become gate margins")
    p.add_argument("--classification-out", help="also write malignant-score CSV (labeled data)")
    p.add_argument("--model-dir", help="checkpoint dir (default [paths] model_dir)")
    p.add_argument("--ensemble-dir", help="ensemble dir (default [paths] ensemble_dir)")
    p.add_argument("--temperature", type=float, help="energy temperature override")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("calibrate", help="calibrate per-exit thresholds from ID scores")
    common(p)
    p.add_argument("--scores", required=True, help="scores CSV from the calibrate split")
    p.add_argument("--quantile", type=float, help="ID quantile the gate must pass (default 0.95)")
    p.add_argument("--out", required=True, help="thresholds file path")
    p.add_argument("--model-dir", help="stamp this model's fingerprint into the thresholds")
    p.add_argument("--ensemble-dir", help="stamp this ensemble's fingerprint")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="ROC/AUC/FPR95 for one ID-vs-OOD score pair")
    common(p)
    p.add_argument("--id", required=True, help="ID scores CSV")
    p.add_argument("--ood", required=True, help="OOD scores CSV")
    p.add_argument("--set-name", required=True, help="OOD set name for tables/files")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="merge evaluations into summary tables")
    common(p)
    p.add_argument("--inputs", nargs="+", required=True, help="evaluate output dirs")
    p.add_argument("--classification", nargs="*", help="classification score CSVs")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ToolkitError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
