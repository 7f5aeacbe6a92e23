"""Deep-ensemble training, persistence, and uncertainty scoring.

Members share one architecture but diversify through per-member
hyperparameters drawn from the spec (leave-out fraction, learning
rate, optimizer, epochs, batch size) plus independent weight seeds.
Disagreement between members, measured as the per-class standard
deviation of the softmax outputs, is the OOD signal: its sum U (or the
mean-weighted sum U_w) is high for samples the ensemble cannot agree
on, so the gate-oriented ID score is -U.

On disk an ensemble is a directory of ``member_{i}`` checkpoints plus
an ``ensemble.manifest`` recording the spec, the master seed, and
every member's payload fingerprint.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_model, model_fingerprint, read_manifest, save_model
from .errors import ConfigurationError, DataError, FormatError, InputError
from .model import ModelConfig, MultiExitModel, train_model
from .seeding import derived_rng

__all__ = [
    "EnsembleSpec",
    "MemberConfig",
    "EnsembleOutput",
    "Ensemble",
    "sample_member_configs",
    "train_ensemble",
    "load_ensemble",
    "aggregate_predictions",
    "ensemble_predict",
    "ensemble_id_score",
    "ensemble_malignant_score",
]

ENSEMBLE_MANIFEST = "ensemble.manifest"


@dataclass(frozen=True)
class EnsembleSpec:
    """Diversification protocol for the member sampler."""

    n_members: int = 20
    leave_out_range: tuple[float, float] = (0.0, 0.15)
    learning_rate_range: tuple[float, float] = (1e-4, 1e-3)
    optimizers: tuple[str, ...] = ("adam", "rmsprop")
    epochs_range: tuple[int, int] = (25, 85)
    batch_sizes: tuple[int, ...] = (8, 16, 32, 64, 128)
    master_seed: int = 0

    def __post_init__(self):
        if self.n_members < 2:
            raise ConfigurationError(f"an ensemble needs >= 2 members, got {self.n_members}")
        lo, hi = self.leave_out_range
        if not (0.0 <= lo <= hi < 1.0):
            raise ConfigurationError(f"leave-out range ({lo}, {hi}) must lie in [0, 1)")
        lo, hi = self.learning_rate_range
        if not (0.0 < lo <= hi):
            raise ConfigurationError(f"learning-rate range ({lo}, {hi}) invalid")
        e0, e1 = self.epochs_range
        if not (1 <= e0 <= e1):
            raise ConfigurationError(f"epochs range ({e0}, {e1}) invalid")
        if not self.optimizers or not self.batch_sizes:
            raise ConfigurationError("optimizers and batch_sizes must be non-empty")
        if any(b < 1 for b in self.batch_sizes):
            raise ConfigurationError(f"batch sizes {self.batch_sizes} must be positive")


@dataclass(frozen=True)
class MemberConfig:
    index: int
    leave_out_fraction: float
    learning_rate: float
    optimizer: str
    epochs: int
    batch_size: int
    seed: int


def sample_member_configs(spec: EnsembleSpec) -> list[MemberConfig]:
    """Draw one config per member, fully determined by the master seed.

    Leave-out and epochs are uniform over their ranges, the learning
    rate is log-uniform, optimizer and batch size uniform over their
    sets.
    """
    rng = derived_rng(spec.master_seed, "sample")
    log_lo, log_hi = (math.log10(v) for v in spec.learning_rate_range)
    configs = []
    for i in range(spec.n_members):
        configs.append(
            MemberConfig(
                index=i,
                leave_out_fraction=float(rng.uniform(*spec.leave_out_range)),
                learning_rate=float(10.0 ** rng.uniform(log_lo, log_hi)),
                optimizer=spec.optimizers[int(rng.integers(len(spec.optimizers)))],
                epochs=int(rng.integers(spec.epochs_range[0], spec.epochs_range[1] + 1)),
                batch_size=int(spec.batch_sizes[int(rng.integers(len(spec.batch_sizes)))]),
                seed=int(rng.integers(0, 2**31)),
            )
        )
    return configs


def _leave_out_indices(member: MemberConfig, n: int) -> np.ndarray:
    rng = derived_rng(member.seed, "leaveout")
    n_out = int(math.floor(member.leave_out_fraction * n))
    if n_out == 0:
        return np.empty(0, dtype=np.int64)
    return np.sort(rng.choice(n, size=n_out, replace=False)).astype(np.int64)


@dataclass
class Ensemble:
    members: list[MultiExitModel]
    member_configs: list[MemberConfig]
    spec: EnsembleSpec
    left_out: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.members)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for m in self.members:
            digest.update(model_fingerprint(m).encode())
        return digest.hexdigest()


def train_ensemble(
    spec: EnsembleSpec,
    images: np.ndarray,
    labels: np.ndarray,
    model_config: ModelConfig,
    out_dir: str | Path | None = None,
) -> Ensemble:
    """Train all members sequentially; optionally persist to out_dir.

    Each member trains on its own seeded subsample (the drawn leave-out
    fraction removed). Members are fully independent, so callers may
    shard this loop across processes without changing any result.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    configs = sample_member_configs(spec)
    members: list[MultiExitModel] = []
    left_out_all: list[np.ndarray] = []
    for member in configs:
        left_out = _leave_out_indices(member, len(images))
        keep = np.setdiff1d(np.arange(len(images)), left_out)
        kept_labels = labels[keep]
        counts = np.bincount(kept_labels, minlength=model_config.n_classes)
        for c in np.flatnonzero(counts == 0):
            raise DataError(
                f"member {member.index}: class {int(c)} has no samples left after leave-out"
            )
        model = MultiExitModel(dataclasses.replace(model_config, seed=member.seed))
        train_model(
            model,
            images[keep],
            kept_labels,
            epochs=member.epochs,
            batch_size=member.batch_size,
            optimizer=member.optimizer,
            learning_rate=member.learning_rate,
            seed=member.seed,
        )
        members.append(model)
        left_out_all.append(left_out)
    ensemble = Ensemble(members=members, member_configs=configs, spec=spec, left_out=left_out_all)
    if out_dir is not None:
        save_ensemble(ensemble, out_dir)
    return ensemble


def _member_dir(root: Path, index: int) -> Path:
    return root / f"member_{index}"


def save_ensemble(ensemble: Ensemble, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for model, member, left_out in zip(ensemble.members, ensemble.member_configs, ensemble.left_out):
        directory = save_model(model, _member_dir(out_dir, member.index), training_seed=member.seed)
        with (directory / "manifest").open("a", encoding="utf-8") as fh:
            fh.write(f"member.index = {member.index}\n")
            fh.write(f"member.leave_out_fraction = {member.leave_out_fraction!r}\n")
            fh.write(f"member.learning_rate = {member.learning_rate!r}\n")
            fh.write(f"member.optimizer = {member.optimizer}\n")
            fh.write(f"member.epochs = {member.epochs}\n")
            fh.write(f"member.batch_size = {member.batch_size}\n")
            fh.write(f"member.seed = {member.seed}\n")
            fh.write(f"member.left_out = {','.join(str(int(i)) for i in left_out)}\n")

    spec = ensemble.spec
    lines = [
        "format_version = 1",
        f"n_members = {spec.n_members}",
        f"master_seed = {spec.master_seed}",
        f"spec.leave_out_range = {spec.leave_out_range[0]!r},{spec.leave_out_range[1]!r}",
        f"spec.learning_rate_range = {spec.learning_rate_range[0]!r},{spec.learning_rate_range[1]!r}",
        f"spec.optimizers = {','.join(spec.optimizers)}",
        f"spec.epochs_range = {spec.epochs_range[0]},{spec.epochs_range[1]}",
        f"spec.batch_sizes = {','.join(str(b) for b in spec.batch_sizes)}",
    ]
    lines += [
        f"member.{m.index}.fingerprint = {model_fingerprint(model)}"
        for m, model in zip(ensemble.member_configs, ensemble.members)
    ]
    (out_dir / ENSEMBLE_MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out_dir


def load_ensemble(directory: str | Path) -> Ensemble:
    directory = Path(directory)
    manifest_path = directory / ENSEMBLE_MANIFEST
    if not manifest_path.exists():
        raise FormatError(f"no ensemble manifest at {manifest_path}")
    entries: dict[str, str] = {}
    for raw in manifest_path.read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or "=" not in line:
            continue
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    try:
        lo_lo, lo_hi = (float(v) for v in entries["spec.leave_out_range"].split(","))
        lr_lo, lr_hi = (float(v) for v in entries["spec.learning_rate_range"].split(","))
        e0, e1 = (int(v) for v in entries["spec.epochs_range"].split(","))
        spec = EnsembleSpec(
            n_members=int(entries["n_members"]),
            leave_out_range=(lo_lo, lo_hi),
            learning_rate_range=(lr_lo, lr_hi),
            optimizers=tuple(entries["spec.optimizers"].split(",")),
            epochs_range=(e0, e1),
            batch_sizes=tuple(int(b) for b in entries["spec.batch_sizes"].split(",")),
            master_seed=int(entries["master_seed"]),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{manifest_path}: malformed ensemble manifest: {exc}") from exc

    members: list[MultiExitModel] = []
    configs: list[MemberConfig] = []
    left_out: list[np.ndarray] = []
    for i in range(spec.n_members):
        member_dir = _member_dir(directory, i)
        model = load_model(member_dir)
        meta = read_manifest(member_dir)
        try:
            configs.append(
                MemberConfig(
                    index=int(meta["member.index"]),
                    leave_out_fraction=float(meta["member.leave_out_fraction"]),
                    learning_rate=float(meta["member.learning_rate"]),
                    optimizer=meta["member.optimizer"],
                    epochs=int(meta["member.epochs"]),
                    batch_size=int(meta["member.batch_size"]),
                    seed=int(meta["member.seed"]),
                )
            )
            ids = meta["member.left_out"]
            left_out.append(
                np.array([int(v) for v in ids.split(",")] if ids else [], dtype=np.int64)
            )
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{member_dir}: malformed member metadata: {exc}") from exc
        members.append(model)
    return Ensemble(members=members, member_configs=configs, spec=spec, left_out=left_out)


# ---------------------------------------------------------------------------
# prediction


@dataclass(frozen=True)
class EnsembleOutput:
    """Aggregated member predictions for one image."""

    member_probs: np.ndarray  # (N, K)
    mean: np.ndarray  # per-class mean
    std: np.ndarray  # per-class population std (divisor N)
    uncertainty: float  # U = sum_c std_c
    weighted_uncertainty: float  # U_w = sum_c mean_c * std_c
    vote: int


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    exps = np.exp(logits - logits.max())
    return exps / exps.sum()


def aggregate_predictions(member_probs: np.ndarray) -> EnsembleOutput:
    """Reduce an (N, K) stack of member probability vectors.

    Per-class std uses divisor N (population convention). Ties in the
    majority vote go to the class with the highest mean probability,
    then to the lowest class index.
    """
    probs = np.asarray(member_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] < 2:
        raise InputError(f"need an (N>=2, K) probability stack, got shape {probs.shape}")
    mean = probs.mean(axis=0)
    std = probs.std(axis=0)  # ddof=0
    votes = np.bincount(probs.argmax(axis=1), minlength=probs.shape[1])
    tied = np.flatnonzero(votes == votes.max())
    vote = int(tied[np.argmax(mean[tied])])  # argmax keeps lowest index on ties
    return EnsembleOutput(
        member_probs=probs,
        mean=mean,
        std=std,
        uncertainty=float(std.sum()),
        weighted_uncertainty=float((mean * std).sum()),
        vote=vote,
    )


def ensemble_predict(ensemble: Ensemble, image: np.ndarray) -> EnsembleOutput:
    """Run every member on the image and aggregate the softmax outputs."""
    if len(ensemble.members) < 2:
        raise InputError("ensemble prediction needs at least 2 members")
    k = ensemble.members[0].config.n_classes
    for m in ensemble.members[1:]:
        if m.config.n_classes != k:
            raise ConfigurationError(
                f"members disagree on class count: {k} vs {m.config.n_classes}"
            )
    return aggregate_predictions(
        np.stack([_stable_softmax(m.forward_final(image).data) for m in ensemble.members])
    )


def ensemble_id_score(output: EnsembleOutput, weighted: bool = False) -> float:
    """Negated uncertainty, so higher means more ID."""
    return -(output.weighted_uncertainty if weighted else output.uncertainty)


def ensemble_malignant_score(
    ensemble: Ensemble, image: np.ndarray, malignant_class: int | None = None
) -> float:
    """Mean member probability of the designated malignant class."""
    k = ensemble.members[0].config.n_classes
    if malignant_class is None:
        raise ConfigurationError("no malignant class designated")
    if not 0 <= malignant_class < k:
        raise ConfigurationError(f"malignant class {malignant_class} out of range for K={k}")
    return float(ensemble_predict(ensemble, image).mean[malignant_class])
