"""Multi-exit convolutional classifier and its training loop.

The base network is a stack of conv(3x3, same padding) + ReLU +
maxpool(2x2) blocks followed by two fully connected layers. Two
auxiliary exit heads (conv 3x3 valid + ReLU + maxpool + linear) hang
off intermediate blocks, so every forward pass yields three logit
vectors. Training minimizes the weighted sum of the three
cross-entropy losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Tensor
from .errors import ConfigurationError, DataError, InputError, NumericsError
from .optim import OPTIMIZER_KINDS, make_optimizer
from .seeding import derived_rng

__all__ = ["ModelConfig", "ExitLogits", "MultiExitModel", "train_model", "accuracy"]

KERNEL = 3  # all convolutions are 3x3
N_EXITS = 3  # two auxiliary heads plus the final classifier


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``exit_blocks`` are 1-indexed conv-block positions after which the
    auxiliary heads attach; they must be strictly increasing and lie
    before the last block.
    """

    input_size: int = 128
    channels: tuple[int, ...] = (16, 32, 64, 128, 128)
    exit_blocks: tuple[int, int] = (2, 4)
    exit_channels: int = 128
    hidden: int = 256
    n_classes: int = 3
    loss_weights: tuple[float, float, float] = (0.5, 0.5, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.input_size < 4:
            raise ConfigurationError(f"input size {self.input_size} too small")
        if not self.channels or any(c < 1 for c in self.channels):
            raise ConfigurationError(f"bad channel plan {self.channels}")
        if len(self.exit_blocks) != 2:
            raise ConfigurationError(
                f"exactly two auxiliary exits required, got blocks {self.exit_blocks}"
            )
        if not all(1 <= e < len(self.channels) for e in self.exit_blocks):
            raise ConfigurationError(
                f"exit blocks {self.exit_blocks} must lie in [1, {len(self.channels) - 1}]"
            )
        if list(self.exit_blocks) != sorted(set(self.exit_blocks)):
            raise ConfigurationError(f"exit blocks {self.exit_blocks} must strictly increase")
        if len(self.loss_weights) != N_EXITS:
            raise ConfigurationError(f"need {N_EXITS} loss weights, got {self.loss_weights}")
        if any(w < 0 for w in self.loss_weights) or sum(self.loss_weights) <= 0:
            raise ConfigurationError(f"loss weights {self.loss_weights} must be >= 0, sum > 0")
        if self.exit_channels < 1 or self.hidden < 1:
            raise ConfigurationError("exit_channels and hidden must be positive")
        if self.n_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {self.n_classes}")
        self._spatial_plan()

    def _spatial_plan(self) -> list[int]:
        """Per-block output sizes; raises if pooling or heads cannot fit."""
        sizes = []
        s = self.input_size
        for i, _ in enumerate(self.channels, start=1):
            if s % 2:
                raise ConfigurationError(
                    f"spatial size {s} before block {i} is odd; input {self.input_size} "
                    f"does not support {len(self.channels)} pooling stages"
                )
            s //= 2
            sizes.append(s)
        for e in self.exit_blocks:
            head_in = sizes[e - 1]
            if head_in - (KERNEL - 1) < 2 or (head_in - (KERNEL - 1)) % 2:
                raise ConfigurationError(
                    f"exit after block {e} sees a {head_in}x{head_in} map; too small for "
                    f"a valid {KERNEL}x{KERNEL} conv plus 2x2 pool"
                )
        return sizes


class ExitLogits:
    """The three per-exit logit vectors of one forward pass.

    Exits 1 and 2 are the auxiliary heads; exit 3 is the network's
    final pre-softmax output.
    """

    __slots__ = ("exit1", "exit2", "exit3")

    def __init__(self, exit1: Tensor, exit2: Tensor, exit3: Tensor):
        self.exit1 = exit1
        self.exit2 = exit2
        self.exit3 = exit3

    @property
    def tensors(self) -> tuple[Tensor, Tensor, Tensor]:
        return (self.exit1, self.exit2, self.exit3)

    def arrays(self) -> np.ndarray:
        """Logits stacked into a (3, K) array."""
        return np.stack([t.data for t in self.tensors])


class MultiExitModel:
    """Parameter container plus the forward graph builders.

    Training mutates parameters, so confine one instance to one thread
    while it trains; frozen models only read parameters during forward
    passes and are safe to share across threads.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self._params: dict[str, Tensor] = {}
        self._head_fc_in: dict[int, int] = {}
        self._build()

    # -- construction -----------------------------------------------------

    def _new_param(self, name: str, shape: tuple[int, ...], rng, fan_in: int | None) -> Tensor:
        if fan_in is None:  # bias
            data = np.zeros(shape)
        else:  # He initialization
            data = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        t = Tensor(data)
        self._params[name] = t
        return t

    def _build(self) -> None:
        cfg = self.config
        rng = derived_rng(cfg.seed, "init")
        sizes = cfg._spatial_plan()
        in_ch = 1
        for i, out_ch in enumerate(cfg.channels, start=1):
            self._new_param(f"block{i}.kernels", (out_ch, in_ch, KERNEL, KERNEL), rng, in_ch * KERNEL * KERNEL)
            self._new_param(f"block{i}.bias", (out_ch,), rng, None)
            in_ch = out_ch
        for exit_no, block in enumerate(cfg.exit_blocks, start=1):
            ch = cfg.channels[block - 1]
            self._new_param(
                f"exit{exit_no}.conv.kernels",
                (cfg.exit_channels, ch, KERNEL, KERNEL),
                rng,
                ch * KERNEL * KERNEL,
            )
            self._new_param(f"exit{exit_no}.conv.bias", (cfg.exit_channels,), rng, None)
            head_spatial = (sizes[block - 1] - (KERNEL - 1)) // 2
            fc_in = cfg.exit_channels * head_spatial * head_spatial
            self._head_fc_in[exit_no] = fc_in
            self._new_param(f"exit{exit_no}.fc.weights", (cfg.n_classes, fc_in), rng, fc_in)
            self._new_param(f"exit{exit_no}.fc.bias", (cfg.n_classes,), rng, None)
        trunk_in = cfg.channels[-1] * sizes[-1] * sizes[-1]
        self._new_param("fc1.weights", (cfg.hidden, trunk_in), rng, trunk_in)
        self._new_param("fc1.bias", (cfg.hidden,), rng, None)
        self._new_param("out.weights", (cfg.n_classes, cfg.hidden), rng, cfg.hidden)
        self._new_param("out.bias", (cfg.n_classes,), rng, None)

    # -- parameter access --------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    # -- forward -----------------------------------------------------------

    def _check_input(self, image: np.ndarray) -> np.ndarray:
        arr = np.asarray(image, dtype=np.float64)
        expected = (1, self.config.input_size, self.config.input_size)
        if arr.shape != expected:
            raise InputError(f"expected image shape {expected}, got {arr.shape}")
        if arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9:
            raise InputError("image pixels must lie in [0, 1]")
        return arr

    def _head(self, exit_no: int, feat: Tensor) -> Tensor:
        p = self._params
        z = engine.conv2d(feat, p[f"exit{exit_no}.conv.kernels"], p[f"exit{exit_no}.conv.bias"], padding="valid")
        z = engine.maxpool2d(engine.relu(z))
        return engine.dense(engine.flatten(z), p[f"exit{exit_no}.fc.weights"], p[f"exit{exit_no}.fc.bias"])

    def _trunk_logits(self, feat: Tensor) -> Tensor:
        p = self._params
        h = engine.relu(engine.dense(engine.flatten(feat), p["fc1.weights"], p["fc1.bias"]))
        return engine.dense(h, p["out.weights"], p["out.bias"])

    def forward(self, image: np.ndarray) -> ExitLogits:
        """All three exits' logits for one [1,H,W] image in [0,1]."""
        x = Tensor(self._check_input(image))
        p = self._params
        aux: list[Tensor] = []
        feat = x
        for i in range(1, len(self.config.channels) + 1):
            feat = engine.maxpool2d(
                engine.relu(engine.conv2d(feat, p[f"block{i}.kernels"], p[f"block{i}.bias"], padding="same"))
            )
            if i in self.config.exit_blocks:
                aux.append(self._head(len(aux) + 1, feat))
        return ExitLogits(aux[0], aux[1], self._trunk_logits(feat))

    def forward_final(self, image: np.ndarray) -> Tensor:
        """Final-exit logits only; auxiliary heads are not evaluated."""
        x = Tensor(self._check_input(image))
        p = self._params
        feat = x
        for i in range(1, len(self.config.channels) + 1):
            feat = engine.maxpool2d(
                engine.relu(engine.conv2d(feat, p[f"block{i}.kernels"], p[f"block{i}.bias"], padding="same"))
            )
        return self._trunk_logits(feat)

    def exit_logits(self, image: np.ndarray) -> np.ndarray:
        """Convenience: forward() reduced to a (3, K) float array."""
        return self.forward(image).arrays()


@dataclass
class _Batchizer:
    """Iterates seeded per-epoch permutations in fixed-size chunks."""

    n: int
    batch_size: int
    rng: np.random.Generator = field(repr=False)

    def epoch(self):
        perm = self.rng.permutation(self.n)
        for start in range(0, self.n, self.batch_size):
            yield perm[start : start + self.batch_size]


def _check_labels(labels: np.ndarray, n_classes: int) -> None:
    if labels.size == 0:
        raise DataError("empty training set")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError(f"labels must lie in [0, {n_classes - 1}]")
    counts = np.bincount(labels, minlength=n_classes)
    for c in np.flatnonzero(counts == 0):
        raise DataError(f"class {int(c)} has no training samples")


def train_model(
    model: MultiExitModel,
    images: np.ndarray,
    labels: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    optimizer: str = "adam",
    learning_rate: float = 1e-3,
    seed: int = 0,
) -> list[float]:
    """Train in place; returns the mean weighted loss per epoch.

    Shuffling is a per-epoch permutation drawn from the given seed and
    nothing else, so identical calls give identical trajectories.
    """
    if optimizer not in OPTIMIZER_KINDS:
        raise ConfigurationError(f"unknown optimizer {optimizer!r}")
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images vs {len(labels)} labels")
    _check_labels(labels, model.config.n_classes)

    opt = make_optimizer(optimizer, learning_rate)
    batches = _Batchizer(len(images), int(batch_size), derived_rng(seed, "shuffle"))
    weights = model.config.loss_weights
    history: list[float] = []
    for epoch in range(int(epochs)):
        epoch_losses: list[float] = []
        for batch_no, batch in enumerate(batches.epoch()):
            model.zero_grad()
            terms = []
            for idx in batch:
                exits = model.forward(images[idx])
                ces = [engine.cross_entropy(engine.softmax(z), labels[idx]) for z in exits.tensors]
                terms.append(engine.weighted_sum(ces, weights))
            batch_loss = engine.weighted_sum(terms, [1.0 / len(terms)] * len(terms))
            value = batch_loss.item()
            if not math.isfinite(value):
                raise NumericsError(f"non-finite loss at epoch {epoch}, batch {batch_no}")
            engine.backward(batch_loss)
            opt.step(model.parameters())
            epoch_losses.append(value)
        history.append(float(np.mean(epoch_losses)))
    return history


def accuracy(model: MultiExitModel, images: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of samples whose final-exit argmax matches the label."""
    hits = sum(
        int(np.argmax(model.forward_final(img).data) == lab) for img, lab in zip(images, labels)
    )
    return hits / len(labels)
