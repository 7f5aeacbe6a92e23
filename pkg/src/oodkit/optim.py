"""Adam and RMSprop parameter updates.

Constants are fixed: Adam beta1=0.9, beta2=0.999, eps=1e-8; RMSprop
rho=0.9, eps=1e-8 (plain variant, no momentum, no centering). Both
optimizers keep per-parameter moment buffers keyed by parameter name.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .engine import Tensor
from .errors import ConfigurationError, NumericsError

__all__ = ["Optimizer", "Adam", "RMSprop", "make_optimizer", "OPTIMIZER_KINDS"]

OPTIMIZER_KINDS = ("adam", "rmsprop")


class Optimizer:
    """Base class holding the learning rate, step counter and slots."""

    kind = "base"

    def __init__(self, learning_rate: float):
        if learning_rate <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {learning_rate}")
        self.learning_rate = float(learning_rate)
        self.step_count = 0
        self._slots: dict[str, dict[str, np.ndarray]] = {}

    def _slot(self, name: str, param: Tensor, keys: tuple[str, ...]) -> dict[str, np.ndarray]:
        slot = self._slots.get(name)
        if slot is None:
            slot = {k: np.zeros_like(param.data) for k in keys}
            self._slots[name] = slot
        elif slot[keys[0]].shape != param.data.shape:
            raise ConfigurationError(
                f"optimizer slot for {name!r} has shape {slot[keys[0]].shape}, "
                f"parameter has {param.data.shape}"
            )
        return slot

    @staticmethod
    def _gradient(name: str, param: Tensor) -> np.ndarray:
        g = param.grad if param.grad is not None else np.zeros_like(param.data)
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
        return g

    def step(self, params: Mapping[str, Tensor]) -> None:
        raise NotImplementedError


class Adam(Optimizer):
    kind = "adam"
    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def step(self, params: Mapping[str, Tensor]) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = self._gradient(name, p)
            slot = self._slot(name, p, ("m", "v"))
            slot["m"] = self.beta1 * slot["m"] + (1.0 - self.beta1) * g
            slot["v"] = self.beta2 * slot["v"] + (1.0 - self.beta2) * g * g
            m_hat = slot["m"] / bc1
            v_hat = slot["v"] / bc2
            p.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


class RMSprop(Optimizer):
    kind = "rmsprop"
    rho = 0.9
    eps = 1e-8

    def step(self, params: Mapping[str, Tensor]) -> None:
        self.step_count += 1
        for name, p in params.items():
            g = self._gradient(name, p)
            slot = self._slot(name, p, ("v",))
            slot["v"] = self.rho * slot["v"] + (1.0 - self.rho) * g * g
            p.data -= self.learning_rate * g / (np.sqrt(slot["v"]) + self.eps)


def make_optimizer(kind: str, learning_rate: float) -> Optimizer:
    if kind == "adam":
        return Adam(learning_rate)
    if kind == "rmsprop":
        return RMSprop(learning_rate)
    raise ConfigurationError(f"unknown optimizer kind {kind!r} (expected one of {OPTIMIZER_KINDS})")
