"""oodkit: out-of-distribution detection around a multi-exit CNN.

Submodules:

- engine: dense tensors with reverse-mode differentiation, conv/pool/
  dense/activation layers, losses
- optim: Adam and RMSprop
- model: the multi-exit classifier, training loop
- checkpoint: text-manifest + float32-payload serialization
- scoring: max-softmax and energy scores, threshold calibration, gate
- ensemble: diversified deep ensembles and uncertainty scores
- metrics: ROC, AUC, FPR95, FNR5-filtered classification AUC, reports
- data: manifests, IDX files, corruption pipeline, synthetic data
- cli: the `oodkit` command-line front end
"""

from . import checkpoint, data, engine, ensemble, errors, metrics, model, optim, scoring

__all__ = [
    "checkpoint",
    "data",
    "engine",
    "ensemble",
    "errors",
    "metrics",
    "model",
    "optim",
    "scoring",
]

__version__ = "0.1.0"
