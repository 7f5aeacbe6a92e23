"""Dense-tensor numerical core with reverse-mode differentiation.

Every tensor stores float64 data row-major. Operations build a
computation graph on the fly; calling :func:`backward` on a scalar node
walks the graph in reverse topological order and accumulates gradients
into every participating tensor's ``grad`` field.

Conventions fixed here:

* conv2d is cross-correlation (no kernel flip), padding "valid" or
  "same" (odd kernels only, zero padding).
* maxpool2d is 2x2 stride 2; the backward pass routes each window's
  gradient to the first maximal cell in row-major order.
* softmax subtracts the max logit before exponentiating.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, GraphStateError, InputError, ShapeError

__all__ = [
    "Tensor",
    "backward",
    "add",
    "mul",
    "sum_all",
    "conv2d",
    "maxpool2d",
    "dense",
    "relu",
    "flatten",
    "softmax",
    "cross_entropy",
    "weighted_sum",
]


class Tensor:
    """A float64 array plus an optional gradient and graph bookkeeping.

    Leaf tensors (parameters, inputs) have no parents. Tensors produced
    by an operation keep references to their parents and a closure that
    propagates an upstream gradient to them.
    """

    __slots__ = ("data", "grad", "_parents", "_grad_fn")

    def __init__(
        self,
        data,
        _parents: tuple["Tensor", ...] = (),
        _grad_fn: Callable[[np.ndarray], None] | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:  # 0-d arrays are always contiguous
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._grad_fn = _grad_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:  # pragma: no cover
        kind = "leaf" if self.is_leaf() else "op"
        return f"Tensor(shape={self.shape}, {kind})"


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every tensor feeding into ``loss``.

    ``loss`` must be a scalar produced by a recorded operation;
    gradients accumulate (callers zero them between steps).
    """
    if loss.size != 1:
        raise InputError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.is_leaf():
        raise GraphStateError("backward called before any forward computation was recorded")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._grad_fn is not None and node.grad is not None:
            node._grad_fn(node.grad)


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data + b.data, (a, b))

    def grad_fn(g: np.ndarray) -> None:
        a._accumulate(g)
        b._accumulate(g)

    out._grad_fn = grad_fn
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data * b.data, (a, b))

    def grad_fn(g: np.ndarray) -> None:
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    out._grad_fn = grad_fn
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(), (x,))

    def grad_fn(g: np.ndarray) -> None:
        x._accumulate(np.full_like(x.data, float(g)))

    out._grad_fn = grad_fn
    return out


def weighted_sum(terms: Sequence[Tensor], weights: Iterable[float]) -> Tensor:
    """Scalar combination sum_i w_i * t_i of scalar tensors."""
    ws = [float(w) for w in weights]
    if len(ws) != len(terms):
        raise ConfigurationError(f"weighted_sum: {len(terms)} terms vs {len(ws)} weights")
    for t in terms:
        if t.size != 1:
            raise InputError(f"weighted_sum expects scalar terms, got shape {t.shape}")
    value = sum(w * t.item() for w, t in zip(ws, terms))
    out = Tensor(np.float64(value), tuple(terms))

    def grad_fn(g: np.ndarray) -> None:
        gs = float(g)
        for w, t in zip(ws, terms):
            t._accumulate(np.full_like(t.data, w * gs))

    out._grad_fn = grad_fn
    return out


# ---------------------------------------------------------------------------
# layers


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding: str = "valid") -> Tensor:
    """Cross-correlate a [C,H,W] input with [O,C,kh,kw] kernels.

    "valid" shrinks the output to H-kh+1; "same" zero-pads so the
    spatial size is preserved (odd kernel sizes only).
    """
    if x.data.ndim != 3:
        raise InputError(f"conv2d expects a [C,H,W] input, got shape {x.shape}")
    if kernels.data.ndim != 4:
        raise ConfigurationError(f"conv2d kernels must be [O,C,kh,kw], got {kernels.shape}")
    c, h, w = x.shape
    o, ck, kh, kw = kernels.shape
    if ck != c:
        raise ConfigurationError(
            f"conv2d channel mismatch: input shape {x.shape} vs kernel shape {kernels.shape}"
        )
    if bias.shape != (o,):
        raise ConfigurationError(f"conv2d bias shape {bias.shape} does not match {o} kernels")

    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigurationError(f"same padding needs odd kernels, got {kh}x{kw}")
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ConfigurationError(f"unknown padding mode {padding!r}")

    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ConfigurationError(
            f"kernel shape {kernels.shape} larger than padded input shape {x.shape}"
        )

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    ho = xp.shape[1] - kh + 1
    wo = xp.shape[2] - kw + 1
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # [C,ho,wo,kh,kw]
    cols = np.ascontiguousarray(windows.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c * kh * kw)
    wmat = kernels.data.reshape(o, -1)
    out_mat = cols @ wmat.T + bias.data
    out = Tensor(out_mat.T.reshape(o, ho, wo), (x, kernels, bias))

    def grad_fn(g: np.ndarray) -> None:
        gmat = g.reshape(o, ho * wo).T  # [ho*wo, O]
        kernels._accumulate((gmat.T @ cols).reshape(kernels.shape))
        bias._accumulate(gmat.sum(axis=0))
        dcols = (gmat @ wmat).reshape(ho, wo, c, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + ho, j : j + wo] += dcols[:, :, :, i, j].transpose(2, 0, 1)
        x._accumulate(dxp[:, ph : ph + h, pw : pw + w])

    out._grad_fn = grad_fn
    return out


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 stride-2 max pool over a [C,H,W] tensor; H and W must be even."""
    if x.data.ndim != 3:
        raise InputError(f"maxpool2d expects a [C,H,W] input, got shape {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    # windows flattened row-major: (r0c0, r0c1, r1c0, r1c1)
    blocks = (
        x.data.reshape(c, ho, 2, wo, 2).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, 4)
    )
    idx = blocks.argmax(axis=-1)  # argmax keeps the first of tied cells
    out = Tensor(np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0], (x,))

    def grad_fn(g: np.ndarray) -> None:
        dblocks = np.zeros((c, ho, wo, 4))
        np.put_along_axis(dblocks, idx[..., None], g[..., None], axis=-1)
        dx = dblocks.reshape(c, ho, wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
        x._accumulate(dx)

    out._grad_fn = grad_fn
    return out


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map weights @ x + bias for a 1-D input."""
    if x.data.ndim != 1:
        raise InputError(f"dense expects a 1-D input, got shape {x.shape}")
    if weights.data.ndim != 2 or weights.shape[1] != x.shape[0]:
        raise ConfigurationError(
            f"dense weight shape {weights.shape} incompatible with input shape {x.shape}"
        )
    if bias.shape != (weights.shape[0],):
        raise ConfigurationError(
            f"dense bias shape {bias.shape} incompatible with weight shape {weights.shape}"
        )
    out = Tensor(weights.data @ x.data + bias.data, (x, weights, bias))

    def grad_fn(g: np.ndarray) -> None:
        weights._accumulate(np.outer(g, x.data))
        bias._accumulate(g)
        x._accumulate(weights.data.T @ g)

    out._grad_fn = grad_fn
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), (x,))
    mask = x.data > 0

    def grad_fn(g: np.ndarray) -> None:
        x._accumulate(g * mask)

    out._grad_fn = grad_fn
    return out


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    out = Tensor(x.data.reshape(-1), (x,))

    def grad_fn(g: np.ndarray) -> None:
        x._accumulate(g.reshape(shape))

    out._grad_fn = grad_fn
    return out


def softmax(logits: Tensor) -> Tensor:
    """Stable softmax of a 1-D logit vector (max subtracted first)."""
    if logits.data.ndim != 1:
        raise InputError(f"softmax expects a 1-D input, got shape {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise InputError("softmax requires finite logits")
    shifted = logits.data - logits.data.max()
    exps = np.exp(shifted)
    probs = exps / exps.sum()
    out = Tensor(probs, (logits,))

    def grad_fn(g: np.ndarray) -> None:
        logits._accumulate(probs * (g - np.dot(g, probs)))

    out._grad_fn = grad_fn
    return out


def cross_entropy(probs: Tensor, label: int) -> Tensor:
    """Negative log-likelihood -log(probs[label]) of one class index."""
    k = probs.shape[0]
    label = int(label)
    if not 0 <= label < k:
        raise InputError(f"label {label} out of range for {k} classes")
    p = float(probs.data[label])
    with np.errstate(divide="ignore"):  # p == 0 yields +inf, caught by the train loop
        out = Tensor(np.float64(-np.log(p)), (probs,))

    def grad_fn(g: np.ndarray) -> None:
        d = np.zeros_like(probs.data)
        d[label] = -float(g) / p
        probs._accumulate(d)

    out._grad_fn = grad_fn
    return out
