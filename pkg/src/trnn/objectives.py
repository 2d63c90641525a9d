"""Step losses, the aggregate loss regimes, and the Frobenius regularizer."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import log_softmax

KINDS = ("squared", "cross-entropy")
# single: one series, response at every step; last/all: equal-length cases
# with a response at the final step / every step; panel-*: lengths may differ
REGIMES = ("single", "last", "all", "panel-last", "panel-all")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "squared"
    regime: str = "last"
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if not self.lam >= 0:
            raise ValueError("lambda must be nonnegative")

    @property
    def last_only(self) -> bool:
        return self.regime in ("last", "panel-last")


def step_loss(Y: np.ndarray, O_hat: np.ndarray, kind: str = "squared", ndim: int | None = None):
    """Loss of one prediction and its adjoint ``dl/dO_hat``.

    Squared loss is ``0.5 * sum((Y - O_hat)^2)``. Cross-entropy treats
    ``O_hat`` as logits over the flattened tensor and ``Y`` as a one-hot
    tensor. If ``O_hat`` carries leading batch axes, pass the tensor order
    as ``ndim``; the returned loss is then summed over the batch.
    """
    Y = np.asarray(Y, dtype=np.float64)
    O_hat = np.asarray(O_hat, dtype=np.float64)
    if Y.shape != O_hat.shape:
        raise ValueError(f"target {Y.shape} and output {O_hat.shape} differ in shape")
    if kind == "squared":
        r = O_hat - Y
        return 0.5 * float(np.sum(r * r)), r
    if kind == "cross-entropy":
        ndim = O_hat.ndim if ndim is None else ndim
        lead = O_hat.shape[: O_hat.ndim - ndim]
        logits = O_hat.reshape(lead + (-1,))
        onehot = Y.reshape(lead + (-1,))
        if not (np.all((onehot == 0) | (onehot == 1)) and np.all(onehot.sum(axis=-1) == 1)):
            raise ValueError("cross-entropy needs one-hot targets")
        logp = log_softmax(logits, axis=-1)
        value = -float(np.sum(onehot * logp))
        return value, (np.exp(logp) - onehot).reshape(O_hat.shape)
    raise ValueError(f"unknown loss kind {kind!r}")


def aggregate_loss(targets: Sequence[np.ndarray], outputs: Sequence[np.ndarray], spec: LossSpec):
    """Total loss over a set of cases, and the per-step output adjoints.

    ``outputs[j]`` has shape ``(T_j, *ydims)``. For last-step regimes
    ``targets[j]`` has shape ``ydims``; otherwise ``(T_j, *ydims)``. The
    returned adjoints match ``outputs`` and are zero at steps without a
    response.
    """
    if len(targets) == 0:
        raise ValueError("empty dataset")
    if len(targets) != len(outputs):
        raise ValueError("targets and outputs differ in number of cases")
    if spec.regime == "single" and len(outputs) != 1:
        raise ValueError("the single-series regime takes exactly one series")
    lengths = {len(o) for o in outputs}
    if spec.regime in ("last", "all") and len(lengths) > 1:
        raise ValueError(f"regime {spec.regime!r} needs equal lengths, got {sorted(lengths)}")
    total = 0.0
    adjoints = []
    for Y, O in zip(targets, outputs):
        O = np.asarray(O, dtype=np.float64)
        adj = np.zeros_like(O)
        if spec.last_only:
            value, adj[-1] = step_loss(Y, O[-1], spec.kind)
        else:
            value = 0.0
            for t in range(len(O)):
                v, adj[t] = step_loss(Y[t], O[t], spec.kind)
                value += v
        total += value
        adjoints.append(adj)
    return total, adjoints


def regularizer(mats: Sequence[np.ndarray], lam: float):
    """``lam * sum ||M||_F^2`` over the given matrices and its gradient ``2 lam M``."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    value = lam * sum(float(np.sum(m * m)) for m in mats)
    return value, [2.0 * lam * np.asarray(m) for m in mats]


def is_regularized(name: str) -> bool:
    """True for the recurrent and input matrices; biases and the head are left alone."""
    gate, _, part = name.partition(".")
    return gate != "head" and part[:1] in ("W", "U")
