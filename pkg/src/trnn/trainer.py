"""Window construction, full-batch gradient descent, and evaluation."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .backprop import backprop_series
from .cells import TRNN, init_params, run_series
from .data import Standardizer, make_lagged_targets
from .objectives import LossSpec, is_regularized, regularizer, step_loss

log = logging.getLogger(__name__)

REGIME_ALIASES = {
    "last": "last",
    "many-to-one": "last",
    "all": "all",
    "many-to-many": "all",
    "panel-last": "panel-last",
    "panel-all": "panel-all",
    "single": "single",
}


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class SeriesDataset:
    """Cases of ``(input series, response)``.

    ``inputs[j]`` has shape ``(T_j, *xdims)``. ``targets[j]`` is ``(*ydims)``
    for last-step regimes and ``(T_j, *ydims)`` otherwise. ``ends[j]`` is
    the base-series index of case ``j``'s final input step, when known.
    """

    inputs: list[np.ndarray]
    targets: list[np.ndarray]
    regime: str
    ends: np.ndarray | None = None

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets differ in number of cases")
        self.regime = REGIME_ALIASES.get(self.regime, self.regime)

    def __len__(self):
        return len(self.inputs)

    @property
    def last_only(self) -> bool:
        return self.regime in ("last", "panel-last")

    @property
    def input_dims(self) -> tuple[int, ...]:
        return tuple(self.inputs[0].shape[1:])

    @property
    def output_dims(self) -> tuple[int, ...]:
        t = self.targets[0]
        return tuple(t.shape if self.last_only else t.shape[1:])

    def subset(self, idx: Sequence[int]) -> "SeriesDataset":
        idx = list(idx)
        return SeriesDataset(
            [self.inputs[i] for i in idx],
            [self.targets[i] for i in idx],
            self.regime,
            None if self.ends is None else self.ends[idx],
        )

    def batches(self, size: int):
        """Yield ``(indices, X, Y)`` stacks of equal-length cases in ascending case order."""
        groups: dict[int, list[int]] = {}
        for j, x in enumerate(self.inputs):
            groups.setdefault(len(x), []).append(j)
        for idx in groups.values():
            for s in range(0, len(idx), size):
                part = idx[s:s + size]
                yield (
                    part,
                    np.stack([self.inputs[j] for j in part]),
                    np.stack([self.targets[j] for j in part]),
                )


def window_cases(X: np.ndarray, Y: np.ndarray, window: int = 7, regime: str = "last",
                 offset: int = 0) -> SeriesDataset:
    """Sliding windows of length ``window`` over a paired base ``(X_k, Y_k)``.

    A base of ``N`` pairs gives ``N - window + 1`` cases. Many-to-one keeps
    only the target at each window's final step. ``offset`` is added to the
    recorded end indices.
    """
    regime = REGIME_ALIASES.get(regime, regime)
    if regime not in ("last", "all", "panel-last", "panel-all"):
        raise ValueError(f"unknown regime {regime!r}")
    if window < 1:
        raise ValueError("window must be positive")
    if len(X) != len(Y):
        raise ValueError("paired base has mismatched lengths")
    n = len(X) - window + 1
    if n < 1:
        raise ValueError(f"base of {len(X)} pairs is too short for window {window}")
    last = regime.endswith("last")
    inputs = [X[j:j + window] for j in range(n)]
    targets = [Y[j + window - 1] if last else Y[j:j + window] for j in range(n)]
    return SeriesDataset(inputs, targets, regime, np.arange(n) + window - 1 + offset)


def build_cases(series: np.ndarray, window: int = 7, regime: str = "last") -> SeriesDataset:
    """Windows over the lag-1 pairing of a raw series.

    Pair ``k`` is ``(series[k + 1], series[k])``, so ``L`` raw steps give
    ``L - 1`` pairs and ``L - window`` cases. ``ends[j]`` is the raw index
    of case ``j``'s final input step.
    """
    X, Y = make_lagged_targets(series)
    return window_cases(X, Y, window, regime, offset=1)


def split_cases(ds: SeriesDataset, frac: float = 0.9) -> tuple[SeriesDataset, SeriesDataset]:
    """Chronological split: the first ``floor(frac * N)`` cases train."""
    if not 0 < frac < 1:
        raise ValueError("split fraction must lie in (0, 1)")
    k = math.floor(frac * len(ds))
    return ds.subset(range(k)), ds.subset(range(k, len(ds)))


@dataclass
class LagTask:
    train: SeriesDataset
    test: SeriesDataset
    scaler: Standardizer


def prepare_lag_task(series: np.ndarray, window: int, regime: str, split: float = 0.9,
                     standardize: bool = True) -> LagTask:
    """Standardize, window and split a base series for lag-1 forecasting.

    Scaling statistics come only from base steps seen by training windows.
    """
    series = np.asarray(series, dtype=np.float64)
    raw = build_cases(series, window, regime)
    n_train = math.floor(split * len(raw))
    if n_train < 1 or n_train >= len(raw):
        raise ValueError(f"split {split} leaves an empty side for {len(raw)} windows")
    if standardize:
        scaler = Standardizer.fit(series[: raw.ends[n_train - 1] + 1])
    else:
        scaler = Standardizer(np.zeros(series.shape[1:]), np.ones(series.shape[1:]))
    ds = build_cases(scaler.transform(series), window, regime)
    train, test = split_cases(ds, split)
    return LagTask(train, test, scaler)


@dataclass
class TrainConfig:
    cell: str = "tlstm"
    hidden: tuple[int, ...] = (4, 4)
    kind: str = "squared"
    regime: str = "last"
    lr: float = 0.01
    epochs: int = 100
    seed: int = 0
    batch: str = "full"
    split: float = 0.9
    lam: float = 0.0
    clip: float | None = 5.0
    window: int = 7
    backoff: bool = True
    chunk: int = 32

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.regime = REGIME_ALIASES.get(self.regime, self.regime)
        if self.cell not in ("tlstm", "tgru"):
            raise ValueError(f"unknown cell {self.cell!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 0 < self.split < 1:
            raise ValueError("split fraction must lie in (0, 1)")
        if self.batch not in ("full", "per-series"):
            raise ValueError(f"unknown batch policy {self.batch!r}")
        if self.clip is not None and not self.clip > 0:
            raise ValueError("clip must be positive or None")
        self.loss_spec  # validates kind/regime/lam

    @property
    def loss_spec(self) -> LossSpec:
        return LossSpec(self.kind, self.regime, self.lam)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out


@dataclass
class TrainReport:
    config: dict
    history: list[float] = field(default_factory=list)
    mse_history: list[float] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    final_loss: float | None = None
    final_train_mse: float | None = None
    summary: dict = field(default_factory=dict)

    def fraction_non_increasing(self) -> float:
        h = self.history
        if len(h) < 2:
            return 1.0
        return sum(b <= a for a, b in zip(h, h[1:])) / (len(h) - 1)

    def write_csv(self, path) -> None:
        """Convergence log: ``epoch,loss,train_mse,lr``. Bitwise reproducible."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "train_mse", "lr"])
            for e, (l, m, r) in enumerate(zip(self.history, self.mse_history, self.lr_history), 1):
                w.writerow([e, f"{l:.17g}", f"{m:.17g}", f"{r:.17g}"])

    def write_timing_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "wall_ms"])
            for e, ms in enumerate(self.wall_ms, 1):
                w.writerow([e, f"{ms:.3f}"])

    def write_json(self, path) -> None:
        doc = {
            "config": self.config,
            "epochs": len(self.history),
            "first_loss": self.history[0] if self.history else None,
            "final_loss": self.final_loss,
            "final_train_mse": self.final_train_mse,
            "fraction_non_increasing": self.fraction_non_increasing(),
            "mean_epoch_ms": float(np.mean(self.wall_ms)) if self.wall_ms else None,
            "mse_convention": "mean squared error per tensor element",
            **self.summary,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _chunk_forward(model: TRNN, X: np.ndarray, Y: np.ndarray, last_only: bool, kind: str):
    T = X.shape[1]
    outs, tapes = run_series(model, [X[:, t] for t in range(T)])
    D = len(model.head.V)
    if last_only:
        value, a = step_loss(Y, outs[-1], kind, ndim=D)
        adj = [None] * (T - 1) + [a]
        sq = float(np.sum((outs[-1] - Y) ** 2))
        count = outs[-1].size
    else:
        O = np.stack(outs, axis=1)
        value, a = step_loss(Y, O, kind, ndim=D)
        adj = [a[:, t] for t in range(T)]
        sq = float(np.sum((O - Y) ** 2))
        count = O.size
    return value, adj, tapes, sq, count


def loss_and_grads(model: TRNN, ds: SeriesDataset, kind: str = "squared", chunk: int = 32,
                   need_grads: bool = True, drop_reset_route: bool = False):
    """Summed data loss over ``ds``, its gradient, and the per-element MSE.

    Cases are processed in fixed-size chunks of equal length, in ascending
    case order, so results are bitwise reproducible.
    """
    total = 0.0
    sq = 0.0
    count = 0
    grads = None
    for _, X, Y in ds.batches(chunk):
        value, adj, tapes, s, c = _chunk_forward(model, X, Y, ds.last_only, kind)
        total += value
        sq += s
        count += c
        if need_grads:
            g = backprop_series(model, tapes, adj, drop_reset_route=drop_reset_route)
            grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
        del tapes
    return total, grads, sq / count


def objective(model: TRNN, ds: SeriesDataset, spec: LossSpec, chunk: int = 32,
              need_grads: bool = True):
    """Regularised training objective ``(loss, grads, mse)``."""
    data_loss, grads, mse = loss_and_grads(model, ds, spec.kind, chunk, need_grads)
    params = model.parameters()
    names = [k for k in params if is_regularized(k)]
    reg, reg_grads = regularizer([params[k] for k in names], spec.lam)
    if need_grads and spec.lam > 0:
        for k, g in zip(names, reg_grads):
            grads[k] = grads[k] + g
    return data_loss + reg, grads, mse


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None):
    if max_norm is None:
        return grads
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
    """Return ``params - lr * grads`` as a new dict."""
    return {k: v - lr * grads[k] for k, v in params.items()}


def train(ds: SeriesDataset, config: TrainConfig, model: TRNN | None = None,
          progress=None) -> tuple[TRNN, TrainReport]:
    """Gradient descent on ``ds``.

    Full-batch mode takes one step per epoch; ``history[e]`` is the
    objective at the parameters the epoch started from. When the objective
    rises, the learning rate is halved before stepping.
    """
    if ds.regime != config.regime:
        raise ValueError(f"dataset regime {ds.regime!r} does not match config {config.regime!r}")
    if len(ds) == 0:
        raise ValueError("empty training set")
    spec = config.loss_spec
    if model is None:
        model = init_params(config.cell, ds.input_dims, config.hidden, ds.output_dims,
                            seed=config.seed)
    report = TrainReport(config=config.to_dict())
    lr = config.lr
    prev = None
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        if config.batch == "full":
            loss, grads, mse = objective(model, ds, spec, config.chunk)
            _check_finite(loss, epoch)
            if config.backoff and prev is not None and loss > prev:
                lr *= 0.5
            grads = clip_by_global_norm(grads, config.clip)
            model = model.with_parameters(sgd_step(model.parameters(), grads, lr))
        else:
            loss, sq, count = 0.0, 0.0, 0
            for j in range(len(ds)):
                one = ds.subset([j])
                value, grads, m = objective(model, one, spec, config.chunk)
                _check_finite(value, epoch)
                loss += value
                sq += m * one.targets[0].size
                count += one.targets[0].size
                grads = clip_by_global_norm(grads, config.clip)
                model = model.with_parameters(sgd_step(model.parameters(), grads, lr))
            mse = sq / count
            if config.backoff and prev is not None and loss > prev:
                lr *= 0.5
        prev = loss
        report.history.append(loss)
        report.mse_history.append(mse)
        report.lr_history.append(lr)
        report.wall_ms.append(1000.0 * (time.perf_counter() - t0))
        if progress is not None:
            progress(epoch, loss, mse, lr)
        log.debug("epoch %d loss %.6g mse %.6g lr %.3g", epoch, loss, mse, lr)
    final, _, final_mse = objective(model, ds, spec, config.chunk, need_grads=False)
    _check_finite(final, config.epochs + 1)
    report.final_loss = final
    report.final_train_mse = final_mse
    return model, report


def _check_finite(loss: float, epoch: int):
    if not math.isfinite(loss):
        raise DivergenceError(
            f"loss became {loss} at epoch {epoch}; lower the learning rate or tighten clipping"
        )


def predict(model: TRNN, ds: SeriesDataset, chunk: int = 32) -> list[np.ndarray]:
    """Responses at the responsive steps, one array per case (standardized units)."""
    out: list[np.ndarray | None] = [None] * len(ds)
    for idx, X, _ in ds.batches(chunk):
        outs, _ = run_series(model, [X[:, t] for t in range(X.shape[1])], logits=False)
        O = outs[-1] if ds.last_only else np.stack(outs, axis=1)
        for k, j in enumerate(idx):
            out[j] = O[k]
    return out


def evaluate(model: TRNN, ds: SeriesDataset, scaler: Standardizer | None = None,
             chunk: int = 32) -> float:
    """Mean per-element squared error over held-out cases, in original units if ``scaler``."""
    preds = predict(model, ds, chunk)
    return _mse(preds, ds.targets, scaler)


def persistence_error(ds: SeriesDataset, scaler: Standardizer | None = None) -> float:
    """Error of predicting every response by the most recent input."""
    preds = [x[-1] if ds.last_only else x for x in ds.inputs]
    return _mse(preds, ds.targets, scaler)


def _mse(preds, targets, scaler) -> float:
    sq, count = 0.0, 0
    for p, y in zip(preds, targets):
        if scaler is not None:
            p, y = scaler.inverse(p), scaler.inverse(y)
        sq += float(np.sum((p - y) ** 2))
        count += y.size
    return sq / count
