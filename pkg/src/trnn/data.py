"""Tensor-series files, synthetic data, lagged targets and model files.

TTSR layout (all little-endian)::

    b"TTSR" | version u16 (=1) | D u16 | dims D x u32 | T u64 | T*prod(dims) float64

The payload is step-major, then C order within a step.
"""
from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from math import prod
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import tucker_map

MAGIC = b"TTSR"
VERSION = 1
MODEL_MAGIC = b"TRNM"
MODEL_VERSION = 1
_U32_MAX = 2**32 - 1


class FormatError(ValueError):
    """A file is malformed, truncated or of the wrong kind."""


def _atomic_write(path, payload: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_series(series: np.ndarray) -> bytes:
    arr = np.asarray(series, dtype=np.float64)
    if arr.ndim < 2:
        raise ValueError("a series needs a time axis plus at least one mode")
    T, dims = arr.shape[0], arr.shape[1:]
    if any(n < 1 or n > _U32_MAX for n in dims) or len(dims) > 0xFFFF:
        raise ValueError(f"dims {dims} cannot be stored")
    header = MAGIC + struct.pack("<HH", VERSION, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims) + struct.pack("<Q", T)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def decode_series(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError("not a TTSR file (bad magic)")
    version, D = struct.unpack_from("<HH", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported TTSR version {version}")
    if D == 0:
        raise FormatError("TTSR file declares zero modes")
    off = 8
    if len(buf) < off + 4 * D + 8:
        raise FormatError("truncated TTSR header")
    dims = struct.unpack_from(f"<{D}I", buf, off)
    off += 4 * D
    (T,) = struct.unpack_from("<Q", buf, off)
    off += 8
    if any(n == 0 for n in dims):
        raise FormatError(f"zero-sized mode in dims {dims}")
    # validate the byte count before allocating anything
    expected = 8 * T * prod(dims)
    if len(buf) - off != expected:
        raise FormatError(f"payload has {len(buf) - off} bytes, header implies {expected}")
    data = np.frombuffer(buf, dtype="<f8", offset=off, count=T * prod(dims))
    return data.astype(np.float64).reshape((T,) + tuple(dims))


def write_series(series, path) -> None:
    """Write a ``(T, *dims)`` array (or list of equally shaped tensors) as TTSR."""
    if isinstance(series, (list, tuple)):
        if not series:
            raise ValueError("use an array of shape (0, *dims) for an empty series")
        series = np.stack([np.asarray(x, dtype=np.float64) for x in series])
    _atomic_write(path, encode_series(series))


def read_series(path) -> np.ndarray:
    return decode_series(Path(path).read_bytes())


def export_csv(series: np.ndarray, path) -> None:
    """Lossy inspection dump with header ``t,i1,...,iD,value`` (1-based indices)."""
    arr = np.asarray(series, dtype=np.float64)
    D = arr.ndim - 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"i{d}" for d in range(1, D + 1)] + ["value"])
        for idx in np.ndindex(arr.shape):
            w.writerow([i + 1 for i in idx] + [f"{arr[idx]:.17g}"])


@dataclass
class SyntheticSpec:
    """Linear tensor autoregression ``x_t = A x_{t-1} + noise`` in vec space.

    ``transition`` may be a full ``n x n`` matrix or one matrix per mode
    (combined as their Kronecker product); it is used as given. When it is
    ``None`` a random per-mode transition ``I + mix * S_d`` (``S_d``
    symmetric Gaussian) is drawn and rescaled so the full map has spectral
    radius ``radius``.
    """

    dims: tuple[int, ...] = (25, 25, 4)
    length: int = 543
    seed: int = 0
    radius: float = 0.95
    mix: float = 1.0
    noise: float = 1.0
    transition: np.ndarray | list | None = None
    x0: np.ndarray | None = None
    burn_in: int = 100


def _spectral_radius(A: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def generate_synthetic(spec: SyntheticSpec) -> np.ndarray:
    """Return a ``(length, *dims)`` series; deterministic in ``spec.seed``."""
    dims = tuple(int(n) for n in spec.dims)
    if not dims or min(dims) < 1 or spec.length < 0:
        raise ValueError(f"invalid dims {spec.dims} or length {spec.length}")
    if spec.noise < 0:
        raise ValueError("noise scale must be nonnegative")
    rng = np.random.default_rng(spec.seed)
    n = prod(dims)

    if spec.transition is None:
        factors = []
        for m in dims:
            S = rng.standard_normal((m, m))
            factors.append(np.eye(m) + spec.mix * (S + S.T) / (2.0 * np.sqrt(m)))
        rho = prod(_spectral_radius(f) for f in factors)
        scale = (spec.radius / rho) ** (1.0 / len(dims))
        factors = [f * scale for f in factors]
    elif isinstance(spec.transition, (list, tuple)):
        factors = [np.asarray(f, dtype=np.float64) for f in spec.transition]
        if [f.shape for f in factors] != [(m, m) for m in dims]:
            raise ValueError("per-mode transition factors must be square with the mode sizes")
    else:
        A = np.asarray(spec.transition, dtype=np.float64)
        if A.shape != (n, n):
            raise ValueError(f"transition must be {n}x{n}")
        factors = None

    def step(x):
        if factors is None:
            return (A @ x.reshape(-1, order="F")).reshape(dims, order="F")
        return tucker_map(x, factors)

    out = np.empty((spec.length,) + dims)
    if spec.length == 0:
        return out
    if spec.x0 is not None:
        x = np.asarray(spec.x0, dtype=np.float64).reshape(dims)
    else:
        x = spec.noise * rng.standard_normal(dims)
        # burn in so the series starts near stationarity
        for _ in range(spec.burn_in):
            x = step(x) + spec.noise * rng.standard_normal(dims)
    out[0] = x
    for t in range(1, spec.length):
        x = step(x)
        if spec.noise:
            x = x + spec.noise * rng.standard_normal(dims)
        out[t] = x
    return out


def make_lagged_targets(series: np.ndarray):
    """Pair each step with the previous one: ``(X_t, Y_t = X_{t-1})`` for ``t >= 2``.

    Returns ``(inputs, targets)``, each one step shorter than ``series``.
    """
    series = np.asarray(series, dtype=np.float64)
    if len(series) < 2:
        raise ValueError("need at least two steps to build lagged targets")
    return series[1:], series[:-1]


@dataclass
class Standardizer:
    """Per-position z-scoring over time."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, series: np.ndarray) -> "Standardizer":
        series = np.asarray(series, dtype=np.float64)
        std = series.std(axis=0)
        return cls(series.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


def save_model(model, path, meta: dict | None = None) -> None:
    """Write model parameters as a JSON header followed by raw float64 sections.

    Layout: ``b"TRNM" | version u16 | header length u32 | header JSON |``
    then each parameter's C-ordered little-endian float64 data in header order.
    """
    params = model.parameters()
    header = {
        "kind": model.kind,
        "activations": model.cell.activations_kwargs(),
        "head_activation": model.head.activation,
        "params": [[k, list(v.shape)] for k, v in params.items()],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC + struct.pack("<HI", MODEL_VERSION, len(hbytes)) + hbytes)
    for v in params.values():
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    _atomic_write(path, buf.getvalue())


def load_model(path):
    """Inverse of :func:`save_model`. Returns ``(model, meta)``."""
    from .cells import GRUCell, LSTMCell, OutputHead, TRNN, TuckerParams

    buf = Path(path).read_bytes()
    if len(buf) < 10 or buf[:4] != MODEL_MAGIC:
        raise FormatError("not a model file (bad magic)")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    try:
        header = json.loads(buf[10:10 + hlen])
    except ValueError as exc:
        raise FormatError(f"corrupt model header: {exc}") from None
    off = 10 + hlen
    need = sum(8 * prod(s) for _, s in header["params"])
    if len(buf) - off != need:
        raise FormatError(f"model payload has {len(buf) - off} bytes, expected {need}")
    params = {}
    for name, shape in header["params"]:
        count = prod(shape)
        params[name] = np.frombuffer(buf, "<f8", count, off).astype(np.float64).reshape(shape)
        off += 8 * count
    cls = {"tlstm": LSTMCell, "tgru": GRUCell}[header["kind"]]
    D = len(params["head.b"].shape)
    gates = {
        a: TuckerParams(
            [params[f"{a}.W{d}"] for d in range(1, D + 1)],
            [params[f"{a}.U{d}"] for d in range(1, D + 1)],
            params[f"{a}.B"],
        )
        for a in cls.GATES
    }
    head = OutputHead(
        [params[f"head.V{d}"] for d in range(1, D + 1)], params["head.b"], header["head_activation"]
    )
    return TRNN(cls(gates, **header["activations"]), head), header["meta"]


def parse_dims(text: str | Sequence[int]) -> tuple[int, ...]:
    if isinstance(text, str):
        parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
        dims = tuple(int(p) for p in parts)
    else:
        dims = tuple(int(n) for n in text)
    if not dims or min(dims) < 1:
        raise ValueError(f"invalid dims {text!r}")
    return dims
