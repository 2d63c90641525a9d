"""Pointwise gate kernels.

The Tucker contractions are BLAS-bound and stay in numpy. The forward
gate maps are dominated by ``exp``/``tanh``; numpy's SIMD ufunc loops beat
a numba loop calling scalar libm there, so the forward kernels are plain
numpy in both modes. The backward kernels are transcendental-free algebra
over six to eight operands, and fusing them into one numba loop removes a
dozen temporaries per step. Set ``TRNN_DISABLE_NUMBA=1`` before import to
force the numpy versions; both compute the same quantities and agree to
rounding. ``benchmarks/bench_kernels.py`` measures the two paths.

All kernels take and return flat contiguous 1-D arrays.
"""
from __future__ import annotations

import os

import numpy as np

_disabled = os.environ.get("TRNN_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _disabled:
        raise ImportError
    from numba import njit
except ImportError:  # pragma: no cover - exercised via the env flag in a subprocess
    njit = None

USE_NUMBA = njit is not None


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function via in-place SIMD ufuncs; saturates cleanly at both ends."""
    out = np.negative(x, dtype=np.float64)
    with np.errstate(over="ignore", under="ignore"):
        np.exp(out, out=out)
    out += 1.0
    return np.reciprocal(out, out=out)


def lstm_forward(Mf, Mi, Mo, Mc, C_prev):
    F = sigmoid(Mf)
    I = sigmoid(Mi)
    O = sigmoid(Mo)
    Chat = np.tanh(Mc)
    C = F * C_prev + I * Chat
    tanhC = np.tanh(C)
    return F, I, O, Chat, C, tanhC, O * tanhC


def _np_lstm_backward(dHh, dC, F, I, O, Chat, C_prev, tanhC):
    dCt = dC + O * (1.0 - tanhC * tanhC) * dHh
    Gf = dCt * C_prev * F * (1.0 - F)
    Gi = dCt * Chat * I * (1.0 - I)
    Go = tanhC * dHh * O * (1.0 - O)
    Gc = dCt * I * (1.0 - Chat * Chat)
    return Gf, Gi, Go, Gc, dCt * F


def gru_gates(Mr, Mz, H_prev):
    R = sigmoid(Mr)
    Z = sigmoid(Mz)
    return R, Z, R * H_prev


def gru_update(Mh, Z, H_prev):
    Hhat = np.tanh(Mh)
    return Hhat, Z * H_prev + (1.0 - Z) * Hhat


def _np_gru_backward_update(dHh, Z, Hhat, H_prev):
    Gh = (1.0 - Z) * dHh * (1.0 - Hhat * Hhat)
    Gz = (H_prev - Hhat) * dHh * Z * (1.0 - Z)
    return Gh, Gz, Z * dHh


def _np_gru_backward_reset(dRhat, R, H_prev):
    Gr = H_prev * dRhat * R * (1.0 - R)
    return Gr, R * dRhat


if USE_NUMBA:

    @njit(cache=True)
    def _nb_lstm_backward(dHh, dC, F, I, O, Chat, C_prev, tanhC):
        n = dHh.size
        Gf = np.empty(n)
        Gi = np.empty(n)
        Go = np.empty(n)
        Gc = np.empty(n)
        dCp = np.empty(n)
        for k in range(n):
            tc = tanhC[k]
            dh = dHh[k]
            o = O[k]
            f = F[k]
            i = I[k]
            ch = Chat[k]
            dct = dC[k] + o * (1.0 - tc * tc) * dh
            Gf[k] = dct * C_prev[k] * f * (1.0 - f)
            Gi[k] = dct * ch * i * (1.0 - i)
            Go[k] = tc * dh * o * (1.0 - o)
            Gc[k] = dct * i * (1.0 - ch * ch)
            dCp[k] = dct * f
        return Gf, Gi, Go, Gc, dCp

    @njit(cache=True)
    def _nb_gru_backward_update(dHh, Z, Hhat, H_prev):
        n = dHh.size
        Gh = np.empty(n)
        Gz = np.empty(n)
        direct = np.empty(n)
        for k in range(n):
            z = Z[k]
            dh = dHh[k]
            hh = Hhat[k]
            Gh[k] = (1.0 - z) * dh * (1.0 - hh * hh)
            Gz[k] = (H_prev[k] - hh) * dh * z * (1.0 - z)
            direct[k] = z * dh
        return Gh, Gz, direct

    @njit(cache=True)
    def _nb_gru_backward_reset(dRhat, R, H_prev):
        n = dRhat.size
        Gr = np.empty(n)
        route = np.empty(n)
        for k in range(n):
            r = R[k]
            d = dRhat[k]
            Gr[k] = H_prev[k] * d * r * (1.0 - r)
            route[k] = r * d
        return Gr, route

    lstm_backward = _nb_lstm_backward
    gru_backward_update = _nb_gru_backward_update
    gru_backward_reset = _nb_gru_backward_reset
else:
    lstm_backward = _np_lstm_backward
    gru_backward_update = _np_gru_backward_update
    gru_backward_reset = _np_gru_backward_reset


def flat(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
