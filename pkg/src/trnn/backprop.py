"""Backpropagation through time for tLSTM and tGRU, plus a finite-difference oracle.

All adjoint applications of Tucker maps are matrix-free (transposed mode
products); explicit Kronecker matrices never appear here. Gradients are
plain ``dict[str, ndarray]`` keyed like :meth:`TRNN.parameters`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .cells import TRNN, GRUCell, LSTMCell, OutputHead, TapeStep, TuckerParams
from .tensor import kron_chain, tucker_adjoint, tucker_backward, tucker_map

GradientSet = dict  # name -> ndarray, same keys/shapes as TRNN.parameters()


@dataclass
class AdjointState:
    """Adjoints flowing into step ``t`` from the future and from the output loss."""

    dH: np.ndarray
    dC: np.ndarray | None = None
    dH_out: np.ndarray | None = None

    @property
    def total(self) -> np.ndarray:
        return self.dH if self.dH_out is None else self.dH + self.dH_out


class TuckerJacobian:
    """The Jacobian of a gate pre-activation w.r.t. its hidden argument.

    As a matrix on vectorised tensors it is ``W_D kron ... kron W_1``;
    :meth:`apply` and :meth:`adjoint` evaluate it without forming that
    matrix. :meth:`dense` does form it, for small checks.
    """

    def __init__(self, mats: Sequence[np.ndarray]):
        self.mats = [np.asarray(m, dtype=np.float64) for m in mats]

    def apply(self, T: np.ndarray) -> np.ndarray:
        return tucker_map(T, self.mats)

    def adjoint(self, G: np.ndarray) -> np.ndarray:
        return tucker_adjoint(G, self.mats)

    def dense(self) -> np.ndarray:
        return kron_chain(self.mats)


def tucker_jacobian_hidden(params: TuckerParams) -> TuckerJacobian:
    return TuckerJacobian(params.W)


def grad_wrt_W(dM: np.ndarray, params: TuckerParams, H_prev: np.ndarray, d: int) -> np.ndarray:
    """``dl/dW_d`` given the pre-activation adjoint ``dM`` (sigma' already applied)."""
    if not 1 <= d <= len(params.W):
        raise ValueError(f"mode {d} out of range")
    return tucker_backward(dM, params.W, H_prev, need_input_grad=False)[0][d - 1]


def grad_wrt_U(dM: np.ndarray, params: TuckerParams, X: np.ndarray, d: int) -> np.ndarray:
    if not 1 <= d <= len(params.U):
        raise ValueError(f"mode {d} out of range")
    return tucker_backward(dM, params.U, X, need_input_grad=False)[0][d - 1]


def grad_wrt_B(dM: np.ndarray, ndim: int | None = None) -> np.ndarray:
    """The bias Jacobian is the identity, so the gradient is ``dM`` (summed over batch axes)."""
    dM = np.asarray(dM, dtype=np.float64)
    if ndim is None or dM.ndim == ndim:
        return dM.copy()
    return dM.sum(axis=tuple(range(dM.ndim - ndim)))


def _gate_grads(name: str, params: TuckerParams, G: np.ndarray, H_in, X, grads: GradientSet,
                need_hidden: bool = True):
    # accumulate W/U/B gradients of one gate, return the hidden-argument adjoint
    dW, dH = tucker_backward(G, params.W, H_in, need_input_grad=need_hidden)
    dU, _ = tucker_backward(G, params.U, X, need_input_grad=False)
    for d, (gw, gu) in enumerate(zip(dW, dU), 1):
        _acc(grads, f"{name}.W{d}", gw)
        _acc(grads, f"{name}.U{d}", gu)
    _acc(grads, f"{name}.B", grad_wrt_B(G, len(params.W)))
    return dH


def _acc(grads: GradientSet, key: str, value: np.ndarray):
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


def lstm_backstep(tape: TapeStep, adj: AdjointState, cell: LSTMCell):
    """Reverse one tLSTM step.

    Returns ``(AdjointState for t-1, per-step gradients)``.
    """
    dHh = adj.total
    dC = np.zeros_like(dHh) if adj.dC is None else adj.dC
    if dHh.shape != tape.H.shape or dC.shape != tape.C.shape:
        raise ValueError("adjoint shapes do not match the tape")
    shape = dHh.shape
    F, I, O, Chat = (tape.acts[a] for a in ("f", "i", "o", "c"))
    sC = tape.extra["sC"]
    if cell.fused:
        fl = _kernels.flat
        Gf, Gi, Go, Gc, dC_prev = (
            a.reshape(shape)
            for a in _kernels.lstm_backward(
                fl(dHh), fl(dC), fl(F), fl(I), fl(O), fl(Chat), fl(tape.C_prev), fl(sC)
            )
        )
    else:
        # the cell-state adjoint includes the output gate: dH/dC = O * s_h'(C)
        dCt = dC + O * cell.out_act.grad(sC, tape.C) * dHh
        g, gc = cell.gate_act.grad, cell.cand_act.grad
        Gf = dCt * tape.C_prev * g(F, tape.pre["f"])
        Gi = dCt * Chat * g(I, tape.pre["i"])
        Go = sC * dHh * g(O, tape.pre["o"])
        Gc = dCt * I * gc(Chat, tape.pre["c"])
        dC_prev = dCt * F
    grads: GradientSet = {}
    dH_prev = None
    for a, G in zip(("f", "i", "o", "c"), (Gf, Gi, Go, Gc)):
        part = _gate_grads(a, cell.gates[a], G, tape.H_prev, tape.X, grads)
        dH_prev = part if dH_prev is None else dH_prev + part
    return AdjointState(dH=dH_prev, dC=dC_prev), grads


def gru_backstep(tape: TapeStep, adj: AdjointState, cell: GRUCell, drop_reset_route: bool = False):
    """Reverse one tGRU step.

    The hidden adjoint has four terms: through the reset gate, through the
    update gate, the direct ``Z * dH`` path, and the path that re-enters
    the candidate through ``R * H_prev``. ``drop_reset_route=True`` drops the
    last one; that variant is not a true gradient and exists only so the
    discrepancy can be measured.
    """
    dHh = adj.total
    if dHh.shape != tape.H.shape:
        raise ValueError("adjoint shape does not match the tape")
    shape = dHh.shape
    R, Z, Hhat = tape.acts["r"], tape.acts["z"], tape.acts["h"]
    H_prev = tape.H_prev
    fl = _kernels.flat
    if cell.fused:
        Gh, Gz, direct = (
            a.reshape(shape) for a in _kernels.gru_backward_update(fl(dHh), fl(Z), fl(Hhat), fl(H_prev))
        )
    else:
        Gh = (1.0 - Z) * dHh * cell.out_act.grad(Hhat, tape.pre["h"])
        Gz = (H_prev - Hhat) * dHh * cell.gate_act.grad(Z, tape.pre["z"])
        direct = Z * dHh
    grads: GradientSet = {}
    dRhat = _gate_grads("h", cell.gates["h"], Gh, tape.extra["Rhat"], tape.X, grads)
    if cell.fused:
        Gr, route = (a.reshape(shape) for a in _kernels.gru_backward_reset(fl(dRhat), fl(R), fl(H_prev)))
    else:
        Gr = H_prev * dRhat * cell.gate_act.grad(R, tape.pre["r"])
        route = R * dRhat
    dH_prev = _gate_grads("r", cell.gates["r"], Gr, H_prev, tape.X, grads)
    dH_prev = dH_prev + _gate_grads("z", cell.gates["z"], Gz, H_prev, tape.X, grads)
    dH_prev = dH_prev + direct
    if not drop_reset_route:
        dH_prev = dH_prev + route
    return AdjointState(dH=dH_prev), grads


def head_backward(head: OutputHead, H: np.ndarray, dO: np.ndarray):
    """Gradients of the head parameters and the hidden adjoint, given ``dl/dO_hat``."""
    dV, dH = tucker_backward(dO, head.V, H)
    grads = {f"head.V{d}": g for d, g in enumerate(dV, 1)}
    grads["head.b"] = grad_wrt_B(dO, len(head.V))
    return grads, dH


def backprop_series(
    model: TRNN,
    tapes: Sequence[TapeStep],
    out_adjoints: Sequence[np.ndarray | None],
    drop_reset_route: bool = False,
    per_step: list | None = None,
) -> GradientSet:
    """Gradients of a loss over one unrolled series (or a batch of them).

    ``out_adjoints[t]`` is ``dl/dO_hat_t`` or ``None`` where step ``t`` has
    no response. Runs from ``T`` down to 1 with zero terminal adjoints and
    sums the per-step contributions. If ``per_step`` is a list, each
    step's gradient dict is appended to it (in reverse time order).
    """
    if len(tapes) != len(out_adjoints):
        raise ValueError(f"{len(tapes)} tapes but {len(out_adjoints)} output adjoints")
    if not tapes:
        raise ValueError("nothing to backpropagate")
    cell = model.cell
    is_lstm = isinstance(cell, LSTMCell)
    zero = np.zeros_like(tapes[-1].H)
    adj = AdjointState(dH=zero, dC=zero.copy() if is_lstm else None)
    total: GradientSet = {}
    for t in range(len(tapes) - 1, -1, -1):
        tape = tapes[t]
        step_grads: GradientSet = {}
        dO = out_adjoints[t]
        if dO is not None:
            hg, dH_out = head_backward(model.head, tape.H, dO)
            step_grads.update(hg)
            adj = AdjointState(dH=adj.dH, dC=adj.dC, dH_out=dH_out)
        if is_lstm:
            adj, g = lstm_backstep(tape, adj, cell)
        else:
            adj, g = gru_backstep(tape, adj, cell, drop_reset_route=drop_reset_route)
        step_grads.update(g)
        if per_step is not None:
            per_step.append(step_grads)
        for k, v in step_grads.items():
            _acc(total, k, v)
    params = model.parameters()
    return {k: total.get(k, np.zeros_like(v)) for k, v in params.items()}


def finite_difference_gradient(
    loss_fn: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    h: float = 1e-6,
) -> GradientSet:
    """Central differences ``(f(p + h) - f(p - h)) / 2h`` for every scalar parameter."""
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    out = {}
    for k, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = loss_fn(work)
            flat[j] = orig - h
            fm = loss_fn(work)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * h)
        out[k] = g
    return out


def gradient_errors(analytic: GradientSet, numeric: GradientSet, floor: float = 1e-8):
    """Per-parameter max relative error, with absolute differences below ``floor`` counted as 0."""
    errs = {}
    for k in numeric:
        a, n = np.asarray(analytic[k]), np.asarray(numeric[k])
        diff = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        rel = np.where(diff <= floor, 0.0, diff / np.where(scale > 0, scale, 1.0))
        errs[k] = float(rel.max()) if rel.size else 0.0
    return errs
