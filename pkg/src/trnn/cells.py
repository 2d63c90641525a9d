"""Tensorial LSTM / GRU cells, the output head, and parameter initialisation.

Every state, gate and bias is a dense tensor with the hidden dims, and
every linear map is a Tucker map (one matrix per mode). Step functions
accept optional leading batch axes on ``X``/``H``/``C``; the number of
batch axes is inferred from the input rank.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import softmax

from . import _kernels
from .tensor import tucker_map


@dataclass(frozen=True)
class Activation:
    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    # derivative written in terms of the activated output and the input
    grad: Callable[[np.ndarray, np.ndarray], np.ndarray]


ACTIVATIONS = {
    "sigmoid": Activation("sigmoid", _kernels.sigmoid, lambda y, x: y * (1.0 - y)),
    "tanh": Activation("tanh", np.tanh, lambda y, x: 1.0 - y * y),
    "identity": Activation("identity", lambda x: x, lambda y, x: np.ones_like(x)),
}


def get_activation(name: str) -> Activation:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


@dataclass
class TuckerParams:
    """One gate's multilinear map: ``H x W + X x U + B``.

    ``W[d]`` is ``h_d x h_d``, ``U[d]`` is ``h_d x x_d`` and ``B`` has the
    hidden dims.
    """

    W: list[np.ndarray]
    U: list[np.ndarray]
    B: np.ndarray

    def __post_init__(self):
        self.W = [np.asarray(w, dtype=np.float64) for w in self.W]
        self.U = [np.asarray(u, dtype=np.float64) for u in self.U]
        self.B = np.asarray(self.B, dtype=np.float64)
        if not (len(self.W) == len(self.U) == self.B.ndim):
            raise ValueError("W, U and B must agree on the number of modes")
        for d, (w, u) in enumerate(zip(self.W, self.U)):
            h = self.B.shape[d]
            if w.shape != (h, h):
                raise ValueError(f"W[{d}] must be {h}x{h}, got {w.shape}")
            if u.ndim != 2 or u.shape[0] != h:
                raise ValueError(f"U[{d}] must have {h} rows, got {u.shape}")

    @property
    def hidden_dims(self) -> tuple[int, ...]:
        return self.B.shape

    @property
    def input_dims(self) -> tuple[int, ...]:
        return tuple(u.shape[1] for u in self.U)


def gate_preactivation(params: TuckerParams, H: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Gate pre-activation ``H x_1 W_1 ... + X x_1 U_1 ... + B``."""
    D = len(params.W)
    if tuple(H.shape[H.ndim - D:]) != params.hidden_dims:
        raise ValueError(f"hidden tensor dims {H.shape} do not match {params.hidden_dims}")
    if tuple(X.shape[X.ndim - D:]) != params.input_dims:
        raise ValueError(f"input tensor dims {X.shape} do not match {params.input_dims}")
    return tucker_map(H, params.W) + tucker_map(X, params.U) + params.B


class _Cell:
    GATES: tuple[str, ...] = ()
    kind = ""

    def __init__(self, gates: dict[str, TuckerParams]):
        if set(gates) != set(self.GATES):
            raise ValueError(f"{type(self).__name__} needs gates {self.GATES}, got {sorted(gates)}")
        self.gates = {a: gates[a] for a in self.GATES}
        first = self.gates[self.GATES[0]]
        self.hidden_dims = first.hidden_dims
        self.input_dims = first.input_dims
        for a, p in self.gates.items():
            if p.hidden_dims != self.hidden_dims or p.input_dims != self.input_dims:
                raise ValueError(f"gate {a!r} shape signature differs from gate {self.GATES[0]!r}")

    @property
    def ndim(self) -> int:
        return len(self.hidden_dims)

    def _lead(self, X: np.ndarray) -> int:
        lead = X.ndim - self.ndim
        if lead < 0 or tuple(X.shape[lead:]) != self.input_dims:
            raise ValueError(f"input of shape {X.shape} does not end in {self.input_dims}")
        return lead


class LSTMCell(_Cell):
    GATES = ("f", "i", "o", "c")
    kind = "tlstm"

    def __init__(self, gates, gate_act="sigmoid", cand_act="tanh", out_act="tanh"):
        super().__init__(gates)
        self.gate_act = get_activation(gate_act)
        self.cand_act = get_activation(cand_act)
        self.out_act = get_activation(out_act)
        self.fused = (gate_act, cand_act, out_act) == ("sigmoid", "tanh", "tanh")

    def activations_kwargs(self) -> dict[str, str]:
        return {"gate_act": self.gate_act.name, "cand_act": self.cand_act.name, "out_act": self.out_act.name}


class GRUCell(_Cell):
    GATES = ("r", "z", "h")
    kind = "tgru"

    def __init__(self, gates, gate_act="sigmoid", out_act="tanh"):
        super().__init__(gates)
        self.gate_act = get_activation(gate_act)
        self.out_act = get_activation(out_act)
        self.fused = (gate_act, out_act) == ("sigmoid", "tanh")

    def activations_kwargs(self) -> dict[str, str]:
        return {"gate_act": self.gate_act.name, "out_act": self.out_act.name}


@dataclass
class OutputHead:
    """Tucker map from hidden dims to response dims, plus bias.

    ``activation`` is ``"identity"`` for regression or ``"softmax"``
    (over the flattened tensor) for classification.
    """

    V: list[np.ndarray]
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.V = [np.asarray(v, dtype=np.float64) for v in self.V]
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if len(self.V) != self.bias.ndim:
            raise ValueError("V and bias must agree on the number of modes")
        for d, v in enumerate(self.V):
            if v.ndim != 2 or v.shape[0] != self.bias.shape[d]:
                raise ValueError(f"V[{d}] must have {self.bias.shape[d]} rows, got {v.shape}")
        if self.activation not in ("identity", "softmax"):
            raise ValueError(f"unknown head activation {self.activation!r}")

    @property
    def hidden_dims(self) -> tuple[int, ...]:
        return tuple(v.shape[1] for v in self.V)

    @property
    def output_dims(self) -> tuple[int, ...]:
        return self.bias.shape


def output_head(head: OutputHead, H: np.ndarray, logits: bool = False) -> np.ndarray:
    """Map a hidden tensor to the response shape.

    With ``logits=True`` the softmax of a classification head is skipped;
    training always works on logits.
    """
    D = len(head.V)
    if tuple(H.shape[H.ndim - D:]) != head.hidden_dims:
        raise ValueError(f"hidden tensor {H.shape} does not match head input {head.hidden_dims}")
    out = tucker_map(H, head.V) + head.bias
    if head.activation == "softmax" and not logits:
        lead = out.ndim - D
        flat = out.reshape(out.shape[:lead] + (-1,))
        out = softmax(flat, axis=-1).reshape(out.shape)
    return out


@dataclass
class TapeStep:
    """Forward intermediates of one step, as consumed by backprop."""

    X: np.ndarray
    H_prev: np.ndarray
    pre: dict[str, np.ndarray]
    acts: dict[str, np.ndarray]
    H: np.ndarray
    C_prev: np.ndarray | None = None
    C: np.ndarray | None = None
    extra: dict[str, np.ndarray] = field(default_factory=dict)


def lstm_step(cell: LSTMCell, X, H_prev, C_prev):
    """One tLSTM step. Returns ``(H_t, C_t, tape)``."""
    X = np.asarray(X, dtype=np.float64)
    cell._lead(X)
    pre = {a: gate_preactivation(cell.gates[a], H_prev, X) for a in cell.GATES}
    shape = pre["f"].shape
    if C_prev.shape != shape or H_prev.shape != shape:
        raise ValueError(f"state shapes {H_prev.shape}/{C_prev.shape} do not match {shape}")
    if cell.fused:
        fl = _kernels.flat
        F, I, O, Chat, C, tanhC, H = (
            a.reshape(shape)
            for a in _kernels.lstm_forward(
                fl(pre["f"]), fl(pre["i"]), fl(pre["o"]), fl(pre["c"]), fl(C_prev)
            )
        )
    else:
        g = cell.gate_act.fn
        F, I, O = g(pre["f"]), g(pre["i"]), g(pre["o"])
        Chat = cell.cand_act.fn(pre["c"])
        C = F * C_prev + I * Chat
        tanhC = cell.out_act.fn(C)
        H = O * tanhC
    tape = TapeStep(
        X=X, H_prev=H_prev, pre=pre, acts={"f": F, "i": I, "o": O, "c": Chat}, H=H,
        C_prev=C_prev, C=C, extra={"sC": tanhC},
    )
    return H, C, tape


def gru_step(cell: GRUCell, X, H_prev):
    """One tGRU step. Returns ``(H_t, tape)``."""
    X = np.asarray(X, dtype=np.float64)
    cell._lead(X)
    Mr = gate_preactivation(cell.gates["r"], H_prev, X)
    Mz = gate_preactivation(cell.gates["z"], H_prev, X)
    shape = Mr.shape
    if H_prev.shape != shape:
        raise ValueError(f"state shape {H_prev.shape} does not match {shape}")
    fl = _kernels.flat
    if cell.fused:
        R, Z, Rhat = (a.reshape(shape) for a in _kernels.gru_gates(fl(Mr), fl(Mz), fl(H_prev)))
    else:
        R, Z = cell.gate_act.fn(Mr), cell.gate_act.fn(Mz)
        Rhat = R * H_prev
    Mh = gate_preactivation(cell.gates["h"], Rhat, X)
    if cell.fused:
        Hhat, H = (a.reshape(shape) for a in _kernels.gru_update(fl(Mh), fl(Z), fl(H_prev)))
    else:
        Hhat = cell.out_act.fn(Mh)
        H = Z * H_prev + (1.0 - Z) * Hhat
    tape = TapeStep(
        X=X, H_prev=H_prev, pre={"r": Mr, "z": Mz, "h": Mh},
        acts={"r": R, "z": Z, "h": Hhat}, H=H, extra={"Rhat": Rhat},
    )
    return H, tape


@dataclass
class TRNN:
    """A recurrent cell plus its output head."""

    cell: LSTMCell | GRUCell
    head: OutputHead

    def __post_init__(self):
        if self.head.hidden_dims != self.cell.hidden_dims:
            raise ValueError("head input dims must equal the cell's hidden dims")

    @property
    def kind(self) -> str:
        return self.cell.kind

    def parameters(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every trainable parameter, in a fixed order."""
        out: dict[str, np.ndarray] = {}
        for a, p in self.cell.gates.items():
            for d, w in enumerate(p.W, 1):
                out[f"{a}.W{d}"] = w
            for d, u in enumerate(p.U, 1):
                out[f"{a}.U{d}"] = u
            out[f"{a}.B"] = p.B
        for d, v in enumerate(self.head.V, 1):
            out[f"head.V{d}"] = v
        out["head.b"] = self.head.bias
        return out

    def with_parameters(self, params: dict[str, np.ndarray]) -> "TRNN":
        """New model of the same architecture carrying ``params``."""
        D = self.cell.ndim
        gates = {
            a: TuckerParams(
                W=[params[f"{a}.W{d}"] for d in range(1, D + 1)],
                U=[params[f"{a}.U{d}"] for d in range(1, D + 1)],
                B=params[f"{a}.B"],
            )
            for a in self.cell.GATES
        }
        cell = type(self.cell)(gates, **self.cell.activations_kwargs())
        head = OutputHead(
            V=[params[f"head.V{d}"] for d in range(1, D + 1)],
            bias=params["head.b"],
            activation=self.head.activation,
        )
        return TRNN(cell, head)

    def step(self, X, state):
        if isinstance(self.cell, LSTMCell):
            H, C, tape = lstm_step(self.cell, X, *state)
            return (H, C), tape
        H, tape = gru_step(self.cell, X, state[0])
        return (H,), tape

    def initial_state(self, lead_shape: tuple[int, ...] = ()):
        zeros = np.zeros(lead_shape + self.cell.hidden_dims)
        if isinstance(self.cell, LSTMCell):
            return (zeros, zeros.copy())
        return (zeros,)


def run_series(model: TRNN, inputs: Sequence[np.ndarray], H0=None, C0=None, logits: bool = True):
    """Unroll ``model`` over ``inputs`` (a sequence of ``X_t``).

    Returns ``(outputs, tapes)`` with one head output and one tape per step.
    Initial states default to zero.
    """
    if len(inputs) == 0:
        raise ValueError("cannot run an empty series")
    X0 = np.asarray(inputs[0], dtype=np.float64)
    lead = model.cell._lead(X0)
    state = model.initial_state(X0.shape[:lead])
    if H0 is not None:
        state = (np.asarray(H0, dtype=np.float64),) + state[1:]
    if C0 is not None and len(state) == 2:
        state = (state[0], np.asarray(C0, dtype=np.float64))
    outputs, tapes = [], []
    for X in inputs:
        X = np.asarray(X, dtype=np.float64)
        if X.shape != X0.shape:
            raise ValueError(f"step input {X.shape} differs from first step {X0.shape}")
        state, tape = model.step(X, state)
        tapes.append(tape)
        outputs.append(output_head(model.head, state[0], logits=logits))
    return outputs, tapes


def init_params(
    kind: str,
    input_dims: Sequence[int],
    hidden_dims: Sequence[int],
    output_dims: Sequence[int] | None = None,
    seed: int = 0,
    scheme: str = "uniform",
    forget_bias: float = 1.0,
    head_activation: str = "identity",
    **activations: str,
) -> TRNN:
    """Build a freshly initialised model.

    ``scheme="uniform"`` draws every matrix entry from ``U[-s, s]`` with
    ``s = 1/sqrt(fan_in)``; ``scheme="zeros"`` gives all-zero weights.
    Biases start at zero except the tLSTM forget gate, which starts at
    ``forget_bias``.
    """
    input_dims = tuple(int(n) for n in input_dims)
    hidden_dims = tuple(int(n) for n in hidden_dims)
    output_dims = input_dims if output_dims is None else tuple(int(n) for n in output_dims)
    if not (len(input_dims) == len(hidden_dims) == len(output_dims)) or not input_dims:
        raise ValueError("input, hidden and output dims need the same positive number of modes")
    if min(input_dims + hidden_dims + output_dims) < 1:
        raise ValueError("every mode size must be positive")
    if scheme not in ("uniform", "zeros"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)

    def mat(rows, cols):
        if scheme == "zeros":
            return np.zeros((rows, cols))
        s = 1.0 / np.sqrt(cols)
        return rng.uniform(-s, s, size=(rows, cols))

    if kind == "tlstm":
        cls, names = LSTMCell, LSTMCell.GATES
    elif kind == "tgru":
        cls, names = GRUCell, GRUCell.GATES
    else:
        raise ValueError(f"unknown cell kind {kind!r}")
    gates = {}
    for a in names:
        W = [mat(h, h) for h in hidden_dims]
        U = [mat(h, x) for h, x in zip(hidden_dims, input_dims)]
        B = np.full(hidden_dims, forget_bias if a == "f" else 0.0)
        gates[a] = TuckerParams(W, U, B)
    head = OutputHead(
        V=[mat(y, h) for y, h in zip(output_dims, hidden_dims)],
        bias=np.zeros(output_dims),
        activation=head_activation,
    )
    return TRNN(cls(gates, **activations), head)
