"""Dense tensor primitives: unfoldings, mode products and Tucker maps.

Tensors are plain C-ordered ``float64`` ndarrays (last index fastest).
Mode indices are 1-based throughout the public API. Unfolding and
vectorisation follow the Kolda-Bader convention (mode-1 fastest), which
makes ``vec(X x_1 W_1 ... x_D W_D) == (W_D kron ... kron W_1) vec(X)``
hold literally.

Functions that take a list of per-mode matrices treat the trailing
``len(mats)`` axes of the tensor as modes; any extra leading axes are
batch axes and are carried through untouched.
"""
from __future__ import annotations

from functools import reduce
from math import prod
from typing import Sequence

import numpy as np


def as_tensor(x, dims: Sequence[int] | None = None) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 tensor, optionally checking dims."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim:
        arr = np.ascontiguousarray(arr)
    if arr.ndim == 0:
        raise ValueError("a tensor needs at least one mode")
    if any(n < 1 for n in arr.shape):
        raise ValueError(f"every mode size must be positive, got {arr.shape}")
    if dims is not None and tuple(arr.shape) != tuple(dims):
        raise ValueError(f"expected dims {tuple(dims)}, got {arr.shape}")
    return arr


def _check_mode(d: int, ndim: int) -> int:
    if not 1 <= d <= ndim:
        raise ValueError(f"mode {d} out of range for a {ndim}-way tensor")
    return d - 1


def matricize(X: np.ndarray, d: int) -> np.ndarray:
    """Mode-``d`` unfolding ``X_(d)``.

    Rows index mode ``d``; columns run over the remaining modes with the
    lowest-numbered remaining mode varying fastest.
    """
    X = np.asarray(X, dtype=np.float64)
    ax = _check_mode(d, X.ndim)
    return np.moveaxis(X, ax, 0).reshape(X.shape[ax], -1, order="F")


def dematricize(M: np.ndarray, d: int, dims: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`matricize`."""
    dims = tuple(int(n) for n in dims)
    ax = _check_mode(d, len(dims))
    M = np.asarray(M, dtype=np.float64)
    rest = prod(dims) // dims[ax]
    if M.shape != (dims[ax], rest):
        raise ValueError(f"matrix of shape {M.shape} cannot fold to {dims} along mode {d}")
    moved = (dims[ax],) + dims[:ax] + dims[ax + 1:]
    return np.ascontiguousarray(np.moveaxis(M.reshape(moved, order="F"), 0, ax))


def vec(X: np.ndarray) -> np.ndarray:
    """Column-major (mode-1 fastest) vectorisation."""
    return np.asarray(X, dtype=np.float64).reshape(-1, order="F")


def ivec(v: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`vec`."""
    v = np.asarray(v, dtype=np.float64)
    dims = tuple(int(n) for n in dims)
    if v.ndim != 1 or v.size != prod(dims):
        raise ValueError(f"vector of length {v.size} does not match dims {dims}")
    return np.ascontiguousarray(v.reshape(dims, order="F"))


def kron(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Kronecker product of two matrices."""
    return np.kron(np.atleast_2d(A), np.atleast_2d(B))


def kron_chain(mats: Sequence[np.ndarray]) -> np.ndarray:
    """``mats[-1] kron ... kron mats[0]``, the explicit matrix of a Tucker map.

    Exponentially large; meant for checking small cases only.
    """
    return reduce(lambda acc, m: kron(m, acc), mats[1:], np.atleast_2d(mats[0]))


def hadamard(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ValueError(f"hadamard product needs equal shapes, got {A.shape} and {B.shape}")
    return A * B


def _mode_dot(X: np.ndarray, W: np.ndarray, axis: int) -> np.ndarray:
    # W @ X along one absolute axis, routed to a single GEMM when possible.
    shape = X.shape
    n = shape[axis]
    pre = prod(shape[:axis])
    post = prod(shape[axis + 1:])
    if post == 1:
        # (W @ X^T)^T runs markedly faster than X @ W^T for tiny n in OpenBLAS
        out = (W @ X.reshape(pre, n).T).T
    elif pre == 1:
        out = W @ X.reshape(n, post)
    else:
        out = np.matmul(W, X.reshape(pre, n, post))
    return out.reshape(shape[:axis] + (W.shape[0],) + shape[axis + 1:])


def mode_product(X: np.ndarray, W: np.ndarray, d: int, lead: int = 0) -> np.ndarray:
    """Mode-``d`` product ``X x_d W``.

    ``lead`` leading axes of ``X`` are treated as batch axes and skipped
    when counting modes.
    """
    X = np.asarray(X, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    ax = lead + _check_mode(d, X.ndim - lead)
    if W.ndim != 2 or W.shape[1] != X.shape[ax]:
        raise ValueError(
            f"matrix of shape {W.shape} does not act on mode {d} of size {X.shape[ax]}"
        )
    return _mode_dot(X, W, ax)


def _lead(X: np.ndarray, mats: Sequence[np.ndarray]) -> int:
    lead = X.ndim - len(mats)
    if lead < 0:
        raise ValueError(f"{len(mats)} matrices given for a {X.ndim}-way tensor")
    for d, W in enumerate(mats):
        if W.ndim != 2 or W.shape[1] != X.shape[lead + d]:
            raise ValueError(
                f"matrix {d + 1} of shape {W.shape} does not act on mode size "
                f"{X.shape[lead + d]}"
            )
    return lead


def _order(mats: Sequence[np.ndarray]) -> list[int]:
    # Shrinking modes first keeps intermediates small; the result is order-free.
    return sorted(range(len(mats)), key=lambda d: mats[d].shape[0] / mats[d].shape[1])


def tucker_map(X: np.ndarray, mats: Sequence[np.ndarray]) -> np.ndarray:
    """``X x_1 mats[0] x_2 mats[1] ... x_D mats[D-1]``."""
    X = np.asarray(X, dtype=np.float64)
    lead = _lead(X, mats)
    out = X
    for d in _order(mats):
        out = _mode_dot(out, mats[d], lead + d)
    return out


def tucker_adjoint(G: np.ndarray, mats: Sequence[np.ndarray]) -> np.ndarray:
    """Apply the transpose of the Tucker map defined by ``mats`` to ``G``.

    Equals ``ivec(vec(G) @ kron_chain(mats))`` without forming the
    Kronecker matrix.
    """
    return tucker_map(G, [np.asarray(W).T for W in mats])


def tucker_backward(
    G: np.ndarray,
    mats: Sequence[np.ndarray],
    X: np.ndarray,
    need_input_grad: bool = True,
) -> tuple[list[np.ndarray], np.ndarray | None]:
    """Gradients of ``<G, tucker_map(X, mats)>`` w.r.t. every matrix and ``X``.

    The matrix gradient for mode ``d`` is ``[G x_{k!=d} W_k^T]_(d) X_(d)^T``,
    summed over any batch axes. Leave-one-out products share a common
    prefix, so a D-way map costs ``D(D+1)/2`` mode products including the
    input gradient.
    """
    G = np.asarray(G, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    D = len(mats)
    lead = G.ndim - D
    if lead < 0 or X.ndim != G.ndim or X.shape[:lead] != G.shape[:lead]:
        raise ValueError(f"incompatible adjoint {G.shape} and input {X.shape}")
    mt = [np.asarray(W, dtype=np.float64).T for W in mats]
    for d in range(D):
        if mt[d].shape[0] != X.shape[lead + d] or mt[d].shape[1] != G.shape[lead + d]:
            raise ValueError(f"matrix {d + 1} of shape {mats[d].shape} does not fit")

    grads: list[np.ndarray] = [None] * D  # type: ignore[list-item]
    input_grad = None
    prefix = G
    all_axes = list(range(G.ndim))
    for d in range(D):
        q = prefix
        for k in range(d + 1, D):
            q = _mode_dot(q, mt[k], lead + k)
        axes = [a for a in all_axes if a != lead + d]
        grads[d] = np.tensordot(q, X, axes=(axes, axes))
        if d == D - 1 and need_input_grad:
            input_grad = _mode_dot(q, mt[d], lead + d)
        prefix = _mode_dot(prefix, mt[d], lead + d) if d < D - 1 else prefix
    return grads, input_grad
