"""Multi-head self-attention and feedforward sublayers with per-token Jacobians.

The attention map is

    f_attn(X) = sum_h  W_h V_h X softmax_cols((K_h X)^T Q_h X / sqrt(k))

with Q, K, V of shape (k, d) and W of shape (d, k) per head; the feedforward
map is f_ffn(X) = W2 phi(W1 X) applied token-wise (no bias).  Jacobians are
rows = outputs, matching the normalization module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeMismatchError, softmax_columns

TANH = "tanh"
RELU = "relu"
_ACTIVATIONS = (TANH, RELU)


class ActivationKinkError(ArithmeticError):
    """A ReLU pre-activation landed exactly on the kink; use tanh instead."""


@dataclass(frozen=True)
class AttentionParams:
    """Stacked head weights: q, k, v of shape (H, k, d) and w of shape (H, d, k)."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        q, k, v, w = (np.asarray(m, dtype=np.float64) for m in (self.q, self.k, self.v, self.w))
        for name, m in (("q", q), ("k", k), ("v", v), ("w", w)):
            if m.ndim != 3:
                raise ShapeMismatchError(f"AttentionParams.{name}: expected (H, ., .), got {m.shape}")
            object.__setattr__(self, name, m)
        heads, kdim, d = q.shape
        if heads < 1:
            raise ShapeMismatchError("AttentionParams: need at least one head")
        if k.shape != (heads, kdim, d) or v.shape != (heads, kdim, d) or w.shape != (heads, d, kdim):
            raise ShapeMismatchError(
                f"AttentionParams: inconsistent head shapes q={q.shape} k={k.shape} "
                f"v={v.shape} w={w.shape}"
            )

    @property
    def heads(self) -> int:
        return self.q.shape[0]

    @property
    def key_dim(self) -> int:
        return self.q.shape[1]

    @property
    def model_dim(self) -> int:
        return self.q.shape[2]

    def scaled(self, c_w: float, c_v: float) -> "AttentionParams":
        return AttentionParams(self.q, self.k, self.v * c_v, self.w * c_w)


@dataclass(frozen=True)
class FfnParams:
    """Two-matrix token-wise MLP: w1 (m, d), w2 (d, m), activation tanh or relu."""

    w1: np.ndarray
    w2: np.ndarray
    activation: str = TANH

    def __post_init__(self):
        w1 = np.asarray(self.w1, dtype=np.float64)
        w2 = np.asarray(self.w2, dtype=np.float64)
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)
        if w1.ndim != 2 or w2.ndim != 2 or w1.shape != (w2.shape[1], w2.shape[0]):
            raise ShapeMismatchError(
                f"FfnParams: shapes do not compose d->m->d, got w1={w1.shape} w2={w2.shape}"
            )
        if self.activation not in _ACTIVATIONS:
            raise ValueError(
                f"FfnParams: unknown activation {self.activation!r}, expected one of {_ACTIVATIONS}"
            )

    def scaled(self, c1: float, c2: float) -> "FfnParams":
        return FfnParams(self.w1 * c1, self.w2 * c2, self.activation)


def activation_fn(name: str):
    if name == TANH:
        return np.tanh
    return lambda z: np.maximum(z, 0.0)


def activation_derivative(name: str, pre: np.ndarray) -> np.ndarray:
    if name == TANH:
        return 1.0 - np.tanh(pre) ** 2
    if np.any(pre == 0.0):
        raise ActivationKinkError(
            "relu pre-activation is exactly zero; derivative undefined, use tanh"
        )
    return (pre > 0.0).astype(np.float64)


def _check_state(X: np.ndarray, p: AttentionParams | FfnParams) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeMismatchError(f"hidden state must be d x n, got {X.shape}")
    d_expected = p.model_dim if isinstance(p, AttentionParams) else p.w1.shape[1]
    if X.shape[0] != d_expected:
        raise ShapeMismatchError(
            f"hidden state has d={X.shape[0]} but parameters expect d={d_expected}"
        )
    return X


def attn_forward(X: np.ndarray, p: AttentionParams) -> np.ndarray:
    X = _check_state(X, p)
    scale = 1.0 / np.sqrt(p.key_dim)
    out = np.zeros_like(X)
    for h in range(p.heads):
        scores = (p.k[h] @ X).T @ (p.q[h] @ X) * scale
        attn = softmax_columns(scores)
        out += p.w[h] @ (p.v[h] @ X) @ attn
    return out


def attn_jacobian(X: np.ndarray, p: AttentionParams, i: int, j: int) -> np.ndarray:
    """d x d block d[f_attn(X)]_j / d x_i of the attention map.

    Per head, with a = softmax((K X)^T Q x_j / sqrt(k)) and the softmax
    Jacobian S = diag(a) - a a^T:

        W V (a_i I + X S M),   M = (e_i x_j^T Q^T K + 1_{i=j} X^T K^T Q) / sqrt(k)

    The block depends linearly on V and on W, which is what makes the
    pre-norm sensitivity scale with the weights and the peri-norm one not.
    """
    X = _check_state(X, p)
    d, n = X.shape
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"attn_jacobian: token indices ({i}, {j}) out of range for n={n}")
    scale = 1.0 / np.sqrt(p.key_dim)
    jac = np.zeros((d, d))
    for h in range(p.heads):
        kx = p.k[h] @ X
        qxj = p.q[h] @ X[:, j]
        a = softmax_columns((kx.T @ qxj * scale)[:, None])[:, 0]
        soft = np.diag(a) - np.outer(a, a)
        # e_i (K^T Q x_j)^T fills row i; the i=j indicator adds X^T K^T Q.
        m = np.zeros((n, d))
        m[i, :] = p.k[h].T @ qxj
        if i == j:
            m += kx.T @ p.q[h]
        m *= scale
        wv = p.w[h] @ p.v[h]
        jac += wv * a[i] + wv @ (X @ (soft @ m))
    return jac


def attn_jacobian_full(X: np.ndarray, p: AttentionParams) -> np.ndarray:
    """nd x nd Jacobian of f_attn under column-major vectorization.

    Block (j, i) holds d[f_attn]_j / d x_i; shared per-head quantities are
    hoisted out of the n^2 block loop.
    """
    X = _check_state(X, p)
    d, n = X.shape
    scale = 1.0 / np.sqrt(p.key_dim)
    full = np.zeros((n * d, n * d))
    for h in range(p.heads):
        kx = p.k[h] @ X
        qx = p.q[h] @ X
        attn = softmax_columns(kx.T @ qx * scale)
        wv = p.w[h] @ p.v[h]
        ktq_x = p.k[h].T @ qx  # column j holds K^T Q x_j
        xtk_q = kx.T @ p.q[h]  # n x d, the indicator term
        for j in range(n):
            a = attn[:, j]
            soft = np.diag(a) - np.outer(a, a)
            x_soft = X @ soft
            for i in range(n):
                m = np.zeros((n, d))
                m[i, :] = ktq_x[:, j]
                if i == j:
                    m += xtk_q
                block = wv * a[i] + wv @ (x_soft @ (m * scale))
                full[j * d : (j + 1) * d, i * d : (i + 1) * d] += block
    return full


def ffn_forward(X: np.ndarray, p: FfnParams) -> np.ndarray:
    X = _check_state(X, p)
    phi = activation_fn(p.activation)
    return p.w2 @ phi(p.w1 @ X)


def ffn_jacobian(X: np.ndarray, p: FfnParams, j: int) -> np.ndarray:
    """d x d token Jacobian W2 diag(phi'(W1 x_j)) W1; off-token blocks are zero."""
    X = _check_state(X, p)
    if not (0 <= j < X.shape[1]):
        raise IndexError(f"ffn_jacobian: token index {j} out of range for n={X.shape[1]}")
    pre = p.w1 @ X[:, j]
    dphi = activation_derivative(p.activation, pre)
    return (p.w2 * dphi) @ p.w1


def ffn_jacobian_blockdiag(X: np.ndarray, p: FfnParams) -> np.ndarray:
    """nd x nd Jacobian of token-wise f_ffn (block diagonal)."""
    X = _check_state(X, p)
    d, n = X.shape
    out = np.zeros((n * d, n * d))
    for j in range(n):
        out[j * d : (j + 1) * d, j * d : (j + 1) * d] = ffn_jacobian(X, p, j)
    return out
