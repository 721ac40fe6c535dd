"""LayerNorm and RMSNorm: forward maps, ellipsoid residuals, analytic Jacobians.

Both norms act on a single token (a length-d vector); column-wise helpers
apply them across a hidden state.  Jacobians are emitted with rows indexed
by outputs and columns by inputs, i.e. ``J[a, b] = d out_a / d in_b``; every
chain rule downstream of this module assumes that orientation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LAYERNORM = "layernorm"
RMSNORM = "rmsnorm"
_KINDS = (LAYERNORM, RMSNORM)

DEFAULT_EPSILON = 1e-5


class DegenerateTokenError(ZeroDivisionError):
    """Normalizing a constant (LayerNorm) or zero (RMSNorm) token at eps=0."""

    def __init__(self, message: str, token_index: int | None = None):
        super().__init__(message)
        self.token_index = token_index


@dataclass(frozen=True)
class LNParams:
    """Per-site normalization parameters.

    ``gamma`` and ``beta`` have length d; RMSNorm ignores ``beta`` (treated
    as zero).  ``epsilon`` is added under the square root of the denominator;
    the exact ellipsoid and scaling-law identities hold only at epsilon=0.
    """

    gamma: np.ndarray
    beta: np.ndarray = field(default=None)  # type: ignore[assignment]
    epsilon: float = DEFAULT_EPSILON
    kind: str = LAYERNORM

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=np.float64)
        object.__setattr__(self, "gamma", gamma)
        beta = self.beta
        if beta is None:
            beta = np.zeros_like(gamma)
        beta = np.asarray(beta, dtype=np.float64)
        object.__setattr__(self, "beta", beta)
        if gamma.ndim != 1 or beta.shape != gamma.shape:
            raise ValueError(
                f"LNParams: gamma/beta must be equal-length vectors, "
                f"got {gamma.shape} and {beta.shape}"
            )
        if self.epsilon < 0:
            raise ValueError(f"LNParams: epsilon must be >= 0, got {self.epsilon}")
        if self.kind not in _KINDS:
            raise ValueError(f"LNParams: unknown kind {self.kind!r}, expected one of {_KINDS}")

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    def with_gamma(self, gamma: np.ndarray) -> "LNParams":
        return LNParams(gamma, self.beta, self.epsilon, self.kind)


def _denominator(x: np.ndarray, p: LNParams, token_index: int | None):
    """(centered x, sqrt(spread + eps)) for LayerNorm; (x, rms) for RMSNorm."""
    if p.kind == LAYERNORM:
        c = x - x.mean()
        s = np.sqrt(np.mean(c * c) + p.epsilon)
        kind_msg = "constant token under LayerNorm"
    else:
        c = x
        s = np.sqrt(np.mean(x * x) + p.epsilon)
        kind_msg = "zero token under RMSNorm"
    if s == 0.0:
        where = "" if token_index is None else f" at token index {token_index}"
        raise DegenerateTokenError(
            f"division by zero: {kind_msg} with epsilon=0{where}", token_index
        )
    return c, s


def ln_forward(x: np.ndarray, p: LNParams, token_index: int | None = None) -> np.ndarray:
    """Normalize one token: gamma * (x - mu) / sqrt(var + eps) + beta.

    RMSNorm skips the mean subtraction and the bias: gamma * x / rms(x).
    """
    x = np.asarray(x, dtype=np.float64)
    if p.kind == LAYERNORM and x.shape[0] < 2:
        raise ValueError("ln_forward: LayerNorm needs d >= 2")
    c, s = _denominator(x, p, token_index)
    z = p.gamma * (c / s)
    if p.kind == LAYERNORM:
        z = z + p.beta
    return z


def ln_forward_columns(X: np.ndarray, p: LNParams) -> np.ndarray:
    """Apply ``ln_forward`` to every column of a d x n hidden state."""
    X = np.asarray(X, dtype=np.float64)
    out = np.empty_like(X)
    for j in range(X.shape[1]):
        out[:, j] = ln_forward(X[:, j], p, token_index=j)
    return out


def normalized_token(x: np.ndarray, p: LNParams) -> np.ndarray:
    """The pre-scale normalized token (what gamma multiplies); used by VJPs."""
    c, s = _denominator(np.asarray(x, dtype=np.float64), p, None)
    return c / s


def ellipsoid_residual(z: np.ndarray, p: LNParams) -> float:
    """Quadratic-form residual of z against the norm's output ellipsoid.

    LayerNorm outputs satisfy (z - beta)^T Gamma^-2 (z - beta) = d exactly
    when epsilon=0; RMSNorm outputs satisfy z^T Gamma^-2 z = d.  Returns the
    quadratic form minus d, so membership means a zero residual.
    """
    z = np.asarray(z, dtype=np.float64)
    if np.any(p.gamma == 0.0):
        raise ValueError("ellipsoid_residual: gamma has a zero entry, Gamma^-2 undefined")
    w = (z - p.beta) / p.gamma if p.kind == LAYERNORM else z / p.gamma
    return float(w @ w - z.shape[0])


def ln_jacobian(x: np.ndarray, p: LNParams, token_index: int | None = None) -> np.ndarray:
    """Exact d x d Jacobian of the normalization map, rows = outputs.

    For LayerNorm with denominator s = sqrt(var + eps) and c = x - mean(x):

        J[a, b] = gamma_a * ((delta_ab - 1/d) / s - c_a c_b / (d s^3))

    The mean and the denominator are both differentiated, so J annihilates
    the constant direction (J @ 1 = 0) and matches central finite
    differences of ``ln_forward``.  At eps=0 the map is (-1)-homogeneous:
    J(c x) = J(x) / c for any c > 0.  RMSNorm drops the mean terms:

        J[a, b] = gamma_a * (delta_ab / r - x_a x_b / (d r^2 * r))
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    if p.kind == LAYERNORM and d < 2:
        raise ValueError("ln_jacobian: LayerNorm needs d >= 2")
    c, s = _denominator(x, p, token_index)
    if p.kind == LAYERNORM:
        core = (np.eye(d) - np.full((d, d), 1.0 / d)) / s
    else:
        core = np.eye(d) / s
    jac = p.gamma[:, None] * core - np.outer(p.gamma * c, c) / (d * s**3)
    return jac


def ln_jacobian_blockdiag(X: np.ndarray, p: LNParams) -> np.ndarray:
    """nd x nd block-diagonal Jacobian of column-wise normalization."""
    X = np.asarray(X, dtype=np.float64)
    d, n = X.shape
    out = np.zeros((n * d, n * d))
    for j in range(n):
        out[j * d : (j + 1) * d, j * d : (j + 1) * d] = ln_jacobian(
            X[:, j], p, token_index=j
        )
    return out


def ln_vjp(X: np.ndarray, p: LNParams, gbar: np.ndarray):
    """Backward pass of column-wise normalization.

    Given the loss gradient ``gbar`` with respect to the outputs, returns
    ``(gx, ggamma, gbeta)``; ``gbeta`` is None for RMSNorm.
    """
    X = np.asarray(X, dtype=np.float64)
    gbar = np.asarray(gbar, dtype=np.float64)
    gx = np.empty_like(X)
    ggamma = np.zeros_like(p.gamma)
    gbeta = np.zeros_like(p.beta) if p.kind == LAYERNORM else None
    for j in range(X.shape[1]):
        jac = ln_jacobian(X[:, j], p, token_index=j)
        gx[:, j] = jac.T @ gbar[:, j]
        ggamma += normalized_token(X[:, j], p) * gbar[:, j]
        if gbeta is not None:
            gbeta += gbar[:, j]
    return gx, ggamma, gbeta
