"""Dense float64 kernels shared by every other module.

Everything here is a pure function of its inputs: no global state, safe to
call from any number of threads.  Hidden states, weights and sample sets are
plain ``numpy.ndarray`` objects in float64.  The vectorization convention is
column-major throughout (``vec`` stacks columns), which is what makes the
Kronecker identities used by the sensitivity machinery come out right.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Fixed Philox key for the deterministic power-iteration start vector.
_POWER_ITERATION_KEY = 0x5EED_0F_5EED


class ShapeMismatchError(ValueError):
    """Operands do not compose; message carries both shapes."""


class NonFiniteError(ValueError):
    """An input (or intermediate state) contains NaN or +/-inf."""


class PowerIterationError(RuntimeError):
    """Power iteration did not converge; carries the last estimate."""

    def __init__(self, message: str, last_estimate: float):
        super().__init__(message)
        self.last_estimate = last_estimate


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D array, got ndim={a.ndim}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def softmax_columns(s: np.ndarray) -> np.ndarray:
    """Column-wise softmax with per-column max subtraction.

    Each output column is nonnegative and sums to one; the max shift keeps
    ``exp`` from overflowing for any finite input.
    """
    s = as_matrix(s)
    if not np.isfinite(s).all():
        raise NonFiniteError("softmax_columns: input contains non-finite entries")
    e = np.exp(s - s.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


@dataclass(frozen=True)
class Moments:
    frob: float
    mean_abs: float
    var: float


def moments(x: np.ndarray) -> Moments:
    """Frobenius norm, mean absolute value, and unbiased entry variance.

    The variance divisor is nd - 1.  By Cauchy-Schwarz,
    ``mean_abs <= frob / sqrt(nd)`` always holds.
    """
    x = as_matrix(x)
    if x.size == 0:
        raise ShapeMismatchError("moments: empty matrix")
    if x.size < 2:
        raise ShapeMismatchError("moments: variance undefined for a single entry")
    return Moments(
        frob=float(np.linalg.norm(x)),
        mean_abs=float(np.mean(np.abs(x))),
        var=float(np.var(x, ddof=1)),
    )


def spectral_norm(w: np.ndarray, tol: float = 1e-13, max_iter: int = 100_000) -> float:
    """Largest singular value of ``w`` by power iteration on ``w.T @ w``.

    Terminates when the relative change of the estimate drops below ``tol``.
    The start vector comes from a fixed Philox stream, so the result is a
    deterministic function of the input alone.
    """
    w = as_matrix(w)
    if w.size == 0:
        raise ShapeMismatchError("spectral_norm: empty matrix")
    gram_apply = lambda v: w.T @ (w @ v)
    rng = np.random.Generator(np.random.Philox(key=_POWER_ITERATION_KEY))
    v = rng.standard_normal(w.shape[1])
    v /= np.linalg.norm(v)
    sigma = float(np.linalg.norm(w @ v))
    if sigma == 0.0:
        return 0.0
    for _ in range(max_iter):
        v = gram_apply(v)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            # v fell into the null space; the attained estimate is exact there.
            return 0.0
        v /= nv
        sigma_new = float(np.linalg.norm(w @ v))
        if abs(sigma_new - sigma) <= tol * max(sigma_new, 1e-300):
            return sigma_new
        sigma = sigma_new
    raise PowerIterationError(
        f"spectral_norm: no convergence in {max_iter} iterations "
        f"(last estimate {sigma})",
        last_estimate=sigma,
    )


def vec(x: np.ndarray) -> np.ndarray:
    """Column-major vectorization: stacks the columns of ``x``."""
    return np.asarray(x, dtype=np.float64).reshape(-1, order="F")


def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size != rows * cols:
        raise ShapeMismatchError(f"unvec: {v.size} entries cannot fill {rows}x{cols}")
    return v.reshape((rows, cols), order="F")


def _mix64(z: int) -> int:
    """splitmix64 finalizer; used to derive child stream ids."""
    z = (z + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream: Philox4x64 keyed by (seed, stream id).

    Identical (seed, stream) pairs produce identical draw sequences on every
    platform, and independent streams can be consumed concurrently.  Each
    call to ``generator()`` starts the stream from the beginning, so a stream
    is a value, not a mutable cursor.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array(
            [self.seed & 0xFFFFFFFFFFFFFFFF, self.stream & 0xFFFFFFFFFFFFFFFF],
            dtype=np.uint64,
        )
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, index: int) -> "RngStream":
        """Derive a statistically independent substream."""
        return RngStream(self.seed, _mix64(self.stream ^ _mix64(index)))


def min_cost_assignment(cost: np.ndarray) -> np.ndarray:
    """Exact minimum-cost perfect matching on a square cost matrix.

    O(N^3) Hungarian algorithm with dual potentials (shortest augmenting
    paths).  Returns ``col`` such that row i is matched to column col[i].
    """
    cost = as_matrix(cost)
    n, m = cost.shape
    if n != m:
        raise ShapeMismatchError(f"min_cost_assignment: cost must be square, got {cost.shape}")
    if not np.isfinite(cost).all():
        raise NonFiniteError("min_cost_assignment: cost contains non-finite entries")

    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    # match[j] = row currently assigned to column j (1-based, 0 = free slot)
    match = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        way = np.zeros(n + 1, dtype=np.int64)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            # Relax reduced costs of all unused columns against row i0.
            free = ~used[1:]
            reduced = cost[i0 - 1, :] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], inf)
            j0 = int(np.argmin(masked)) + 1
            delta = masked[j0 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            if match[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        col[match[j] - 1] = j - 1
    return col


MAX_OT_SAMPLES = 256


def wasserstein_exact(
    a_samples: np.ndarray, b_samples: np.ndarray, p: float = 2.0
) -> float:
    """Exact p-Wasserstein distance between two uniform empirical measures.

    ``a_samples`` and ``b_samples`` are stacks of equally many, equally
    shaped matrices (shape (N, d, n) or (N, m) after flattening).  The cost
    of pairing A_i with B_j is the entrywise p-norm raised to the p-th
    power; the N x N assignment problem is solved exactly and the p-th root
    of the optimal mean cost is returned.
    """
    a = np.asarray(a_samples, dtype=np.float64)
    b = np.asarray(b_samples, dtype=np.float64)
    if p < 1.0:
        raise ValueError(f"wasserstein_exact: p must be >= 1, got {p}")
    if a.shape != b.shape:
        raise ShapeMismatchError(
            f"wasserstein_exact: sample sets differ in shape, {a.shape} vs {b.shape}"
        )
    if a.ndim < 2:
        raise ShapeMismatchError("wasserstein_exact: expected a stack of samples")
    n = a.shape[0]
    if n > MAX_OT_SAMPLES:
        raise ValueError(f"wasserstein_exact: N={n} exceeds the cap of {MAX_OT_SAMPLES}")
    flat_a = a.reshape(n, -1)
    flat_b = b.reshape(n, -1)
    diff = np.abs(flat_a[:, None, :] - flat_b[None, :, :])
    cost = (diff**p).sum(axis=2)
    col = min_cost_assignment(cost)
    mean_cost = float(cost[np.arange(n), col].mean())
    return mean_cost ** (1.0 / p)
