"""Independent reference computations used as test oracles.

Everything here is deliberately written without reference to the library's
own derivative or transport code: central differences probe the forward
maps, brute-force enumeration solves small transport problems, and
extended-precision arithmetic recomputes the scalar kernels.
"""

from __future__ import annotations

from itertools import permutations

import numpy as np


def central_diff_jacobian(f, x: np.ndarray, h: float | None = None) -> np.ndarray:
    """J[:, b] = (f(x + h e_b) - f(x - h e_b)) / 2h, rows = outputs."""
    x = np.asarray(x, dtype=np.float64)
    if h is None:
        h = 1e-6 * (1.0 + float(np.abs(x).max()))
    cols = []
    for b in range(x.size):
        e = np.zeros_like(x)
        e[b] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * h))
    return np.stack(cols, axis=1)


def central_diff_scalar_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Entrywise central differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def relative_error(a, b, floor: float = 1e-12) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / denom


def softmax_longdouble(column) -> np.ndarray:
    """Column softmax recomputed in extended precision."""
    col = np.asarray(column, dtype=np.longdouble)
    e = np.exp(col - col.max())
    return (e / e.sum()).astype(np.float64)


def wasserstein_bruteforce(a: np.ndarray, b: np.ndarray, p: float) -> float:
    """Exact W_p between uniform empirical measures by permutation search."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = a.shape[0]
    fa = a.reshape(n, -1)
    fb = b.reshape(n, -1)
    cost = (np.abs(fa[:, None, :] - fb[None, :, :]) ** p).sum(axis=2)
    best = min(sum(cost[i, pi] for i, pi in enumerate(perm)) for perm in permutations(range(n)))
    return float((best / n) ** (1.0 / p))


def assignment_bruteforce(cost: np.ndarray) -> float:
    """Minimum assignment cost by exhaustive enumeration."""
    n = cost.shape[0]
    return min(
        float(sum(cost[i, pi] for i, pi in enumerate(perm)))
        for perm in permutations(range(n))
    )


def scripted_attention(X, q, k, v, w) -> np.ndarray:
    """Direct transcription of the attention map for cross-checking.

    Stacks of per-head (k, d) matrices; softmax computed column by column
    with plain loops rather than the library kernel.
    """
    X = np.asarray(X, dtype=np.float64)
    d, n = X.shape
    heads = q.shape[0]
    kdim = q.shape[1]
    out = np.zeros((d, n))
    for h in range(heads):
        scores = (k[h] @ X).T @ (q[h] @ X) / np.sqrt(kdim)
        attn = np.zeros((n, n))
        for j in range(n):
            e = np.exp(scores[:, j] - scores[:, j].max())
            attn[:, j] = e / e.sum()
        out += w[h] @ v[h] @ X @ attn
    return out


def scripted_ffn(X, w1, w2, activation: str) -> np.ndarray:
    phi = np.tanh if activation == "tanh" else lambda z: np.where(z > 0, z, 0.0)
    return w2 @ phi(w1 @ X)


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx = np.log(np.asarray(xs, dtype=np.float64))
    ly = np.log(np.asarray(ys, dtype=np.float64))
    lx = lx - lx.mean()
    return float((lx @ (ly - ly.mean())) / (lx @ lx))
