"""Transformer blocks under a normalization placement with residual step scaling.

A block applies the attention sublayer and then the feedforward sublayer,
each wrapped according to the placement:

    off :  out = x + dt * f(x)
    pre :  out = x + dt * f(LN_in(x))
    peri:  out = x + dt * LN_out(f(LN_in(x)))
    post:  out = LN_out(x + dt * f(x))

``dt`` multiplies the sublayer output inside the residual sum for every
placement; dt = 1 recovers the unscaled composition bit-exactly.  The
forward pass records every intermediate state on a tape, from which the
analytic per-block sensitivities, backpropagated gradient products, and
parameter gradients are assembled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as attn_mod
from . import normalization as norm
from .numerics import (
    NonFiniteError,
    RngStream,
    ShapeMismatchError,
    softmax_columns,
    spectral_norm,
)

OFF = "off"
PRE = "pre"
PERI = "peri"
POST = "post"
PLACEMENTS = (OFF, PRE, PERI, POST)

ATTN_IN = "attn_in"
ATTN_OUT = "attn_out"
FFN_IN = "ffn_in"
FFN_OUT = "ffn_out"

_SITES_BY_PLACEMENT = {
    OFF: (),
    PRE: (ATTN_IN, FFN_IN),
    PERI: (ATTN_IN, ATTN_OUT, FFN_IN, FFN_OUT),
    POST: (ATTN_OUT, FFN_OUT),
}

# nd x nd sensitivities are desk-scale objects; refuse to materialize beyond this.
MATERIALIZE_LIMIT = 64


class DivergenceError(FloatingPointError):
    """Forward pass produced a non-finite hidden state."""

    def __init__(self, message: str, block: int):
        super().__init__(message)
        self.block = block


class PlacementError(ValueError):
    """A check or operation was asked for an incompatible placement."""


def sites_for_placement(placement: str) -> tuple[str, ...]:
    if placement not in PLACEMENTS:
        raise PlacementError(f"unknown placement {placement!r}, expected one of {PLACEMENTS}")
    return _SITES_BY_PLACEMENT[placement]


@dataclass(frozen=True)
class ModelConfig:
    d: int
    n: int
    k: int
    m: int
    heads: int
    depth: int
    placement: str = PERI
    delta_t: float = 1.0
    activation: str = attn_mod.TANH
    epsilon: float = norm.DEFAULT_EPSILON

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise PlacementError(
                f"unknown placement {self.placement!r}, expected one of {PLACEMENTS}"
            )
        if not (0.0 < self.delta_t <= 1.0):
            raise ValueError(f"delta_t must lie in (0, 1], got {self.delta_t}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        for name in ("d", "n", "k", "m", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def nd(self) -> int:
        return self.d * self.n

    @property
    def sites(self) -> tuple[str, ...]:
        return sites_for_placement(self.placement)


@dataclass(frozen=True)
class BlockParams:
    """Weights of one block: attention heads, FFN matrices, and the LN sites
    demanded by the placement (and only those)."""

    attn: attn_mod.AttentionParams
    ffn: attn_mod.FfnParams
    ln: dict[str, norm.LNParams] = field(default_factory=dict)


def validate_block(b: BlockParams, cfg: ModelConfig, index: int) -> None:
    expected = set(cfg.sites)
    got = set(b.ln)
    if got != expected:
        raise ValueError(
            f"block {index}: LN sites {sorted(got)} do not match placement "
            f"{cfg.placement!r} which demands {sorted(expected)}"
        )
    if b.attn.model_dim != cfg.d or b.attn.key_dim != cfg.k or b.attn.heads != cfg.heads:
        raise ShapeMismatchError(
            f"block {index}: attention shapes (H={b.attn.heads}, k={b.attn.key_dim}, "
            f"d={b.attn.model_dim}) do not match config (H={cfg.heads}, k={cfg.k}, d={cfg.d})"
        )
    if b.ffn.w1.shape != (cfg.m, cfg.d):
        raise ShapeMismatchError(
            f"block {index}: ffn w1 has shape {b.ffn.w1.shape}, expected ({cfg.m}, {cfg.d})"
        )
    for site, p in b.ln.items():
        if p.dim != cfg.d:
            raise ShapeMismatchError(f"block {index}: LN site {site} has dim {p.dim} != d={cfg.d}")


def params_to_flat(b: BlockParams) -> dict[str, np.ndarray]:
    """Flatten a block's tensors into named arrays (views, not copies)."""
    flat = {"attn.q": b.attn.q, "attn.k": b.attn.k, "attn.v": b.attn.v, "attn.w": b.attn.w,
            "ffn.w1": b.ffn.w1, "ffn.w2": b.ffn.w2}
    for site in sorted(b.ln):
        p = b.ln[site]
        flat[f"ln.{site}.gamma"] = p.gamma
        if p.kind == norm.LAYERNORM:
            flat[f"ln.{site}.beta"] = p.beta
    return flat


def flat_to_params(flat: dict[str, np.ndarray], template: BlockParams) -> BlockParams:
    """Rebuild a BlockParams from named arrays, shapes taken from ``template``."""
    attn = attn_mod.AttentionParams(
        flat["attn.q"], flat["attn.k"], flat["attn.v"], flat["attn.w"]
    )
    ffn = attn_mod.FfnParams(flat["ffn.w1"], flat["ffn.w2"], template.ffn.activation)
    ln = {}
    for site, p in template.ln.items():
        beta = flat.get(f"ln.{site}.beta", p.beta)
        ln[site] = norm.LNParams(flat[f"ln.{site}.gamma"], beta, p.epsilon, p.kind)
    return BlockParams(attn, ffn, ln)


def random_block_params(
    cfg: ModelConfig,
    gen: np.random.Generator,
    weight_scale: float = 1.0,
    ln_kind: str = norm.LAYERNORM,
) -> BlockParams:
    """Standard init: weights ~ normal(0, scale/sqrt(fan_in)), gamma=1, beta=0."""
    d, k, m, heads = cfg.d, cfg.k, cfg.m, cfg.heads
    sd = weight_scale / np.sqrt(d)
    attn = attn_mod.AttentionParams(
        q=gen.normal(0.0, sd, size=(heads, k, d)),
        k=gen.normal(0.0, sd, size=(heads, k, d)),
        v=gen.normal(0.0, sd, size=(heads, k, d)),
        w=gen.normal(0.0, weight_scale / np.sqrt(k), size=(heads, d, k)),
    )
    ffn = attn_mod.FfnParams(
        w1=gen.normal(0.0, sd, size=(m, d)),
        w2=gen.normal(0.0, weight_scale / np.sqrt(m), size=(d, m)),
        activation=cfg.activation,
    )
    ln = {
        site: norm.LNParams(np.ones(d), np.zeros(d), cfg.epsilon, ln_kind)
        for site in cfg.sites
    }
    return BlockParams(attn, ffn, ln)


def random_model(
    cfg: ModelConfig, stream: RngStream, weight_scale: float = 1.0,
    ln_kind: str = norm.LAYERNORM,
) -> list[BlockParams]:
    return [
        random_block_params(cfg, stream.child(i).generator(), weight_scale, ln_kind)
        for i in range(cfg.depth)
    ]


def zero_weight_block(cfg: ModelConfig, ln_kind: str = norm.LAYERNORM) -> BlockParams:
    d, k, m, heads = cfg.d, cfg.k, cfg.m, cfg.heads
    attn = attn_mod.AttentionParams(
        np.zeros((heads, k, d)), np.zeros((heads, k, d)),
        np.zeros((heads, k, d)), np.zeros((heads, d, k)),
    )
    ffn = attn_mod.FfnParams(np.zeros((m, d)), np.zeros((d, m)), cfg.activation)
    ln = {
        site: norm.LNParams(np.ones(d), np.zeros(d), cfg.epsilon, ln_kind)
        for site in cfg.sites
    }
    return BlockParams(attn, ffn, ln)


@dataclass(frozen=True)
class SublayerTrace:
    """Intermediates of one placement-wrapped sublayer application."""

    x: np.ndarray                      # sublayer input
    ln_in_out: np.ndarray | None       # LN_in(x), pre/peri only
    raw: np.ndarray                    # f(core input)
    ln_out_out: np.ndarray | None      # LN_out(raw), peri only
    summed: np.ndarray | None          # x + dt * raw, post only (pre-LN residual sum)
    out: np.ndarray


@dataclass(frozen=True)
class BlockTrace:
    attn: SublayerTrace
    ffn: SublayerTrace

    @property
    def x_in(self) -> np.ndarray:
        return self.attn.x

    @property
    def x_out(self) -> np.ndarray:
        return self.ffn.out


@dataclass(frozen=True)
class ForwardTape:
    """Complete forward record: replaying it reproduces X_D bit-exactly."""

    cfg: ModelConfig
    params: tuple[BlockParams, ...]
    states: tuple[np.ndarray, ...]     # X_0 ... X_D
    traces: tuple[BlockTrace, ...]

    @property
    def depth(self) -> int:
        return len(self.traces)

    @property
    def x_final(self) -> np.ndarray:
        return self.states[-1]


def _ln_at_site(X: np.ndarray, p: norm.LNParams, block: int, site: str) -> np.ndarray:
    try:
        return norm.ln_forward_columns(X, p)
    except norm.DegenerateTokenError as exc:
        raise norm.DegenerateTokenError(
            f"block {block}, site {site}: {exc}", exc.token_index
        ) from exc


def _apply_sublayer(
    X: np.ndarray, b: BlockParams, cfg: ModelConfig, which: str, block: int
) -> SublayerTrace:
    dt = cfg.delta_t
    if which == "attn":
        f = lambda z: attn_mod.attn_forward(z, b.attn)
        site_in, site_out = ATTN_IN, ATTN_OUT
    else:
        f = lambda z: attn_mod.ffn_forward(z, b.ffn)
        site_in, site_out = FFN_IN, FFN_OUT
    if cfg.placement == OFF:
        raw = f(X)
        return SublayerTrace(X, None, raw, None, None, X + dt * raw)
    if cfg.placement == PRE:
        z = _ln_at_site(X, b.ln[site_in], block, site_in)
        raw = f(z)
        return SublayerTrace(X, z, raw, None, None, X + dt * raw)
    if cfg.placement == PERI:
        z = _ln_at_site(X, b.ln[site_in], block, site_in)
        raw = f(z)
        y = _ln_at_site(raw, b.ln[site_out], block, site_out)
        return SublayerTrace(X, z, raw, y, None, X + dt * y)
    # post: normalize the residual sum itself
    raw = f(X)
    summed = X + dt * raw
    out = _ln_at_site(summed, b.ln[site_out], block, site_out)
    return SublayerTrace(X, None, raw, None, summed, out)


def block_forward(X: np.ndarray, b: BlockParams, cfg: ModelConfig, index: int = 0):
    """One block; returns (X_next, BlockTrace).  LN errors are tagged with the
    block index and site; non-finite math surfaces as NonFiniteError."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape != (cfg.d, cfg.n):
        raise ShapeMismatchError(
            f"block {index}: hidden state has shape {X.shape}, expected ({cfg.d}, {cfg.n})"
        )
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        attn_trace = _apply_sublayer(X, b, cfg, "attn", index)
        ffn_trace = _apply_sublayer(attn_trace.out, b, cfg, "ffn", index)
    return ffn_trace.out, BlockTrace(attn_trace, ffn_trace)


def model_forward(X0: np.ndarray, params: list[BlockParams], cfg: ModelConfig) -> ForwardTape:
    """Run all blocks, recording every state.  Raises DivergenceError with the
    first offending block index if any state goes non-finite."""
    X0 = np.asarray(X0, dtype=np.float64)
    if len(params) != cfg.depth:
        raise ValueError(f"expected {cfg.depth} blocks, got {len(params)}")
    if not np.isfinite(X0).all():
        raise DivergenceError("input state is non-finite", block=-1)
    for i, b in enumerate(params):
        validate_block(b, cfg, i)
    states = [X0.copy()]
    traces = []
    x = X0
    for i, b in enumerate(params):
        try:
            x, trace = block_forward(x, b, cfg, index=i)
        except NonFiniteError as exc:
            raise DivergenceError(f"block {i}: {exc}", block=i) from exc
        if not np.isfinite(x).all():
            raise DivergenceError(f"block {i} produced a non-finite state", block=i)
        states.append(x.copy())
        traces.append(trace)
    return ForwardTape(cfg, tuple(params), tuple(states), tuple(traces))


# ---------------------------------------------------------------------------
# Analytic sensitivities
# ---------------------------------------------------------------------------

def _core_jacobian(trace: SublayerTrace, b: BlockParams, which: str) -> np.ndarray:
    """nd x nd Jacobian of the bare sublayer map at its recorded core input."""
    core_in = trace.ln_in_out if trace.ln_in_out is not None else trace.x
    if which == "attn":
        return attn_mod.attn_jacobian_full(core_in, b.attn)
    return attn_mod.ffn_jacobian_blockdiag(core_in, b.ffn)


def sublayer_sensitivity(tape: ForwardTape, i: int, which: str) -> np.ndarray:
    """nd x nd Jacobian of one placement-wrapped sublayer of block i."""
    cfg = tape.cfg
    nd = cfg.nd
    if nd > MATERIALIZE_LIMIT:
        raise ValueError(
            f"refusing to materialize a {nd}x{nd} sensitivity "
            f"(limit {MATERIALIZE_LIMIT}); use param_gradients for large models"
        )
    b = tape.params[i]
    trace = getattr(tape.traces[i], which)
    dt = cfg.delta_t
    ln_in = b.ln.get(ATTN_IN if which == "attn" else FFN_IN)
    ln_out = b.ln.get(ATTN_OUT if which == "attn" else FFN_OUT)
    core = _core_jacobian(trace, b, which)
    eye = np.eye(nd)
    if cfg.placement == OFF:
        return eye + dt * core
    if cfg.placement == PRE:
        return eye + dt * core @ norm.ln_jacobian_blockdiag(trace.x, ln_in)
    if cfg.placement == PERI:
        return eye + dt * (
            norm.ln_jacobian_blockdiag(trace.raw, ln_out)
            @ core
            @ norm.ln_jacobian_blockdiag(trace.x, ln_in)
        )
    # post
    return norm.ln_jacobian_blockdiag(trace.summed, ln_out) @ (eye + dt * core)


def local_sensitivity(tape: ForwardTape, i: int) -> np.ndarray:
    """nd x nd block Jacobian d vec(X_{i+1}) / d vec(X_i), rows = outputs."""
    if not (0 <= i < tape.depth):
        raise IndexError(f"block index {i} out of range for depth {tape.depth}")
    return sublayer_sensitivity(tape, i, "ffn") @ sublayer_sensitivity(tape, i, "attn")


def gradient_product(tape: ForwardTape, i: int) -> np.ndarray:
    """d vec(X_D) / d vec(X_i): the product of local sensitivities of blocks
    i..D-1, ordered to match finite differences of the composite map."""
    if not (0 <= i < tape.depth):
        raise IndexError(f"block index {i} out of range for depth {tape.depth}")
    prod = np.eye(tape.cfg.nd)
    for j in range(i, tape.depth):
        prod = local_sensitivity(tape, j) @ prod
    return prod


# ---------------------------------------------------------------------------
# Parameter gradients (reverse sweep over the tape)
# ---------------------------------------------------------------------------

def _attn_vjp(Z: np.ndarray, p: attn_mod.AttentionParams, gbar: np.ndarray):
    scale = 1.0 / np.sqrt(p.key_dim)
    gq = np.zeros_like(p.q)
    gk = np.zeros_like(p.k)
    gv = np.zeros_like(p.v)
    gw = np.zeros_like(p.w)
    gz = np.zeros_like(Z)
    for h in range(p.heads):
        kz = p.k[h] @ Z
        qz = p.q[h] @ Z
        attn = softmax_columns(kz.T @ qz * scale)
        vz = p.v[h] @ Z
        gw[h] = gbar @ (vz @ attn).T
        t = p.w[h].T @ gbar
        t_at = t @ attn.T
        gv[h] = t_at @ Z.T
        ga = vz.T @ t
        gs = attn * (ga - (attn * ga).sum(axis=0, keepdims=True))
        gkz = qz @ gs.T * scale
        gqz = kz @ gs * scale
        gk[h] = gkz @ Z.T
        gq[h] = gqz @ Z.T
        gz += p.v[h].T @ t_at + p.k[h].T @ gkz + p.q[h].T @ gqz
    return gz, {"attn.q": gq, "attn.k": gk, "attn.v": gv, "attn.w": gw}


def _ffn_vjp(Z: np.ndarray, p: attn_mod.FfnParams, gbar: np.ndarray):
    pre = p.w1 @ Z
    act = attn_mod.activation_fn(p.activation)(pre)
    gw2 = gbar @ act.T
    gpre = (p.w2.T @ gbar) * attn_mod.activation_derivative(p.activation, pre)
    gw1 = gpre @ Z.T
    gz = p.w1.T @ gpre
    return gz, {"ffn.w1": gw1, "ffn.w2": gw2}


def _sublayer_backward(
    trace: SublayerTrace, b: BlockParams, cfg: ModelConfig, which: str, g: np.ndarray
):
    """Backprop one placement-wrapped sublayer; returns (gx, grads dict)."""
    dt = cfg.delta_t
    vjp = _attn_vjp if which == "attn" else _ffn_vjp
    params = b.attn if which == "attn" else b.ffn
    ln_in = b.ln.get(ATTN_IN if which == "attn" else FFN_IN)
    ln_out = b.ln.get(ATTN_OUT if which == "attn" else FFN_OUT)
    site_in = ATTN_IN if which == "attn" else FFN_IN
    site_out = ATTN_OUT if which == "attn" else FFN_OUT
    grads: dict[str, np.ndarray] = {}

    if cfg.placement == OFF:
        gcore, fgrads = vjp(trace.x, params, dt * g)
        grads.update(fgrads)
        return g + gcore, grads
    if cfg.placement == PRE:
        gz, fgrads = vjp(trace.ln_in_out, params, dt * g)
        grads.update(fgrads)
        gx, ggamma, gbeta = norm.ln_vjp(trace.x, ln_in, gz)
        grads[f"ln.{site_in}.gamma"] = ggamma
        if gbeta is not None:
            grads[f"ln.{site_in}.beta"] = gbeta
        return g + gx, grads
    if cfg.placement == PERI:
        graw, ggamma_o, gbeta_o = norm.ln_vjp(trace.raw, ln_out, dt * g)
        grads[f"ln.{site_out}.gamma"] = ggamma_o
        if gbeta_o is not None:
            grads[f"ln.{site_out}.beta"] = gbeta_o
        gz, fgrads = vjp(trace.ln_in_out, params, graw)
        grads.update(fgrads)
        gx, ggamma_i, gbeta_i = norm.ln_vjp(trace.x, ln_in, gz)
        grads[f"ln.{site_in}.gamma"] = ggamma_i
        if gbeta_i is not None:
            grads[f"ln.{site_in}.beta"] = gbeta_i
        return g + gx, grads
    # post
    gsum, ggamma_o, gbeta_o = norm.ln_vjp(trace.summed, ln_out, g)
    grads[f"ln.{site_out}.gamma"] = ggamma_o
    if gbeta_o is not None:
        grads[f"ln.{site_out}.beta"] = gbeta_o
    gcore, fgrads = vjp(trace.x, params, dt * gsum)
    grads.update(fgrads)
    return gsum + gcore, grads


def backward(tape: ForwardTape, upstream: np.ndarray):
    """Reverse sweep: returns (per-block gradient dicts, gradient at X_0).

    ``upstream`` is the loss gradient at X_D, accepted as an nd vector
    (column-major) or a d x n matrix.  Per-block parameter Jacobians are
    never materialized; everything is vector-Jacobian products.
    """
    cfg = tape.cfg
    g = np.asarray(upstream, dtype=np.float64)
    if g.ndim == 1:
        g = g.reshape((cfg.d, cfg.n), order="F")
    if g.shape != (cfg.d, cfg.n):
        raise ShapeMismatchError(
            f"upstream gradient has shape {g.shape}, expected ({cfg.d}, {cfg.n}) or ({cfg.nd},)"
        )
    if not np.isfinite(g).all():
        raise NonFiniteError("upstream gradient is non-finite")
    all_grads: list[dict[str, np.ndarray]] = [None] * tape.depth  # type: ignore[list-item]
    for i in range(tape.depth - 1, -1, -1):
        b = tape.params[i]
        trace = tape.traces[i]
        g, ffn_grads = _sublayer_backward(trace.ffn, b, cfg, "ffn", g)
        g, attn_grads = _sublayer_backward(trace.attn, b, cfg, "attn", g)
        merged = dict(attn_grads)
        merged.update(ffn_grads)
        all_grads[i] = merged
    return all_grads, g


def param_gradients(tape: ForwardTape, upstream: np.ndarray) -> list[dict[str, np.ndarray]]:
    """Gradients of a scalar loss with respect to every block's parameter
    tensors, given the loss gradient at X_D."""
    grads, _ = backward(tape, upstream)
    return grads


# ---------------------------------------------------------------------------
# Simplified pre-norm chain (attention-only, single head, RMSNorm)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainResult:
    states: tuple[np.ndarray, ...]
    mean_abs: float
    bound_rhs: float
    factors: np.ndarray

    @property
    def x_final(self) -> np.ndarray:
        return self.states[-1]


def simplified_pre_chain(
    X0: np.ndarray,
    weights: list[np.ndarray],
    gammas: list[np.ndarray],
    attn_q: list[np.ndarray] | None = None,
    attn_k: list[np.ndarray] | None = None,
    key_dim: int | None = None,
) -> ChainResult:
    """Attention-only pre-norm chain with merged d x d weights.

        X_{i+1} = X_i + W_i @ RMSNorm(X_i; gamma_i) @ A_i

    where A_i is column-stochastic: uniform attention when no query/key
    matrices are supplied, otherwise softmax((K Xhat)^T Q Xhat / sqrt(k))
    with Xhat the normalized state.  Alongside the terminal mean absolute
    value, returns the product upper bound

        (1/sqrt(nd)) * prod_i (1 + sqrt(n) |gamma_i|_inf max_j |x_{i,j}|^-1 |W_i|_2) * |X_0|_F

    whose per-layer factors are reported for growth inspection.
    """
    X = np.asarray(X0, dtype=np.float64)
    d, n = X.shape
    depth = len(weights)
    if len(gammas) != depth:
        raise ValueError(f"need one gamma per layer: {len(gammas)} != {depth}")
    if (attn_q is None) != (attn_k is None):
        raise ValueError("attn_q and attn_k must be supplied together")
    states = [X.copy()]
    factors = np.empty(depth)
    for i in range(depth):
        w = np.asarray(weights[i], dtype=np.float64)
        gamma = np.asarray(gammas[i], dtype=np.float64)
        if w.shape != (d, d):
            raise ShapeMismatchError(f"layer {i}: merged weight must be {d}x{d}, got {w.shape}")
        col_norms = np.linalg.norm(X, axis=0)
        if np.any(col_norms == 0.0):
            bad = int(np.argmin(col_norms))
            raise norm.DegenerateTokenError(
                f"layer {i}: zero column at token {bad}, RMSNorm undefined", bad
            )
        rms = col_norms / np.sqrt(d)
        xhat = gamma[:, None] * X / rms[None, :]
        if attn_q is None:
            a = np.full((n, n), 1.0 / n)
        else:
            kd = key_dim if key_dim is not None else attn_q[i].shape[0]
            scores = (attn_k[i] @ xhat).T @ (attn_q[i] @ xhat) / np.sqrt(kd)
            a = attn_mod.softmax_columns(scores)
        factors[i] = 1.0 + (
            np.sqrt(n)
            * np.max(np.abs(gamma))
            * (1.0 / col_norms.min())
            * spectral_norm(w)
        )
        X = X + w @ xhat @ a
        states.append(X.copy())
    nd = d * n
    bound_rhs = float(np.prod(factors) * np.linalg.norm(states[0]) / np.sqrt(nd))
    mean_abs = float(np.mean(np.abs(X)))
    return ChainResult(tuple(states), mean_abs, bound_rhs, factors)
