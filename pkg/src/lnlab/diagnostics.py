"""Bound checkers and invariance tests for the stability analysis.

Every check returns a BoundReport carrying the left-hand side, the
right-hand side, and the margin rhs - lhs, so near-violations show up in
the CSV output instead of vanishing into a boolean.  The peri-norm bounds
are:

    MA(X_D)  <=  |X_0|_F / sqrt(nd) + 2 D dt (gamma_max + beta_max)
    Var(X_D) <= (|X_0|_F + 2 D dt sqrt(nd) (gamma_max + beta_max))^2 / (nd - 1)
    Var(x)   <=  E[(|X_0|_F + 2 D dt sqrt(nd) (gamma_max + beta_max))^2]      (data-wise)
    |X_D^a - X_D^b|_F <= |X_0^a - X_0^b|_F + 4 D dt sqrt(nd) gamma_max       (pathwise)
    W_p(mu_D, nu_D)   <= 2^((p-1)/p) (C(p) W_p(mu_0, nu_0) + 4 D dt sqrt(nd) gamma_max)

with gamma_max/beta_max maxima of the inf-norms over all output-LN sites.
The residual scale dt sharpens every D-dependent term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .attention import RELU, ActivationKinkError
from .model import (
    ATTN_OUT,
    FFN_OUT,
    BlockParams,
    ChainResult,
    ForwardTape,
    ModelConfig,
    PlacementError,
    model_forward,
    sublayer_sensitivity,
)
from .numerics import Moments, moments, wasserstein_exact


@dataclass(frozen=True)
class BoundReport:
    """One checked inequality; the bound holds on this instance iff margin >= 0."""

    check: str
    placement: str
    depth: int
    delta_t: float
    gamma_max: float
    beta_max: float
    nd: int
    lhs: float
    rhs: float
    seed: int = 0

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs

    def to_row(self) -> dict:
        return {
            "check": self.check,
            "placement": self.placement,
            "D": self.depth,
            "delta_t": self.delta_t,
            "gamma_max": self.gamma_max,
            "beta_max": self.beta_max,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "margin": self.margin,
            "seed": self.seed,
        }


def output_ln_extrema(params: list[BlockParams]) -> tuple[float, float]:
    """(gamma_max, beta_max): maxima of |gamma|_inf and |beta|_inf over all
    output-LN sites of all blocks."""
    gmax = 0.0
    bmax = 0.0
    found = False
    for b in params:
        for site in (ATTN_OUT, FFN_OUT):
            p = b.ln.get(site)
            if p is None:
                continue
            found = True
            gmax = max(gmax, float(np.abs(p.gamma).max()))
            bmax = max(bmax, float(np.abs(p.beta).max()))
    if not found:
        raise PlacementError("no output-LN sites present; bound constants undefined")
    return gmax, bmax


def c_hat(p: float, nd: int) -> float:
    """Norm-equivalence constant relating the entrywise p-norm to Frobenius.

    Exactly 1 at p = 2; (nd)^|1/2 - 1/p| otherwise.
    """
    if p < 1.0:
        raise ValueError(f"c_hat: p must be >= 1, got {p}")
    if p == 2.0:
        return 1.0
    return float(nd ** abs(0.5 - 1.0 / p))


def layer_moments(tape: ForwardTape) -> list[Moments]:
    """Per-layer (MA, Var, frob) series of length D + 1."""
    return [moments(x) for x in tape.states]


def _require_placement(cfg: ModelConfig, placement: str, check: str) -> None:
    if cfg.placement != placement:
        raise PlacementError(
            f"{check} applies to placement {placement!r}, model uses {cfg.placement!r}"
        )


def peri_growth_check(tape: ForwardTape, seed: int = 0) -> list[BoundReport]:
    """Terminal MA and entry variance against the linear/quadratic growth bounds."""
    cfg = tape.cfg
    _require_placement(cfg, model_mod.PERI, "peri_growth_check")
    gmax, bmax = output_ln_extrema(list(tape.params))
    nd = cfg.nd
    x0_frob = float(np.linalg.norm(tape.states[0]))
    terminal = moments(tape.x_final)
    common = dict(
        placement=cfg.placement, depth=cfg.depth, delta_t=cfg.delta_t,
        gamma_max=gmax, beta_max=bmax, nd=nd, seed=seed,
    )
    ma_rhs = x0_frob / np.sqrt(nd) + 2.0 * cfg.depth * cfg.delta_t * (gmax + bmax)
    var_rhs = (x0_frob + 2.0 * cfg.depth * cfg.delta_t * np.sqrt(nd) * (gmax + bmax)) ** 2 / (nd - 1)
    return [
        BoundReport(check="peri_ma_growth", lhs=terminal.mean_abs, rhs=float(ma_rhs), **common),
        BoundReport(check="peri_var_growth", lhs=terminal.var, rhs=float(var_rhs), **common),
    ]


def datawise_variance_check(
    inputs: list[np.ndarray],
    params: list[BlockParams],
    cfg: ModelConfig,
    entry: tuple[int, int],
    seed: int = 0,
) -> BoundReport:
    """Variance of one terminal entry across inputs vs the quadratic bound."""
    _require_placement(cfg, model_mod.PERI, "datawise_variance_check")
    if len(inputs) < 2:
        raise ValueError("datawise_variance_check: need at least 2 samples")
    gmax, bmax = output_ln_extrema(params)
    nd = cfg.nd
    values = []
    rhs_terms = []
    for x0 in inputs:
        tape = model_forward(x0, params, cfg)
        values.append(tape.x_final[entry])
        frob = float(np.linalg.norm(x0))
        rhs_terms.append(
            (frob + 2.0 * cfg.depth * cfg.delta_t * np.sqrt(nd) * (gmax + bmax)) ** 2
        )
    lhs = float(np.var(values, ddof=1))
    return BoundReport(
        check="datawise_variance", placement=cfg.placement, depth=cfg.depth,
        delta_t=cfg.delta_t, gamma_max=gmax, beta_max=bmax, nd=nd,
        lhs=lhs, rhs=float(np.mean(rhs_terms)), seed=seed,
    )


def pathwise_stability_check(
    x0a: np.ndarray,
    x0b: np.ndarray,
    params: list[BlockParams],
    cfg: ModelConfig,
    seed: int = 0,
) -> BoundReport:
    """Terminal Frobenius deviation of two inputs vs the pathwise bound."""
    _require_placement(cfg, model_mod.PERI, "pathwise_stability_check")
    gmax, bmax = output_ln_extrema(params)
    ta = model_forward(x0a, params, cfg)
    tb = model_forward(x0b, params, cfg)
    lhs = float(np.linalg.norm(ta.x_final - tb.x_final))
    rhs = float(
        np.linalg.norm(np.asarray(x0a) - np.asarray(x0b))
        + 4.0 * cfg.depth * cfg.delta_t * np.sqrt(cfg.nd) * gmax
    )
    return BoundReport(
        check="pathwise_stability", placement=cfg.placement, depth=cfg.depth,
        delta_t=cfg.delta_t, gamma_max=gmax, beta_max=bmax, nd=cfg.nd,
        lhs=lhs, rhs=rhs, seed=seed,
    )


def wasserstein_stability_check(
    mu0: np.ndarray,
    nu0: np.ndarray,
    params: list[BlockParams],
    cfg: ModelConfig,
    p: float = 2.0,
    c_hat_p: float | None = None,
    seed: int = 0,
) -> BoundReport:
    """Exact W_p between pushforward sample clouds vs the propagation bound.

    ``mu0``/``nu0`` are stacks of N inputs each (N, d, n).  The pushforwards
    are the terminal states; both optimal transport problems are solved
    exactly with the assignment solver.
    """
    _require_placement(cfg, model_mod.PERI, "wasserstein_stability_check")
    mu0 = np.asarray(mu0, dtype=np.float64)
    nu0 = np.asarray(nu0, dtype=np.float64)
    gmax, bmax = output_ln_extrema(params)
    mu_d = np.stack([model_forward(x, params, cfg).x_final for x in mu0])
    nu_d = np.stack([model_forward(x, params, cfg).x_final for x in nu0])
    lhs = wasserstein_exact(mu_d, nu_d, p)
    w0 = wasserstein_exact(mu0, nu0, p)
    chat = c_hat(p, cfg.nd) if c_hat_p is None else c_hat_p
    rhs = 2.0 ** ((p - 1.0) / p) * (
        chat * w0 + 4.0 * cfg.depth * cfg.delta_t * np.sqrt(cfg.nd) * gmax
    )
    return BoundReport(
        check=f"wasserstein_w{p:g}", placement=cfg.placement, depth=cfg.depth,
        delta_t=cfg.delta_t, gamma_max=gmax, beta_max=bmax, nd=cfg.nd,
        lhs=float(lhs), rhs=float(rhs), seed=seed,
    )


@dataclass(frozen=True)
class RescaleResult:
    """Outcome of a weight-rescaling probe on one sublayer's sensitivity.

    Peri: ``max_abs_dev`` is the entrywise deviation after rescaling (zero up
    to epsilon effects).  Pre: ``scale_ratio`` is the fitted scalar relating
    the non-identity parts, expected c1 * c2.
    """

    max_abs_dev: float
    scale_ratio: float


def rescale_invariance_test(
    params: list[BlockParams],
    cfg: ModelConfig,
    x_in: np.ndarray,
    block_index: int,
    scales: tuple[float, float],
    sublayer: str,
) -> RescaleResult:
    """Compare one sublayer's local sensitivity before and after scaling its
    weights by (c1, c2): (W, V) for attention, (W1, W2) for the FFN."""
    if cfg.placement not in (model_mod.PRE, model_mod.PERI):
        raise PlacementError(
            f"rescale_invariance_test needs pre or peri placement, got {cfg.placement!r}"
        )
    if sublayer not in ("attn", "ffn"):
        raise ValueError(f"unknown sublayer {sublayer!r}")
    c1, c2 = scales
    tape = model_forward(x_in, params, cfg)
    before = sublayer_sensitivity(tape, block_index, sublayer)

    b = params[block_index]
    if sublayer == "attn":
        scaled_block = BlockParams(b.attn.scaled(c1, c2), b.ffn, b.ln)
    else:
        if b.ffn.activation == RELU:
            trace = tape.traces[block_index].ffn
            core_in = trace.ln_in_out if trace.ln_in_out is not None else trace.x
            pre = b.ffn.w1 @ core_in
            # the sublayer input is unchanged by the rescale, so the scaled
            # pre-activation is exactly c1 * pre
            if np.any((pre > 0) != (c1 * pre > 0)):
                raise ActivationKinkError(
                    "weight rescaling flips relu sign patterns; use tanh"
                )
        scaled_block = BlockParams(b.attn, b.ffn.scaled(c1, c2), b.ln)
    scaled_params = list(params)
    scaled_params[block_index] = scaled_block
    tape2 = model_forward(x_in, scaled_params, cfg)
    after = sublayer_sensitivity(tape2, block_index, sublayer)

    if cfg.placement == model_mod.PERI:
        return RescaleResult(
            max_abs_dev=float(np.abs(after - before).max()), scale_ratio=float("nan")
        )
    eye = np.eye(cfg.nd)
    base = (before - eye) / cfg.delta_t
    scaled = (after - eye) / cfg.delta_t
    denom = float((base * base).sum())
    if denom == 0.0:
        raise ValueError("rescale_invariance_test: sublayer sensitivity equals identity")
    ratio = float((scaled * base).sum() / denom)
    return RescaleResult(
        max_abs_dev=float(np.abs(scaled - ratio * base).max()), scale_ratio=ratio
    )


def pre_exponential_bound(chain: ChainResult, seed: int = 0) -> BoundReport:
    """Terminal MA of the simplified pre-norm chain vs its product bound."""
    d, n = chain.states[0].shape
    return BoundReport(
        check="pre_exponential", placement=model_mod.PRE, depth=len(chain.factors),
        delta_t=1.0, gamma_max=float("nan"), beta_max=float("nan"), nd=d * n,
        lhs=chain.mean_abs, rhs=chain.bound_rhs, seed=seed,
    )


def dro_bound(
    train_loss: float,
    lipschitz: float,
    radius: float,
    depth: int,
    delta_t: float,
    nd: int,
    gamma_max: float,
    c_hat_1: float = 1.0,
) -> float:
    """Deterministic robustness bound on the loss over a Wasserstein ball:

        train_loss + L * (C(1) * r + 4 D dt sqrt(nd) gamma_max)
    """
    for name, value in (("lipschitz", lipschitz), ("radius", radius),
                        ("gamma_max", gamma_max), ("c_hat_1", c_hat_1)):
        if value < 0:
            raise ValueError(f"dro_bound: {name} must be >= 0, got {value}")
    return float(
        train_loss
        + lipschitz * (c_hat_1 * radius + 4.0 * depth * delta_t * np.sqrt(nd) * gamma_max)
    )
