"""Finite-difference validation of every analytic derivative in the engine.

Central differences with step h = 1e-6 * (1 + |x|_inf) balance truncation
against rounding in float64.  Each category draws random desk-scale
instances and reports the Frobenius-relative error between the analytic
object and its finite-difference counterpart.
"""

from __future__ import annotations

import numpy as np

from . import attention as attn_mod
from . import model as model_mod
from . import normalization as norm
from .numerics import RngStream, unvec, vec
from .parallel import map_indexed

CATEGORIES = ("layernorm", "rmsnorm", "attention", "ffn", "block", "params")


def fd_step(x: np.ndarray) -> float:
    return 1e-6 * (1.0 + float(np.abs(x).max()))


def fd_jacobian(f, x: np.ndarray, h: float | None = None) -> np.ndarray:
    """Central-difference Jacobian of a vector map, rows = outputs."""
    x = np.asarray(x, dtype=np.float64)
    h = fd_step(x) if h is None else h
    cols = []
    for b in range(x.size):
        e = np.zeros_like(x)
        e[b] = h
        cols.append((f(x + e) - f(x - e)) / (2.0 * h))
    return np.stack(cols, axis=1)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / denom


def _rand_cfg(gen: np.random.Generator, depth_max: int = 4) -> model_mod.ModelConfig:
    return model_mod.ModelConfig(
        d=int(gen.integers(3, 9)),
        n=int(gen.integers(2, 6)),
        k=int(gen.integers(2, 5)),
        m=int(gen.integers(3, 9)),
        heads=int(gen.integers(1, 3)),
        depth=int(gen.integers(1, depth_max + 1)),
        placement=("off", "pre", "peri", "post")[int(gen.integers(4))],
        delta_t=float(gen.uniform(0.1, 1.0)),
        activation="tanh",
        epsilon=1e-5,
    )


def check_instance(category: str, seed: int, instance: int) -> dict:
    """One randomized FD-vs-analytic comparison; returns a gradcheck row."""
    stream = RngStream(seed, 10).child(instance)
    gen = stream.generator()
    cfg = _rand_cfg(gen)
    row = {
        "category": category, "instance": instance, "d": cfg.d, "n": cfg.n,
        "heads": cfg.heads, "depth": cfg.depth, "seed": seed,
    }

    if category in ("layernorm", "rmsnorm"):
        kind = norm.LAYERNORM if category == "layernorm" else norm.RMSNORM
        eps = float(gen.choice([0.0, 1e-5]))
        # LayerNorm at d = 2 is locally constant; FD cannot resolve a zero
        # Jacobian in relative terms, so that case is covered by exact tests
        d = max(cfg.d, 3) if kind == norm.LAYERNORM else cfg.d
        p = norm.LNParams(
            gen.normal(1.0, 0.3, size=d), gen.normal(0.0, 0.3, size=d), eps, kind
        )
        x = gen.normal(size=d)
        while np.std(x) < 0.1:
            # near-constant tokens sit below the FD step's resolution
            x = gen.normal(size=d)
        analytic = norm.ln_jacobian(x, p)
        fd = fd_jacobian(lambda v: norm.ln_forward(v, p), x)
        row["rel_err"] = rel_error(analytic, fd)
        return row

    if category == "attention":
        p = model_mod.random_block_params(cfg, gen).attn
        X = gen.normal(size=(cfg.d, cfg.n))
        analytic = attn_mod.attn_jacobian_full(X, p)
        fd = fd_jacobian(
            lambda v: vec(attn_mod.attn_forward(unvec(v, cfg.d, cfg.n), p)), vec(X)
        )
        row["rel_err"] = rel_error(analytic, fd)
        return row

    if category == "ffn":
        p = model_mod.random_block_params(cfg, gen).ffn
        X = gen.normal(size=(cfg.d, cfg.n))
        analytic = attn_mod.ffn_jacobian_blockdiag(X, p)
        fd = fd_jacobian(
            lambda v: vec(attn_mod.ffn_forward(unvec(v, cfg.d, cfg.n), p)), vec(X)
        )
        row["rel_err"] = rel_error(analytic, fd)
        return row

    if category == "block":
        params = model_mod.random_model(cfg, stream.child(1))
        X = gen.normal(size=(cfg.d, cfg.n))
        tape = model_mod.model_forward(X, params, cfg)
        analytic = model_mod.local_sensitivity(tape, 0)
        fd = fd_jacobian(
            lambda v: vec(model_mod.block_forward(unvec(v, cfg.d, cfg.n), params[0], cfg)[0]),
            vec(X),
        )
        row["rel_err"] = rel_error(analytic, fd)
        return row

    if category == "params":
        params = model_mod.random_model(cfg, stream.child(1))
        X = gen.normal(size=(cfg.d, cfg.n))
        C = gen.normal(size=(cfg.d, cfg.n))  # loss(X_D) = <C, X_D>
        tape = model_mod.model_forward(X, params, cfg)
        grads = model_mod.param_gradients(tape, C)
        block = int(gen.integers(cfg.depth))
        flat = {k: v.copy() for k, v in model_mod.params_to_flat(params[block]).items()}

        def loss_at(name, idx, delta):
            trial = {k: (v.copy() if k == name else v) for k, v in flat.items()}
            trial[name][idx] += delta
            pb = model_mod.flat_to_params(trial, params[block])
            plist = list(params)
            plist[block] = pb
            t = model_mod.model_forward(X, plist, cfg)
            return float((C * t.x_final).sum())

        worst = 0.0
        for name, arr in flat.items():
            h = 1e-6 * (1.0 + float(np.abs(arr).max()))
            fd = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                fd[idx] = (loss_at(name, idx, h) - loss_at(name, idx, -h)) / (2.0 * h)
            worst = max(worst, rel_error(grads[block][name], fd))
        row["rel_err"] = worst
        return row

    raise ValueError(f"unknown gradcheck category {category!r}")


def run_category(category: str, instances: int, seed: int) -> list[dict]:
    return map_indexed(lambda i: check_instance(category, seed, i), instances)


def run_all(instances: int, seed: int) -> list[dict]:
    rows = []
    for category in CATEGORIES:
        rows.extend(run_category(category, instances, seed))
    return rows
