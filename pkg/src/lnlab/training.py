"""Toy-scale optimization harness for divergence-count trials.

SGD with momentum and decoupled weight decay drives a model on synthetic
tasks; a run is flagged as diverged as soon as the loss goes non-finite or
the terminal hidden-state norm crosses the threshold.  Everything is keyed
off counter-based streams, so a TrainConfig determines its TrialOutcome
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import (
    DivergenceError,
    ModelConfig,
    flat_to_params,
    model_forward,
    param_gradients,
    params_to_flat,
    random_model,
)
from .numerics import Moments, RngStream, moments
from .parallel import map_indexed

MEAN_REGRESSION = "mean_regression"
NOISY_COPY = "noisy_copy"
_TASKS = (MEAN_REGRESSION, NOISY_COPY)


@dataclass(frozen=True)
class TrainConfig:
    cfg: ModelConfig
    task: str = MEAN_REGRESSION
    steps: int = 40
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    divergence_threshold: float = 1e8
    batch_size: int = 2
    noise_std: float = 0.1
    checkpoint_every: int = 10
    # None draws a fresh batch every step; an integer cycles a finite dataset
    dataset_size: int | None = None

    def __post_init__(self):
        if self.task not in _TASKS:
            raise ValueError(f"unknown task {self.task!r}, expected one of {_TASKS}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.weight_decay < 0 or self.lr < 0:
            raise ValueError("lr and weight_decay must be >= 0")


@dataclass(frozen=True)
class TrialOutcome:
    diverged: bool
    first_divergence_step: int | None
    final_loss: float
    loss_curve: tuple[float, ...]
    moment_curves: tuple[tuple[int, tuple[Moments, ...]], ...]

    def __post_init__(self):
        if self.diverged and self.first_divergence_step is None:
            raise ValueError("diverged outcome must carry first_divergence_step")


@dataclass(frozen=True)
class Task:
    """Synthetic supervised task: a sampler plus a differentiable loss.

    The readout and target maps are fixed at construction; per-step batches
    come from child streams so replays are identical.
    """

    kind: str
    cfg: ModelConfig
    stream: RngStream
    readout: np.ndarray
    target_map: np.ndarray
    noise_std: float
    dataset_size: int | None = None

    def sample(self, step: int, index: int):
        if self.dataset_size is not None:
            step = step % self.dataset_size
        gen = self.stream.child(step).child(index).generator()
        x0 = gen.normal(size=(self.cfg.d, self.cfg.n))
        if self.kind == MEAN_REGRESSION:
            y = self.target_map @ x0.mean(axis=1)
        else:
            y = x0[:, 0] + self.noise_std * gen.normal(size=self.cfg.d)
        return x0, y

    def loss_and_grad(self, x_final: np.ndarray, y: np.ndarray):
        """Mean squared error through the linear readout; returns the loss and
        its gradient with respect to the terminal hidden state."""
        d, n = x_final.shape
        if self.kind == MEAN_REGRESSION:
            yhat = self.readout @ x_final.mean(axis=1)
            err = yhat - y
            loss = float(err @ err) / d
            gcol = self.readout.T @ (2.0 * err / d) / n
            grad = np.tile(gcol[:, None], (1, n))
        else:
            yhat = self.readout @ x_final[:, 0]
            err = yhat - y
            loss = float(err @ err) / d
            grad = np.zeros_like(x_final)
            grad[:, 0] = self.readout.T @ (2.0 * err / d)
        return loss, grad


def make_task(
    kind: str,
    cfg: ModelConfig,
    stream: RngStream,
    noise_std: float = 0.1,
    dataset_size: int | None = None,
) -> Task:
    if kind not in _TASKS:
        raise ValueError(f"unknown task {kind!r}, expected one of {_TASKS}")
    gen = stream.child(0).generator()
    if kind == MEAN_REGRESSION:
        readout = gen.normal(0.0, 1.0 / np.sqrt(cfg.d), size=(cfg.d, cfg.d))
        target_map = gen.normal(0.0, 1.0 / np.sqrt(cfg.d), size=(cfg.d, cfg.d))
    else:
        readout = np.eye(cfg.d)
        target_map = np.eye(cfg.d)
    return Task(kind, cfg, stream.child(1), readout, target_map, noise_std, dataset_size)


def _is_weight_tensor(name: str) -> bool:
    # decoupled decay shrinks the attention/FFN matrices; LN parameters are
    # left undecayed, matching how decay is applied to norm layers in practice
    return name.startswith(("attn.", "ffn."))


def train_run(tc: TrainConfig) -> TrialOutcome:
    """SGD + momentum with decoupled decay: theta <- (1 - lr*wd) theta - lr*m."""
    root = RngStream(tc.seed)
    params = random_model(tc.cfg, root.child(0))
    task = make_task(tc.task, tc.cfg, root.child(1), tc.noise_std, tc.dataset_size)
    flats = [
        {k: v.copy() for k, v in params_to_flat(b).items()} for b in params
    ]
    momenta = [{k: np.zeros_like(v) for k, v in f.items()} for f in flats]

    losses: list[float] = []
    checkpoints: list[tuple[int, tuple[Moments, ...]]] = []
    diverged = False
    first_divergence = None

    for step in range(tc.steps):
        params = [flat_to_params(f, b) for f, b in zip(flats, params)]
        batch_loss = 0.0
        grad_accum = [{k: np.zeros_like(v) for k, v in f.items()} for f in flats]
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                for bi in range(tc.batch_size):
                    x0, y = task.sample(step, bi)
                    tape = model_forward(x0, params, tc.cfg)
                    if bi == 0 and (step % tc.checkpoint_every == 0 or step == tc.steps - 1):
                        checkpoints.append((step, tuple(moments(x) for x in tape.states)))
                    final_norm = float(np.linalg.norm(tape.x_final))
                    if not np.isfinite(final_norm) or final_norm > tc.divergence_threshold:
                        raise DivergenceError(
                            f"terminal norm {final_norm:g} crossed threshold",
                            block=tc.cfg.depth - 1,
                        )
                    loss, gbar = task.loss_and_grad(tape.x_final, y)
                    if not np.isfinite(loss):
                        raise DivergenceError("loss is non-finite", block=tc.cfg.depth - 1)
                    batch_loss += loss / tc.batch_size
                    grads = param_gradients(tape, gbar / tc.batch_size)
                    for acc, g in zip(grad_accum, grads):
                        for k in acc:
                            acc[k] += g[k]
        except DivergenceError:
            # the predicate: loss non-finite, or terminal norm over threshold
            diverged = True
            first_divergence = step
            losses.append(float("inf"))
            break
        losses.append(batch_loss)
        for f, m, acc in zip(flats, momenta, grad_accum):
            for k in f:
                m[k] = tc.momentum * m[k] + acc[k]
                decay = tc.weight_decay if _is_weight_tensor(k) else 0.0
                f[k] = (1.0 - tc.lr * decay) * f[k] - tc.lr * m[k]

    final_loss = losses[-1] if losses else float("nan")
    return TrialOutcome(
        diverged=diverged,
        first_divergence_step=first_divergence,
        final_loss=final_loss,
        loss_curve=tuple(losses),
        moment_curves=tuple(checkpoints),
    )


@dataclass(frozen=True)
class SweepResult:
    outcomes: dict[tuple[str, float, int], TrialOutcome]
    counts: dict[tuple[str, float], int]

    def rows(self) -> list[dict]:
        out = []
        for (placement, wd, seed), oc in sorted(self.outcomes.items()):
            out.append({
                "placement": placement,
                "weight_decay": wd,
                "seed": seed,
                "diverged": int(oc.diverged),
                "first_divergence_step": oc.first_divergence_step,
                "final_loss": oc.final_loss,
            })
        return out


def stability_trial(
    base: TrainConfig,
    placements: list[str],
    weight_decays: list[float],
    seeds: list[int],
) -> SweepResult:
    """Divergence-count grid: identical everything except placement, decay, seed."""
    grid = [
        (placement, wd, seed)
        for placement in placements
        for wd in weight_decays
        for seed in seeds
    ]

    def one(i: int) -> TrialOutcome:
        placement, wd, seed = grid[i]
        tc = replace(
            base,
            seed=seed,
            weight_decay=wd,
            cfg=replace(base.cfg, placement=placement),
        )
        return train_run(tc)

    results = map_indexed(one, len(grid))
    outcomes = {key: res for key, res in zip(grid, results)}
    counts: dict[tuple[str, float], int] = {}
    for (placement, wd, seed), oc in outcomes.items():
        counts[(placement, wd)] = counts.get((placement, wd), 0) + int(oc.diverged)
    return SweepResult(outcomes, counts)
