"""DP-SGD / DP-Adam local optimisers and a conservative Renyi accountant."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptyInputError, NumericError
from .model import GlobalModel

ALPHAS = np.arange(2, 65, dtype=np.float64)
DEFAULT_LR = {"sgd": 0.25, "adam": 0.001}


@dataclass(frozen=True)
class DpConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 0.8
    learning_rate: float | None = None  # None: optimiser default
    optimizer: str = "sgd"
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    delta: float = 1e-5
    enabled: bool = True

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"dp.optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate", DEFAULT_LR[self.optimizer])
        if not self.clip_norm > 0:
            raise ConfigError(f"dp.clip_norm must be > 0, got {self.clip_norm}")
        if not self.noise_multiplier >= 0:
            raise ConfigError(f"dp.sigma must be >= 0, got {self.noise_multiplier}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"dp.lr must be >= 0, got {self.learning_rate}")
        b1, b2 = self.adam_betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"dp.adam_betas must lie in [0, 1), got {self.adam_betas}")
        if not self.adam_eps > 0:
            raise ConfigError("dp.adam_eps must be > 0")
        if not 0 < self.delta < 1:
            raise ConfigError(f"dp.delta must lie in (0, 1), got {self.delta}")


@dataclass
class OptimizerState:
    """Per-client optimiser memory; Adam moments are keyed by parameter index."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _global_norm(arrays) -> float:
    return math.sqrt(sum(float(np.dot(a.ravel(), a.ravel())) for a in arrays))


def clip_gradient(grad: Sequence[np.ndarray], clip_norm: float) -> list[np.ndarray]:
    """Scale a gradient set by ``min(1, C / ||g||)`` using the flattened global norm."""
    if not clip_norm > 0:
        raise ValueError("clip norm must be positive")
    grad = [np.asarray(g, dtype=np.float64) for g in grad]
    if not all(np.all(np.isfinite(g)) for g in grad):
        raise NumericError("non-finite gradient")
    norm = _global_norm(grad)
    if norm <= clip_norm:
        return [g.copy() for g in grad]
    scale = clip_norm / norm
    return [g * scale for g in grad]


def clip_per_example(per_example: Sequence[np.ndarray], clip_norm: float) -> list[np.ndarray]:
    """Clip each example's gradient set; arrays carry a leading batch axis."""
    for g in per_example:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite per-example gradient")
    n = per_example[0].shape[0]
    sq = np.zeros(n)
    for g in per_example:
        flat = g.reshape(n, -1)
        sq += np.einsum("ij,ij->i", flat, flat)
    norms = np.sqrt(sq)
    scale = np.ones(n)
    over = norms > clip_norm
    scale[over] = clip_norm / norms[over]
    if not over.any():
        return list(per_example)
    return [g * scale.reshape((n,) + (1,) * (g.ndim - 1)) for g in per_example]


def noisy_mean(per_example: Sequence[np.ndarray], cfg: DpConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """``(1/B) (sum_i clip(g_i, C) + N(0, sigma^2 C^2 I))`` with one noise draw per parameter array."""
    if len(per_example) == 0 or per_example[0].shape[0] == 0:
        raise EmptyInputError("dp step needs at least one per-example gradient")
    n = per_example[0].shape[0]
    clipped = clip_per_example(per_example, cfg.clip_norm)
    out = []
    noisy = cfg.noise_multiplier > 0
    std = cfg.noise_multiplier * cfg.clip_norm
    for g in clipped:
        total = g.sum(axis=0)
        if noisy:
            total = total + rng.normal(0.0, std, size=total.shape)
        out.append(total / n)
    return out


def apply_update(params: list[np.ndarray], grads: dict, cfg: DpConfig, state: OptimizerState) -> list[np.ndarray]:
    """Apply an SGD or Adam step to the parameters named in ``grads`` (index -> array)."""
    new = list(params)
    lr = cfg.learning_rate
    if cfg.optimizer == "sgd":
        for i, g in grads.items():
            new[i] = params[i] - lr * g
        state.step += 1
        return new
    b1, b2 = cfg.adam_betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, g in grads.items():
        m = state.m.get(i)
        v = state.v.get(i)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * (g * g) if v is None else b2 * v + (1.0 - b2) * (g * g)
        state.m[i], state.v[i] = m, v
        new[i] = params[i] - lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return new


def plain_step(model: GlobalModel, grads: Sequence, cfg: DpConfig, state: OptimizerState,
               indices: Sequence[int] | None = None) -> tuple[GlobalModel, OptimizerState]:
    """Non-private optimiser step on a batch-mean gradient set."""
    idx = range(len(grads)) if indices is None else indices
    new = apply_update(model.params(), {i: grads[i] for i in idx}, cfg, state)
    return model.with_params(new), state


def dp_step(model: GlobalModel, per_example_grads: Sequence, cfg: DpConfig, state: OptimizerState,
            rng: np.random.Generator, indices: Sequence[int] | None = None) -> tuple[GlobalModel, OptimizerState]:
    """One DP-SGD / DP-Adam step.

    ``per_example_grads`` follows the model's parameter order; each array has a
    leading batch axis. Only ``indices`` (default: all) are clipped, noised and
    updated, and the clipping norm is taken over exactly those parameters.
    """
    idx = list(range(len(per_example_grads))) if indices is None else list(indices)
    selected = [per_example_grads[i] for i in idx]
    if not selected or selected[0] is None or selected[0].shape[0] == 0:
        raise EmptyInputError("dp step needs at least one per-example gradient")
    g_tilde = noisy_mean(selected, cfg, rng)
    new = apply_update(model.params(), dict(zip(idx, g_tilde)), cfg, state)
    return model.with_params(new), state


# -- accounting ------------------------------------------------------------------

@dataclass
class PrivacyLedger:
    sampling_rate: float
    noise_multiplier: float
    delta: float
    steps_taken: int = 0

    def record(self, steps: int = 1) -> None:
        self.steps_taken += steps

    @property
    def epsilon_estimate(self) -> float:
        # nothing released yet, or noise so large nothing leaks
        if self.steps_taken == 0 or math.isinf(self.noise_multiplier):
            return 0.0
        return account_epsilon(self)


def rdp_epsilon(steps: int, noise_multiplier: float, delta: float) -> float:
    """``min over integer alpha in [2, 64] of steps*alpha/(2 sigma^2) + log(1/delta)/(alpha-1)``.

    Composition of the Gaussian mechanism without subsampling amplification,
    so an upper bound on the true privacy loss.
    """
    if noise_multiplier == 0:
        return math.inf
    vals = steps * ALPHAS / (2.0 * noise_multiplier ** 2) + math.log(1.0 / delta) / (ALPHAS - 1.0)
    return float(vals.min())


def account_epsilon(ledger: PrivacyLedger) -> float:
    return rdp_epsilon(ledger.steps_taken, ledger.noise_multiplier, ledger.delta)
