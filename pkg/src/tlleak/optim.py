"""Update rules over parameter lists (``[W0, b0, W1, b1, ...]``).

All steps are pure: they return new arrays and draw noise only from the seed
they are given.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import Gradients, ShapeError

Params = Sequence[np.ndarray]


def _as_list(grads) -> list[np.ndarray]:
    return list(grads.params) if isinstance(grads, Gradients) else list(grads)


def _check(params: Params, grads: Params) -> None:
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ShapeError(
            f"gradient shapes {[g.shape for g in grads]} do not match parameters {[p.shape for p in params]}"
        )


def sgd_step(params: Params, grads, lr: float) -> list[np.ndarray]:
    grads = _as_list(grads)
    _check(params, grads)
    return [p - lr * g for p, g in zip(params, grads)]


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Params, **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(state: AdamState, params: Params, grads) -> tuple[AdamState, list[np.ndarray]]:
    grads = _as_list(grads)
    _check(params, grads)
    _check(state.m, grads)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = [b1 * mi + (1 - b1) * g for mi, g in zip(state.m, grads)]
    v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(state.v, grads)]
    c1, c2 = 1 - b1**t, 1 - b2**t
    new = [p - state.lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps) for p, mi, vi in zip(params, m, v)]
    return AdamState(m, v, t, state.lr, b1, b2, state.eps), new


@dataclass(frozen=True)
class SgldConfig:
    lr: float
    temperature: float = 2.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"SGLD lr must be positive, got {self.lr}")
        if self.temperature < 0:
            raise ValueError(f"SGLD temperature must be >= 0, got {self.temperature}")


def sgld_step(params: Params, grads, cfg: SgldConfig, seed: int) -> list[np.ndarray]:
    """SGD step plus N(0, temperature * lr) noise on every coordinate."""
    new = sgd_step(params, grads, cfg.lr)
    if cfg.temperature == 0:
        return new
    rng = np.random.default_rng(seed)
    std = np.sqrt(cfg.temperature * cfg.lr)
    return [p + rng.normal(0.0, std, size=p.shape) for p in new]


def sgld_noise(params: Params, cfg: SgldConfig, seed: int) -> list[np.ndarray]:
    """The exact noise ``sgld_step`` injects for this seed."""
    if cfg.temperature == 0:
        return [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(seed)
    std = np.sqrt(cfg.temperature * cfg.lr)
    return [rng.normal(0.0, std, size=p.shape) for p in params]


@dataclass(frozen=True)
class DpSgdConfig:
    lr: float
    clip_norm: float = 1.0
    noise_multiplier: float = 1.0

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.noise_multiplier < 0:
            raise ValueError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")


def stack_gradients(per_example: Sequence) -> list[np.ndarray]:
    """List of per-example gradients -> per-parameter arrays with a leading batch axis."""
    rows = [_as_list(g) for g in per_example]
    if not rows:
        raise ValueError("empty batch of per-example gradients")
    return [np.stack(parts) for parts in zip(*rows)]


def clip_per_example(stacked: list[np.ndarray], clip_norm: float) -> list[np.ndarray]:
    """Scale each example's gradient to global L2 norm at most ``clip_norm``."""
    n = stacked[0].shape[0]
    sq = sum(np.sum(g.reshape(n, -1) ** 2, axis=1) for g in stacked)
    norms = np.sqrt(sq)
    factor = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
    if np.all(factor == 1.0):
        return stacked
    return [g * factor.reshape((n,) + (1,) * (g.ndim - 1)) for g in stacked]


def dpsgd_noisy_mean(stacked: list[np.ndarray], cfg: DpSgdConfig, seed: int) -> list[np.ndarray]:
    n = stacked[0].shape[0]
    if n == 0:
        raise ValueError("empty batch of per-example gradients")
    clipped = clip_per_example(stacked, cfg.clip_norm)
    total = [np.sum(g, axis=0) for g in clipped]
    if cfg.noise_multiplier > 0:
        rng = np.random.default_rng(seed)
        std = cfg.noise_multiplier * cfg.clip_norm
        total = [t + rng.normal(0.0, std, size=t.shape) for t in total]
    return [t / n for t in total]


def dpsgd_step(params: Params, per_example_grads, cfg: DpSgdConfig, seed: int) -> list[np.ndarray]:
    """Clip each example to ``clip_norm``, sum, add N(0, (sigma*C)^2), average, SGD step.

    ``per_example_grads`` is either a list of per-example gradients or the
    stacked form returned by ``nn.per_example_backward``.
    """
    if isinstance(per_example_grads, (list, tuple)) and per_example_grads and not isinstance(
        per_example_grads[0], np.ndarray
    ):
        stacked = stack_gradients(per_example_grads)
    else:
        stacked = list(per_example_grads)
    if not stacked or stacked[0].shape[0] == 0:
        raise ValueError("empty batch of per-example gradients")
    _check(params, [g[0] for g in stacked])
    return sgd_step(params, dpsgd_noisy_mean(stacked, cfg, seed), cfg.lr)
