"""Invariant checks that need no dataset files.

Each check returns ``(ok, detail)``. The CLI ``selftest`` command runs all of
them; the test-suite calls them individually.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .attacks import AttackConfig, fit_attack_model, online_gradients
from .data import DomainPair, Split, synth_gaussian
from .metrics import auc
from .nn import MlpSpec, backward, bce_loss, forward, grad_check, mlp_init, per_example_backward
from .optim import DpSgdConfig, SgldConfig, dpsgd_step, sgd_step, sgld_step
from .transfer import TrainConfig, cotrain_parameter, mmd

Check = Callable[[], tuple[bool, str]]


def pairwise_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """O(n^2) oracle: P(score_pos > score_neg) + 0.5 P(tie)."""
    pos, neg = scores[labels == 1], scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def brute_mmd(X: np.ndarray, Y: np.ndarray, bandwidth: float) -> float:
    """Biased MMD^2 with explicit loops over every pair."""

    def k(a, b):
        return math.exp(-float(np.sum((a - b) ** 2)) / (2 * bandwidth**2))

    xx = sum(k(a, b) for a in X for b in X) / len(X) ** 2
    yy = sum(k(a, b) for a in Y for b in Y) / len(Y) ** 2
    xy = sum(k(a, b) for a in X for b in Y) / (len(X) * len(Y))
    return xx + yy - 2 * xy


def null_auc_bound(n_pos: int, n_neg: int, z: float = 4.0) -> float:
    """z standard deviations of the Mann-Whitney AUC under the null."""
    return z * math.sqrt((n_pos + n_neg + 1) / (12.0 * n_pos * n_neg))


def check_grad(seed: int = 0, n_nets: int = 5) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_nets):
        spec = MlpSpec(int(rng.integers(2, 6)), tuple(int(h) for h in rng.integers(2, 6, size=rng.integers(1, 3))))
        mlp = mlp_init(spec, seed + i)
        X = rng.normal(size=(7, spec.input_dim))
        y = rng.integers(0, 2, size=7)
        worst = max(worst, grad_check(mlp, X, y))
    return worst < 1e-4, f"max relative error {worst:.2e} over {n_nets} nets"


def check_auc(seed: int = 0, n_instances: int = 1000) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(2, 60))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        # coarse scores force ties
        scores = rng.integers(0, 8, size=n) / 8.0 if rng.random() < 0.5 else rng.random(n)
        worst = max(worst, abs(auc(scores, labels) - pairwise_auc(scores, labels)))
    return worst <= 1e-12, f"max |rank - pairwise| {worst:.1e} over {n_instances} instances"


def check_mmd(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(9, 3)), rng.normal(0.5, 1.0, size=(6, 3))
    self_gap = mmd(X, X, "rbf", 1.3)
    brute_gap = abs(mmd(X, Y, "rbf", 1.3) - brute_mmd(X, Y, 1.3))
    ok = self_gap <= 1e-12 and brute_gap <= 1e-12
    return ok, f"MMD(X,X)={self_gap:.1e}, |vectorized - brute|={brute_gap:.1e}"


def _toy_params(seed: int):
    mlp = mlp_init(MlpSpec(4, (5, 3)), seed)
    rng = np.random.default_rng(seed + 1)
    X, y = rng.normal(size=(6, 4)), rng.integers(0, 2, size=6)
    return mlp, X, y


def check_sgld_zero(seed: int = 0) -> tuple[bool, str]:
    mlp, X, y = _toy_params(seed)
    acts = forward(mlp, X)
    grads = backward(mlp, acts, bce_loss(acts.probs, y)[1])
    a = sgd_step(mlp.params, grads, 0.05)
    b = sgld_step(mlp.params, grads, SgldConfig(0.05, temperature=0.0), seed=123)
    same = all(np.array_equal(p, q) for p, q in zip(a, b))
    return same, "SGLD(T=0) bitwise equal to SGD" if same else "SGLD(T=0) differs from SGD"


def check_dpsgd_zero(seed: int = 0) -> tuple[bool, str]:
    mlp, X, y = _toy_params(seed)
    acts = forward(mlp, X)
    dprobs = bce_loss(acts.probs, y)[1]
    stacked = per_example_backward(mlp, acts, dprobs * len(X))
    mean = [g.sum(axis=0) / len(X) for g in stacked]
    a = sgd_step(mlp.params, mean, 0.05)
    b = dpsgd_step(mlp.params, stacked, DpSgdConfig(0.05, clip_norm=1e6, noise_multiplier=0.0), seed=7)
    same = all(np.array_equal(p, q) for p, q in zip(a, b))
    return same, "DP-SGD(sigma=0, no clipping) bitwise equal to mean-gradient SGD" if same else "DP-SGD differs"


def toy_pair(seed: int = 0, n: int = 96, d: int = 5) -> DomainPair:
    def split(s):
        return Split(synth_gaussian(n, d, 2.0, s), synth_gaussian(n // 2, d, 2.0, s + 100))

    return DomainPair(split(seed), split(seed + 1))


def check_online_gradient(seed: int = 0) -> tuple[bool, str]:
    pair = toy_pair(seed)
    lr = 0.01
    cfg = TrainConfig(epochs=1, batch_size=8, optimizer="sgd", lr=lr, seed=seed)
    spec = MlpSpec(pair.source.train.n_features, (6, 3))
    res = cotrain_parameter(pair, spec, cfg)
    ks, g_online = online_gradients(res.trace, lr)
    worst = 0.0
    for k, g in zip(ks, g_online):
        prev = res.model.from_flat(res.trace.params[k - 1])
        idx = res.trace.replay[int(k)]["batch"]
        acts = forward(prev, pair.source.train.X[idx])
        true = backward(prev, acts, bce_loss(acts.probs, pair.source.train.y[idx])[1]).flat()
        worst = max(worst, float(np.max(np.abs(g - true))))
    return worst < 1e-9, f"max |g_online - g_true| {worst:.1e} over {len(ks)} source updates"


def check_null_auc(seed: int = 0, n_shuffles: int = 200) -> tuple[bool, str]:
    """Permutation null: shuffling eval labels must erase a real signal."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(600, 4))
    y = (X[:, 0] + rng.normal(0, 1.0, 600) > 0).astype(np.int64)
    pred = fit_attack_model(X[:400], y[:400], AttackConfig(hidden_dims=(8,), max_epochs=20, seed=seed), "hidden-feature")
    scores, labels = pred.score(X[400:]), y[400:]
    real = auc(scores, labels)
    null = np.array([auc(scores, rng.permutation(labels)) for _ in range(n_shuffles)])
    sigma = null_auc_bound(int(labels.sum()), int(len(labels) - labels.sum()), z=1.0)
    inside = float(np.mean(np.abs(null - 0.5) <= 3 * sigma))
    mean_ok = abs(null.mean() - 0.5) <= 3 * sigma / math.sqrt(n_shuffles)
    ok = mean_ok and inside >= 0.97 and real > 0.5 + 3 * sigma
    return ok, f"real AUC {real:.3f}; shuffled mean {null.mean():.4f}, {inside:.1%} within 0.5 ± 3σ (σ={sigma:.4f})"


def check_reproducible(seed: int = 0) -> tuple[bool, str]:
    pair = toy_pair(seed)
    cfg = TrainConfig(epochs=1, batch_size=8, optimizer="sgld", lr=0.01, sgld_temperature=1e-3, seed=seed)
    spec = MlpSpec(pair.source.train.n_features, (6, 3))
    a = cotrain_parameter(pair, spec, cfg)
    b = cotrain_parameter(pair, spec, cfg)
    same = np.array_equal(a.trace.params, b.trace.params)
    return same, "two seeded runs produced identical traces" if same else "traces differ between runs"


CHECKS: dict[str, Check] = {
    "gradient check": check_grad,
    "AUC rank formula vs pairwise": check_auc,
    "MMD self-distance and brute force": check_mmd,
    "SGLD(T=0) == SGD": check_sgld_zero,
    "DP-SGD(sigma=0) == SGD": check_dpsgd_zero,
    "g_online recovery": check_online_gradient,
    "label-shuffle null AUC": check_null_auc,
    "seeded reproducibility": check_reproducible,
}


def run_all(out=print) -> bool:
    ok_all = True
    for name, check in CHECKS.items():
        ok, detail = check()
        ok_all &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok_all
