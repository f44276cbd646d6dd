"""Inference attacks run by the target-domain owner against each leakage trace.

* membership via shadow models against a released source model
* property inference on exchanged hidden features (mapping-based)
* batch property inference on shared-parameter updates (parameter-based)
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import LabeledDataset, ShadowSplit
from .metrics import BinaryEval, UndefinedMetric, auc, summarize
from .nn import Mlp, MlpSpec, bce_loss, backward, dumps_mlp, forward, format_array, loads_mlp, mlp_init, parse_array
from .optim import AdamState, adam_step
from .seeding import derive_seed, rng_for
from .transfer import FeatureTrace, ParamTrace, TrainConfig, train_source

DESCRIPTORS = ("prediction-vector", "hidden-feature", "flattened-gradient")


@dataclass(frozen=True)
class AttackConfig:
    hidden_dims: tuple[int, ...] = (16, 8)
    lr: float = 0.001
    max_epochs: int = 100
    patience: int = 10
    val_fraction: float = 0.2
    batch_size: int = 64
    seed: int = 0


@dataclass
class AttackPredictor:
    model: Mlp
    descriptor: str
    mean: np.ndarray
    std: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def width(self) -> int:
        return self.model.spec.input_dim

    def score(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.width:
            raise ValueError(f"{self.descriptor} predictor expects width {self.width}, got {features.shape}")
        return forward(self.model, (features - self.mean) / self.std).probs

    def dumps(self) -> str:
        lines = [f"tlleak-attack 1 {self.descriptor} {self.width}"]
        lines += format_array("mean", self.mean) + format_array("std", self.std)
        return "\n".join(lines) + "\n" + dumps_mlp(self.model)

    @classmethod
    def loads(cls, text: str) -> "AttackPredictor":
        lines = text.splitlines()
        _, _, descriptor, _ = lines[0].split()
        _, mean, pos = parse_array(lines, 1)
        _, std, pos = parse_array(lines, pos)
        return cls(loads_mlp("\n".join(lines[pos:]) + "\n"), descriptor, mean, std)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


@dataclass
class AttackEvalSet:
    scores: np.ndarray
    labels: np.ndarray
    units: np.ndarray  # sample / record identifiers

    def __post_init__(self):
        if len(self.scores) != len(self.labels) or len(self.scores) != len(self.units):
            raise ValueError("scores, labels and units must align")

    def binary(self, threshold: float = 0.5) -> BinaryEval:
        return BinaryEval(self.scores, self.labels, threshold)

    def metrics(self) -> dict:
        return summarize(self.binary())


def fit_attack_model(
    features: np.ndarray,
    labels: np.ndarray,
    cfg: AttackConfig,
    descriptor: str,
) -> AttackPredictor:
    """Adam-trained MLP with early stopping on validation AUC.

    Inputs are standardised with training-split statistics; the predictor
    carries them so callers pass raw features.
    """
    if descriptor not in DESCRIPTORS:
        raise ValueError(f"unknown descriptor {descriptor!r}")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(features) == 0:
        raise ValueError("no attack training examples")
    rng = rng_for(cfg.seed, "attack/split")
    order = rng.permutation(len(features))
    n_val = int(round(cfg.val_fraction * len(features)))
    val, tr = order[:n_val], order[n_val:]
    mean = features[tr].mean(axis=0)
    std = features[tr].std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    Xtr, ytr = (features[tr] - mean) / std, labels[tr]
    Xval, yval = (features[val] - mean) / std, labels[val]
    spec = MlpSpec(features.shape[1], cfg.hidden_dims)
    model = mlp_init(spec, derive_seed(cfg.seed, "attack/init"))
    state = AdamState.zeros_like(model.params, lr=cfg.lr)
    best, best_score, stale, epochs = model, -np.inf, 0, 0
    for epoch in range(cfg.max_epochs):
        perm = rng_for(cfg.seed, "attack/shuffle", epoch).permutation(len(Xtr))
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            acts = forward(model, Xtr[idx])
            _, dprobs = bce_loss(acts.probs, ytr[idx])
            state, new = adam_step(state, model.params, backward(model, acts, dprobs))
            model = model.replace(new)
        epochs = epoch + 1
        score = _val_score(model, Xval, yval) if n_val else -bce_loss(forward(model, Xtr).probs, ytr)[0]
        if score > best_score:
            best, best_score, stale = model, score, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    meta = {
        "epochs": epochs,
        "seed": cfg.seed,
        "n_train": int(len(tr)),
        "n_val": int(n_val),
        "train_accuracy": float(np.mean((forward(best, Xtr).probs >= 0.5) == ytr)),
        "val_accuracy": float(np.mean((forward(best, Xval).probs >= 0.5) == yval)) if n_val else None,
        "val_auc": float(best_score) if n_val and np.isfinite(best_score) else None,
    }
    return AttackPredictor(best, descriptor, mean, std, meta)


def _val_score(model: Mlp, X: np.ndarray, y: np.ndarray) -> float:
    probs = forward(model, X).probs
    try:
        return auc(probs, y)
    except UndefinedMetric:
        return -bce_loss(probs, y)[0]


# -- membership (model-based) -------------------------------------------------


def membership_features(model: Mlp, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Prediction vector (P(y=0), P(y=1)) followed by the class one-hot."""
    p = forward(model, X).probs
    y = np.asarray(y)
    return np.column_stack([1.0 - p, p, y == 0, y == 1]).astype(np.float64)


def shadow_membership_pool(
    shadow: ShadowSplit, spec: MlpSpec, train_cfg: TrainConfig
) -> tuple[np.ndarray, np.ndarray, list[Mlp]]:
    feats, labels, models = [], [], []
    for k in range(len(shadow)):
        tr, out = shadow.datasets(k)
        cfg = _reseed(train_cfg, derive_seed(train_cfg.seed, "shadow", k))
        model, _, _ = train_source(tr, spec, cfg, stage=f"shadow{k}")
        models.append(model)
        feats += [membership_features(model, tr.X, tr.y), membership_features(model, out.X, out.y)]
        labels += [np.ones(len(tr), dtype=np.int64), np.zeros(len(out), dtype=np.int64)]
    return np.vstack(feats), np.concatenate(labels), models


def _reseed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)


def train_membership_predictor(
    shadow: ShadowSplit, spec: MlpSpec, train_cfg: TrainConfig, attack_cfg: AttackConfig
) -> AttackPredictor:
    """Shadow models share the source architecture; their in/out outputs train the attack."""
    if len(shadow.pool) == 0 or len(shadow) == 0:
        raise ValueError("empty shadow pool")
    feats, labels, _ = shadow_membership_pool(shadow, spec, train_cfg)
    return fit_attack_model(feats, labels, attack_cfg, "prediction-vector")


def infer_membership(pred: AttackPredictor, source_model: Mlp, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    if pred.descriptor != "prediction-vector":
        raise ValueError(f"membership inference needs a prediction-vector predictor, got {pred.descriptor}")
    return pred.score(membership_features(source_model, X, y))


def membership_eval(
    pred: AttackPredictor,
    source_model: Mlp,
    members: LabeledDataset,
    nonmembers: LabeledDataset,
    seed: int,
) -> AttackEvalSet:
    """Balanced evaluation: min(|members|, |nonmembers|) rows drawn from each side."""
    n = min(len(members), len(nonmembers))
    rng = rng_for(seed, "membership/eval")
    mi = np.sort(rng.choice(len(members), n, replace=False))
    ni = np.sort(rng.choice(len(nonmembers), n, replace=False))
    s_in = infer_membership(pred, source_model, members.X[mi], members.y[mi])
    s_out = infer_membership(pred, source_model, nonmembers.X[ni], nonmembers.y[ni])
    units = np.concatenate([[f"in:{i}" for i in mi], [f"out:{i}" for i in ni]])
    return AttackEvalSet(
        np.concatenate([s_in, s_out]),
        np.concatenate([np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64)]),
        units,
    )


# -- property (mapping-based) -------------------------------------------------


def train_property_predictor(
    target_model: Mlp,
    aux_prop: np.ndarray,
    aux_nonprop: np.ndarray,
    layer: int,
    attack_cfg: AttackConfig,
) -> AttackPredictor:
    """Hidden features of the attacker's own model on its auxiliary rows, labelled 1/0."""
    n_hidden = len(target_model.spec.hidden_dims)
    if not -n_hidden <= layer < n_hidden:
        raise ValueError(f"layer {layer} out of range for {n_hidden} hidden layers")
    if len(aux_prop) == 0 or len(aux_nonprop) == 0:
        raise ValueError("both auxiliary sets must be non-empty")
    h_prop = forward(target_model, aux_prop).hidden[layer]
    h_non = forward(target_model, aux_nonprop).hidden[layer]
    feats = np.vstack([h_prop, h_non])
    labels = np.concatenate([np.ones(len(h_prop), dtype=np.int64), np.zeros(len(h_non), dtype=np.int64)])
    pred = fit_attack_model(feats, labels, attack_cfg, "hidden-feature")
    pred.meta["layer"] = layer
    return pred


def score_feature_records(pred: AttackPredictor, records) -> list[tuple[int, np.ndarray]]:
    """Attacker-side scoring of observed source hidden batches."""
    return [(r.iteration, pred.score(r.source_hidden)) for r in records]


def infer_property(pred: AttackPredictor, trace: FeatureTrace, at_iteration: int) -> AttackEvalSet:
    """Score every source hidden feature from ``at_iteration`` on, paired with ground truth."""
    records = [r for r in trace.observed() if r.iteration >= at_iteration]
    if not any(r.iteration == at_iteration for r in records):
        raise KeyError(f"iteration {at_iteration} not in trace")
    scored = score_feature_records(pred, records)
    scores, labels, units = [], [], []
    for k, s in scored:
        scores.append(s)
        labels.append(trace.truth[k])
        units += [f"{k}:{j}" for j in range(len(s))]
    return AttackEvalSet(np.concatenate(scores), np.concatenate(labels), np.array(units))


# -- batch property (parameter-based) ----------------------------------------


def batch_gradient_feature(model: Mlp, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Flattened mean BCE gradient of one batch at the given parameters."""
    acts = forward(model, X)
    _, dprobs = bce_loss(acts.probs, y)
    return backward(model, acts, dprobs).flat()


def train_batch_property_predictor(
    shared_model: Mlp,
    aux_prop: LabeledDataset,
    aux_nonprop: LabeledDataset,
    L_prop: int,
    L_nonprop: int,
    B: int,
    attack_cfg: AttackConfig,
    seed: int,
) -> AttackPredictor:
    """Gradients of batches drawn from the property / non-property auxiliary rows."""
    if len(aux_prop) < B or len(aux_nonprop) < B:
        raise ValueError(f"auxiliary sets ({len(aux_prop)}, {len(aux_nonprop)}) smaller than batch size {B}")
    if L_prop < 1 or L_nonprop < 1:
        raise ValueError("L_prop and L_nonprop must be >= 1")
    feats, labels = [], []
    for aux, L, label, stage in ((aux_prop, L_prop, 1, "bprop/prop"), (aux_nonprop, L_nonprop, 0, "bprop/nonprop")):
        rng = rng_for(seed, stage)
        for _ in range(L):
            idx = rng.choice(len(aux), B, replace=False)
            feats.append(batch_gradient_feature(shared_model, aux.X[idx], aux.y[idx]))
            labels.append(label)
    pred = fit_attack_model(np.vstack(feats), np.array(labels), attack_cfg, "flattened-gradient")
    pred.meta.update({"L_prop": L_prop, "L_nonprop": L_nonprop, "B": B})
    return pred


def online_gradients(trace: ParamTrace, lr: float, from_iteration: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """(w_{k-1} - w_k) / lr for every source-tagged record k >= ``from_iteration``."""
    iterations, tags, params = trace.observed()
    if len(tags) < 2:
        raise ValueError("need at least two trace records")
    pos = np.array([i for i in range(1, len(tags)) if tags[i] == "source" and iterations[i] >= from_iteration])
    if len(pos) == 0:
        return np.empty(0, dtype=np.int64), np.empty((0, params.shape[1]))
    return iterations[pos], (params[pos - 1] - params[pos]) / lr


def infer_batch_property(pred: AttackPredictor, trace: ParamTrace, lr: float, from_iteration: int = 1) -> AttackEvalSet:
    ks, grads = online_gradients(trace, lr, from_iteration)
    scores = pred.score(grads) if len(ks) else np.empty(0)
    labels = np.array([trace.truth[int(k)] for k in ks], dtype=np.int64)
    return AttackEvalSet(scores, labels, ks)
