"""Model-, mapping- and parameter-based transfer, each emitting its leakage trace.

What crosses the domain boundary is exactly what the trace holds:

* model-based: the final source model (:class:`ModelArtifact`)
* mapping-based: per-iteration hidden features of both domains (:class:`FeatureTrace`)
* parameter-based: the shared parameters after every update (:class:`ParamTrace`)

Ground-truth property labels ride along in ``truth`` fields for the evaluation
harness; attack code only ever reads ``observed()`` views.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import optim
from .data import DomainPair, LabeledDataset, batch_label
from .metrics import UndefinedMetric, accuracy, auc
from .nn import (
    Mlp,
    MlpSpec,
    ShapeError,
    backward,
    bce_loss,
    dumps_mlp,
    forward,
    loads_mlp,
    mlp_init,
    per_example_backward,
    unflatten,
)
from .seeding import derive_seed, rng_for

OPTIMIZERS = ("sgd", "adam", "sgld", "dpsgd")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 0.001
    sgld_temperature: float = 2.0
    dp_clip_norm: float = 1.0
    dp_noise_multiplier: float = 1.0
    dropout_rate: float | None = None  # None keeps the MlpSpec rate
    mmd_weight: float = 1.0
    mmd_kernel: str = "rbf"
    mmd_bandwidth: float | None = None  # None: median heuristic per batch
    align_layer: int = -1
    shared_init: bool = False  # mapping-based: start both models from one init
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.mmd_weight < 0:
            raise ValueError("mmd_weight must be >= 0")
        if self.mmd_kernel not in ("rbf", "linear"):
            raise ValueError(f"unknown MMD kernel {self.mmd_kernel!r}")


class Optimizer:
    """Binds an update rule from a config to one training loop."""

    def __init__(self, cfg: TrainConfig, params: Sequence[np.ndarray]):
        self.cfg = cfg
        self.kind = cfg.optimizer
        self.adam = optim.AdamState.zeros_like(params, lr=cfg.lr) if self.kind == "adam" else None
        if self.kind == "sgld":
            self.sgld = optim.SgldConfig(cfg.lr, cfg.sgld_temperature)
        if self.kind == "dpsgd":
            self.dp = optim.DpSgdConfig(cfg.lr, cfg.dp_clip_norm, cfg.dp_noise_multiplier)

    @property
    def per_example(self) -> bool:
        return self.kind == "dpsgd"

    def step(self, params, grads, seed: int) -> list[np.ndarray]:
        if self.kind == "sgd":
            return optim.sgd_step(params, grads, self.cfg.lr)
        if self.kind == "adam":
            self.adam, new = optim.adam_step(self.adam, params, grads)
            return new
        if self.kind == "sgld":
            return optim.sgld_step(params, grads, self.sgld, seed)
        return optim.dpsgd_step(params, grads, self.dp, seed)


def _with_dropout(spec: MlpSpec, cfg: TrainConfig) -> MlpSpec:
    return spec if cfg.dropout_rate is None else spec.with_dropout(cfg.dropout_rate)


def batch_gradient(mlp: Mlp, acts, y: np.ndarray, per_example: bool, hidden_grads=None):
    """Gradient of mean BCE (+ optional hidden-layer terms) in the form the optimizer wants."""
    loss, dprobs = bce_loss(acts.probs, y)
    if not per_example:
        return loss, backward(mlp, acts, dprobs, hidden_grads)
    n = len(y)
    scaled = None if hidden_grads is None else {k: v * n for k, v in hidden_grads.items()}
    return loss, per_example_backward(mlp, acts, dprobs * n, scaled)


def _step(mlp: Mlp, opt: Optimizer, X, y, stage: str, seed: int, it: int, hidden_grads=None):
    acts = forward(mlp, X, derive_seed(seed, f"{stage}/dropout", it))
    loss, grads = batch_gradient(mlp, acts, y, opt.per_example, hidden_grads)
    new = opt.step(mlp.params, grads, derive_seed(seed, f"{stage}/noise", it))
    return mlp.replace(new), loss


def evaluate(mlp: Mlp, ds: LabeledDataset) -> dict:
    probs = forward(mlp, ds.X).probs
    try:
        a = auc(probs, ds.y)
    except UndefinedMetric:
        a = None
    return {"auc": a, "accuracy": accuracy(probs, ds.y)}


def _epoch_batches(n: int, batch_size: int, seed: int, stage: str, epoch: int) -> list[np.ndarray]:
    order = rng_for(seed, f"{stage}/shuffle", epoch).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train_supervised(
    mlp: Mlp,
    train: LabeledDataset,
    cfg: TrainConfig,
    stage: str = "train",
    test: LabeledDataset | None = None,
) -> tuple[Mlp, list[dict]]:
    """Plain mini-batch training; returns the model and per-epoch metrics."""
    if mlp.spec.input_dim != train.n_features:
        raise ShapeError(f"model expects {mlp.spec.input_dim} features, data has {train.n_features}")
    opt = Optimizer(cfg, mlp.params)
    history = []
    it = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _epoch_batches(len(train), cfg.batch_size, cfg.seed, stage, epoch):
            mlp, loss = _step(mlp, opt, train.X[idx], train.y[idx], stage, cfg.seed, it)
            losses.append(loss)
            it += 1
        row = {"epoch": epoch + 1, "loss": float(np.mean(losses))}
        row.update({f"train_{k}": v for k, v in evaluate(mlp, train).items()})
        if test is not None:
            row.update({f"test_{k}": v for k, v in evaluate(mlp, test).items()})
        history.append(row)
    return mlp, history


# -- model-based -------------------------------------------------------------


@dataclass(frozen=True)
class ModelArtifact:
    model: Mlp

    def observed(self) -> Mlp:
        return self.model

    def dumps(self) -> str:
        return dumps_mlp(self.model)

    @classmethod
    def loads(cls, text: str) -> "ModelArtifact":
        return cls(loads_mlp(text))


def train_source(
    source: LabeledDataset,
    spec: MlpSpec,
    cfg: TrainConfig,
    test: LabeledDataset | None = None,
    stage: str = "source",
) -> tuple[Mlp, ModelArtifact, list[dict]]:
    mlp = mlp_init(_with_dropout(spec, cfg), derive_seed(cfg.seed, f"{stage}/init"))
    mlp, history = train_supervised(mlp, source, cfg, stage, test)
    return mlp, ModelArtifact(mlp), history


def fine_tune(source_model: Mlp, target: LabeledDataset, cfg: TrainConfig, test: LabeledDataset | None = None) -> Mlp:
    if source_model.spec.input_dim != target.n_features:
        raise ShapeError(f"source model expects {source_model.spec.input_dim} features, target has {target.n_features}")
    if cfg.epochs == 0:
        return source_model
    model = Mlp(_with_dropout(source_model.spec, cfg), source_model.params)
    return train_supervised(model, target, cfg, "finetune", test)[0]


# -- mapping-based -----------------------------------------------------------


def median_bandwidth(X: np.ndarray, Y: np.ndarray) -> float:
    Z = np.vstack([X, Y])
    sq = np.sum(Z * Z, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * Z @ Z.T, 0.0)
    iu = np.triu_indices(len(Z), k=1)
    med = float(np.median(np.sqrt(d2[iu]))) if len(iu[0]) else 0.0
    return med if med > 0 else 1.0


def _sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d2 = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2 * A @ B.T
    return np.maximum(d2, 0.0)


def mmd(X: np.ndarray, Y: np.ndarray, kernel: str = "rbf", bandwidth: float | None = 1.0) -> float:
    """Biased (V-statistic) squared MMD between the rows of X and Y."""
    return mmd_and_grads(X, Y, kernel, bandwidth)[0]


def mmd_and_grads(X, Y, kernel: str = "rbf", bandwidth: float | None = 1.0):
    """Squared MMD and its gradients w.r.t. X and Y (bandwidth held fixed)."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ShapeError(f"MMD inputs need equal column counts, got {X.shape} and {Y.shape}")
    n, m = len(X), len(Y)
    if kernel == "linear":
        diff = X.mean(axis=0) - Y.mean(axis=0)
        value = float(np.mean(X @ X.T) + np.mean(Y @ Y.T) - 2 * np.mean(X @ Y.T))
        gx = np.broadcast_to(2 * diff / n, X.shape).copy()
        gy = np.broadcast_to(-2 * diff / m, Y.shape).copy()
        return value, gx, gy
    if kernel != "rbf":
        raise ValueError(f"unknown kernel {kernel!r}")
    s2 = (bandwidth if bandwidth is not None else median_bandwidth(X, Y)) ** 2
    Kxx = np.exp(-_sqdist(X, X) / (2 * s2))
    Kyy = np.exp(-_sqdist(Y, Y) / (2 * s2))
    Kxy = np.exp(-_sqdist(X, Y) / (2 * s2))
    value = float(Kxx.mean() + Kyy.mean() - 2 * Kxy.mean())
    gx = -(2 / (n * n * s2)) * (X * Kxx.sum(1)[:, None] - Kxx @ X)
    gx += (2 / (n * m * s2)) * (X * Kxy.sum(1)[:, None] - Kxy @ Y)
    gy = -(2 / (m * m * s2)) * (Y * Kyy.sum(1)[:, None] - Kyy @ Y)
    gy += (2 / (n * m * s2)) * (Y * Kxy.sum(0)[:, None] - Kxy.T @ X)
    return value, gx, gy


@dataclass
class FeatureRecord:
    iteration: int
    source_hidden: np.ndarray
    target_hidden: np.ndarray


@dataclass
class FeatureTrace:
    width: int
    records: list[FeatureRecord] = field(default_factory=list)
    truth: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def observed(self) -> tuple[FeatureRecord, ...]:
        return tuple(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, k: int, hs: np.ndarray, ht: np.ndarray, truth: np.ndarray | None = None) -> None:
        if hs.shape[1] != self.width or ht.shape[1] != self.width:
            raise ShapeError(f"hidden widths {hs.shape[1]}/{ht.shape[1]} != alignment width {self.width}")
        self.records.append(FeatureRecord(k, hs.copy(), ht.copy()))
        if truth is not None:
            self.truth[k] = np.asarray(truth, dtype=np.int64).copy()


@dataclass
class MappingResult:
    source: Mlp
    target: Mlp
    trace: FeatureTrace
    history: list[dict]


def cotrain_mapping(
    pair: DomainPair,
    specs: tuple[MlpSpec, MlpSpec],
    cfg: TrainConfig,
) -> MappingResult:
    """Joint training: BCE on each domain plus ``mmd_weight`` * MMD at the alignment layer.

    One source and one target batch per iteration; an epoch is one pass over
    the smaller training split.
    """
    src_spec, tgt_spec = (_with_dropout(s, cfg) for s in specs)
    layer = cfg.align_layer
    width_s, width_t = src_spec.hidden_dims[layer], tgt_spec.hidden_dims[layer]
    if width_s != width_t:
        raise ShapeError(f"alignment layer widths differ: {width_s} vs {width_t}")
    src_tr, tgt_tr = pair.source.train, pair.target.train
    src = mlp_init(src_spec, derive_seed(cfg.seed, "mapping/source/init"))
    if cfg.shared_init and src_spec == tgt_spec:
        tgt = Mlp(tgt_spec, src.params)
    else:
        tgt = mlp_init(tgt_spec, derive_seed(cfg.seed, "mapping/target/init"))
    opt_s, opt_t = Optimizer(cfg, src.params), Optimizer(cfg, tgt.params)
    trace = FeatureTrace(width_s)
    history = []
    n_iter = min(len(src_tr), len(tgt_tr)) // cfg.batch_size
    k = 0
    for epoch in range(cfg.epochs):
        order_s = rng_for(cfg.seed, "mapping/source/shuffle", epoch).permutation(len(src_tr))
        order_t = rng_for(cfg.seed, "mapping/target/shuffle", epoch).permutation(len(tgt_tr))
        for i in range(n_iter):
            k += 1
            bs = order_s[i * cfg.batch_size : (i + 1) * cfg.batch_size]
            bt = order_t[i * cfg.batch_size : (i + 1) * cfg.batch_size]
            acts_s = forward(src, src_tr.X[bs], derive_seed(cfg.seed, "mapping/source/dropout", k))
            acts_t = forward(tgt, tgt_tr.X[bt], derive_seed(cfg.seed, "mapping/target/dropout", k))
            hs, ht = acts_s.hidden[layer], acts_t.hidden[layer]
            trace.append(k, hs, ht, None if src_tr.prop is None else src_tr.prop[bs])
            hg_s = hg_t = None
            if cfg.mmd_weight > 0:
                _, gs, gt = mmd_and_grads(hs, ht, cfg.mmd_kernel, cfg.mmd_bandwidth)
                hg_s, hg_t = {layer: cfg.mmd_weight * gs}, {layer: cfg.mmd_weight * gt}
            _, grads_s = batch_gradient(src, acts_s, src_tr.y[bs], opt_s.per_example, hg_s)
            _, grads_t = batch_gradient(tgt, acts_t, tgt_tr.y[bt], opt_t.per_example, hg_t)
            src = src.replace(opt_s.step(src.params, grads_s, derive_seed(cfg.seed, "mapping/source/noise", k)))
            tgt = tgt.replace(opt_t.step(tgt.params, grads_t, derive_seed(cfg.seed, "mapping/target/noise", k)))
        history.append(
            {
                "epoch": epoch + 1,
                "iterations": k,
                **{f"source_{m}": v for m, v in evaluate(src, pair.source.test).items()},
                **{f"target_{m}": v for m, v in evaluate(tgt, pair.target.test).items()},
            }
        )
    return MappingResult(src, tgt, trace, history)


# -- parameter-based ---------------------------------------------------------


@dataclass
class ParamTrace:
    """Shared parameters after every update; record 0 is the initial state."""

    shapes: list[tuple[int, ...]]
    iterations: np.ndarray
    tags: list[str]
    params: np.ndarray  # (records, n_params)
    truth: dict[int, int] = field(default_factory=dict, repr=False)
    replay: dict[int, dict] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.tags)

    def observed(self) -> tuple[np.ndarray, list[str], np.ndarray]:
        return self.iterations, list(self.tags), self.params

    def params_at(self, pos: int) -> list[np.ndarray]:
        return unflatten(self.params[pos], self.shapes)


@dataclass
class ParameterResult:
    model: Mlp
    trace: ParamTrace
    history: list[dict]


def cotrain_parameter(
    pair: DomainPair,
    spec: MlpSpec,
    cfg: TrainConfig,
    batch_rule: str | None = None,
) -> ParameterResult:
    """Strictly alternating source/target updates of one fully shared network.

    ``batch_rule`` names the batch property whose ground truth is attached to
    source-update records (harness side only).
    """
    src_tr, tgt_tr = pair.source.train, pair.target.train
    if src_tr.n_features != tgt_tr.n_features:
        raise ShapeError(f"domains disagree on feature width: {src_tr.n_features} vs {tgt_tr.n_features}")
    spec = _with_dropout(spec, cfg)
    mlp = mlp_init(spec, derive_seed(cfg.seed, "param/init"))
    opt = Optimizer(cfg, mlp.params)
    B = cfg.batch_size
    n_iter = min(len(src_tr), len(tgt_tr)) // B
    n_records = 1 + 2 * n_iter * cfg.epochs
    store = np.empty((n_records, mlp.n_params))
    store[0] = mlp.flat()
    iterations = np.arange(n_records)
    tags = ["init"]
    trace = ParamTrace([p.shape for p in mlp.params], iterations, tags, store)
    history = []
    k = 0
    for epoch in range(cfg.epochs):
        order_s = rng_for(cfg.seed, "param/source/shuffle", epoch).permutation(len(src_tr))
        order_t = rng_for(cfg.seed, "param/target/shuffle", epoch).permutation(len(tgt_tr))
        for i in range(n_iter):
            for tag, ds, order in (("source", src_tr, order_s), ("target", tgt_tr, order_t)):
                k += 1
                idx = order[i * B : (i + 1) * B]
                mask_seed = derive_seed(cfg.seed, f"param/{tag}/dropout", k)
                noise_seed = derive_seed(cfg.seed, f"param/{tag}/noise", k)
                acts = forward(mlp, ds.X[idx], mask_seed)
                _, grads = batch_gradient(mlp, acts, ds.y[idx], opt.per_example)
                mlp = mlp.replace(opt.step(mlp.params, grads, noise_seed))
                store[k] = mlp.flat()
                tags.append(tag)
                if tag == "source":
                    trace.replay[k] = {"batch": idx, "mask_seed": mask_seed, "noise_seed": noise_seed}
                    if batch_rule is not None:
                        trace.truth[k] = batch_label(ds, batch_rule, idx)
        history.append(
            {
                "epoch": epoch + 1,
                "iterations": k,
                **{f"source_{m}": v for m, v in evaluate(mlp, pair.source.test).items()},
                **{f"target_{m}": v for m, v in evaluate(mlp, pair.target.test).items()},
            }
        )
    return ParameterResult(mlp, trace, history)


def replay_source_update(trace: ParamTrace, k: int, spec: MlpSpec, source: LabeledDataset, cfg: TrainConfig) -> np.ndarray:
    """Recompute record ``k`` (a source update) from record ``k-1``.

    Only stateless update rules (sgd, sgld, dpsgd) can be replayed.
    """
    if cfg.optimizer == "adam":
        raise ValueError("Adam updates depend on accumulated moments and cannot be replayed from one record")
    info = trace.replay[k]
    prev = Mlp(_with_dropout(spec, cfg), tuple(trace.params_at(k - 1)))
    opt = Optimizer(cfg, prev.params)
    acts = forward(prev, source.X[info["batch"]], info["mask_seed"])
    _, grads = batch_gradient(prev, acts, source.y[info["batch"]], opt.per_example)
    return prev.replace(opt.step(prev.params, grads, info["noise_seed"])).flat()


# -- trace files ---------------------------------------------------------------


def _fmt(values) -> str:
    return " ".join(format(float(v), ".17g") for v in np.ravel(values))


def write_trace(trace, path: str | Path) -> None:
    """Append-only record file; ground truth goes to a ``.truth`` sidecar."""
    path = Path(path)
    truth_lines = []
    with open(path, "w") as fh:
        if isinstance(trace, ModelArtifact):
            fh.write("tlleak-trace 1 model\n")
            fh.write(trace.dumps())
        elif isinstance(trace, FeatureTrace):
            fh.write(f"tlleak-trace 1 feature {trace.width}\n")
            for r in trace.records:
                fh.write(f"k {r.iteration} {len(r.source_hidden)} {len(r.target_hidden)}\n")
                fh.write(_fmt(r.source_hidden) + "\n" + _fmt(r.target_hidden) + "\n")
            truth_lines = [f"{k} {' '.join(map(str, v))}" for k, v in sorted(trace.truth.items())]
        elif isinstance(trace, ParamTrace):
            shapes = ";".join(",".join(map(str, s)) for s in trace.shapes)
            fh.write(f"tlleak-trace 1 param {shapes}\n")
            for k, tag, row in zip(trace.iterations, trace.tags, trace.params):
                fh.write(f"k {k} {tag} {row.size}\n{_fmt(row)}\n")
            truth_lines = [f"{k} {v}" for k, v in sorted(trace.truth.items())]
        else:
            raise TypeError(f"not a leakage trace: {type(trace).__name__}")
    if truth_lines:
        path.with_name(path.name + ".truth").write_text("\n".join(truth_lines) + "\n")


def read_trace(path: str | Path, with_truth: bool = False):
    path = Path(path)
    lines = path.read_text().splitlines()
    head = lines[0].split()
    if head[:2] != ["tlleak-trace", "1"]:
        raise ValueError(f"{path} is not a trace file")
    kind = head[2]
    if kind == "model":
        return ModelArtifact.loads("\n".join(lines[1:]) + "\n")
    truth_path = path.with_name(path.name + ".truth")
    truth_rows = []
    if with_truth and truth_path.exists():
        truth_rows = [ln.split() for ln in truth_path.read_text().splitlines() if ln.strip()]
    if kind == "feature":
        trace = FeatureTrace(int(head[3]))
        for pos in range(1, len(lines), 3):
            _, k, ns, nt = lines[pos].split()
            hs = np.array(lines[pos + 1].split(), dtype=np.float64).reshape(int(ns), trace.width)
            ht = np.array(lines[pos + 2].split(), dtype=np.float64).reshape(int(nt), trace.width)
            trace.records.append(FeatureRecord(int(k), hs, ht))
        trace.truth = {int(r[0]): np.array(r[1:], dtype=np.int64) for r in truth_rows}
        return trace
    if kind == "param":
        shapes = [tuple(int(d) for d in s.split(",")) for s in head[3].split(";")]
        ks, tags, rows = [], [], []
        for pos in range(1, len(lines), 2):
            _, k, tag, _ = lines[pos].split()
            ks.append(int(k))
            tags.append(tag)
            rows.append(np.array(lines[pos + 1].split(), dtype=np.float64))
        trace = ParamTrace(shapes, np.array(ks), tags, np.vstack(rows))
        trace.truth = {int(r[0]): int(r[1]) for r in truth_rows}
        return trace
    raise ValueError(f"unknown trace kind {kind!r}")
