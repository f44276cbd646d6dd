"""Dense feed-forward network with an analytic backward pass.

Everything runs in float64. Parameters are kept as a flat list
``[W0, b0, W1, b1, ...]`` so optimizers can treat a model as a sequence of
arrays; ``W`` has shape (out, in).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

PROB_EPS = 1e-7


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    activation: str = "relu"
    output: str = "sigmoid"
    dropout_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ValueError(f"hidden_dims must be non-empty and positive, got {self.hidden_dims}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.output != "sigmoid":
            raise ValueError(f"unsupported output {self.output!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per affine layer, output layer included."""
        dims = [self.input_dim, *self.hidden_dims, 1]
        return list(zip(dims[:-1], dims[1:]))

    def with_dropout(self, rate: float) -> "MlpSpec":
        return MlpSpec(self.input_dim, self.hidden_dims, self.activation, self.output, rate)


@dataclass(frozen=True)
class Mlp:
    spec: MlpSpec
    params: tuple[np.ndarray, ...]

    def __post_init__(self):
        params = tuple(np.asarray(p, dtype=np.float64) for p in self.params)
        object.__setattr__(self, "params", params)
        expected = []
        for fan_in, fan_out in self.spec.layer_dims:
            expected += [(fan_out, fan_in), (fan_out,)]
        got = [p.shape for p in params]
        if got != expected:
            raise ShapeError(f"parameter shapes {got} do not chain for {self.spec}; expected {expected}")
        if not all(np.all(np.isfinite(p)) for p in params):
            raise ValueError("non-finite parameter value")

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.params[i], self.params[i + 1]) for i in range(0, len(self.params), 2)]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def flat(self) -> np.ndarray:
        return flatten(self.params)

    def replace(self, params: Sequence[np.ndarray]) -> "Mlp":
        return Mlp(self.spec, tuple(params))

    def from_flat(self, vec: np.ndarray) -> "Mlp":
        return self.replace(unflatten(vec, [p.shape for p in self.params]))


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays])


def unflatten(vec: np.ndarray, shapes: Sequence[tuple[int, ...]]) -> list[np.ndarray]:
    out, pos = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(np.array(vec[pos : pos + size], dtype=np.float64).reshape(shape))
        pos += size
    if pos != len(vec):
        raise ShapeError(f"flat vector has {len(vec)} entries, shapes need {pos}")
    return out


def mlp_init(spec: MlpSpec, seed: int) -> Mlp:
    """Glorot-uniform weights, zero biases; deterministic in (spec, seed)."""
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in spec.layer_dims:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        params.append(np.zeros(fan_out))
    return Mlp(spec, tuple(params))


@dataclass
class Activations:
    inputs: np.ndarray
    pre: list[np.ndarray]  # pre-activations, one per affine layer
    hidden: list[np.ndarray]  # post-ReLU (and post-dropout in training) per hidden layer
    masks: list[np.ndarray | None]
    logits: np.ndarray
    probs: np.ndarray
    spec: MlpSpec = field(repr=False)

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]


@dataclass
class Gradients:
    params: tuple[np.ndarray, ...]

    def flat(self) -> np.ndarray:
        return flatten(self.params)


def forward(mlp: Mlp, X: np.ndarray, train_seed: int | None = None) -> Activations:
    """Run a batch through the network.

    ``train_seed=None`` is evaluation mode (no dropout). With a seed, inverted
    dropout is applied after every hidden ReLU using masks drawn from that seed.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != mlp.spec.input_dim:
        raise ShapeError(f"expected input with {mlp.spec.input_dim} columns, got shape {X.shape}")
    rate = mlp.spec.dropout_rate
    rng = np.random.default_rng(train_seed) if train_seed is not None and rate > 0 else None
    pre, hidden, masks = [], [], []
    a = X
    layers = mlp.layers
    for W, b in layers[:-1]:
        z = a @ W.T + b
        a = np.maximum(z, 0.0)
        mask = None
        if rng is not None:
            mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
            a = a * mask
        pre.append(z)
        hidden.append(a)
        masks.append(mask)
    W, b = layers[-1]
    logits = (a @ W.T + b)[:, 0]
    pre.append(logits[:, None])
    probs = np.clip(expit(logits), PROB_EPS, 1.0 - PROB_EPS)
    return Activations(X, pre, hidden, masks, logits, probs, mlp.spec)


def predict_proba(mlp: Mlp, X: np.ndarray) -> np.ndarray:
    return forward(mlp, X).probs


def hidden_features(mlp: Mlp, X: np.ndarray, layer: int = -1) -> np.ndarray:
    return forward(mlp, X).hidden[layer]


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its derivative w.r.t. ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape or probs.ndim != 1:
        raise ShapeError(f"probs {probs.shape} and labels {labels.shape} must be equal-length vectors")
    p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    n = len(p)
    loss = -np.mean(labels * np.log(p) + (1.0 - labels) * np.log1p(-p))
    grad = (-labels / p + (1.0 - labels) / (1.0 - p)) / n
    return float(loss), grad


def _output_delta(acts: Activations, dprobs: np.ndarray) -> np.ndarray:
    dprobs = np.asarray(dprobs, dtype=np.float64)
    if dprobs.shape != acts.probs.shape:
        raise ShapeError(f"dLoss/dProbs has shape {dprobs.shape}, activations have {acts.probs.shape}")
    s = expit(acts.logits)
    inside = (s > PROB_EPS) & (s < 1.0 - PROB_EPS)
    return dprobs * s * (1.0 - s) * inside


def _check_acts(mlp: Mlp, acts: Activations) -> None:
    if acts.spec != mlp.spec or len(acts.hidden) != len(mlp.spec.hidden_dims):
        raise ShapeError("activations were not produced by this network")
    for h, width in zip(acts.hidden, mlp.spec.hidden_dims):
        if h.shape[1] != width:
            raise ShapeError(f"hidden width {h.shape[1]} != {width}")


def backward(
    mlp: Mlp,
    acts: Activations,
    dprobs: np.ndarray,
    hidden_grads: dict[int, np.ndarray] | None = None,
) -> Gradients:
    """Gradients of the loss whose derivative w.r.t. the probabilities is ``dprobs``.

    ``hidden_grads`` adds extra loss gradients w.r.t. hidden outputs (as stored
    in ``acts.hidden``), e.g. from an alignment penalty.
    """
    _check_acts(mlp, acts)
    hidden_grads = _normalise_layer_keys(hidden_grads, len(acts.hidden))
    layers = mlp.layers
    grads: list[np.ndarray] = [None] * len(mlp.params)  # type: ignore[list-item]
    delta = _output_delta(acts, dprobs)[:, None]
    for i in range(len(layers) - 1, -1, -1):
        a_in = acts.inputs if i == 0 else acts.hidden[i - 1]
        W, _ = layers[i]
        grads[2 * i] = delta.T @ a_in
        grads[2 * i + 1] = delta.sum(axis=0)
        if i == 0:
            break
        da = delta @ W
        if i - 1 in hidden_grads:
            da = da + hidden_grads[i - 1]
        mask = acts.masks[i - 1]
        if mask is not None:
            da = da * mask
        delta = da * (acts.pre[i - 1] > 0)
    return Gradients(tuple(grads))


def per_example_backward(
    mlp: Mlp,
    acts: Activations,
    dprobs: np.ndarray,
    hidden_grads: dict[int, np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Per-row gradients, stacked along a leading batch axis.

    Row ``i`` of each returned array is the contribution of example ``i`` to
    the batch gradient; summing over the leading axis reproduces ``backward``.
    """
    _check_acts(mlp, acts)
    hidden_grads = _normalise_layer_keys(hidden_grads, len(acts.hidden))
    layers = mlp.layers
    grads: list[np.ndarray] = [None] * len(mlp.params)  # type: ignore[list-item]
    delta = _output_delta(acts, dprobs)[:, None]
    for i in range(len(layers) - 1, -1, -1):
        a_in = acts.inputs if i == 0 else acts.hidden[i - 1]
        W, _ = layers[i]
        grads[2 * i] = delta[:, :, None] * a_in[:, None, :]
        grads[2 * i + 1] = delta.copy()
        if i == 0:
            break
        da = delta @ W
        if i - 1 in hidden_grads:
            da = da + hidden_grads[i - 1]
        mask = acts.masks[i - 1]
        if mask is not None:
            da = da * mask
        delta = da * (acts.pre[i - 1] > 0)
    return grads


def _normalise_layer_keys(hidden_grads, n_hidden):
    if not hidden_grads:
        return {}
    return {k % n_hidden: np.asarray(v, dtype=np.float64) for k, v in hidden_grads.items()}


def loss_and_grads(
    mlp: Mlp, X: np.ndarray, y: np.ndarray, train_seed: int | None = None
) -> tuple[float, Gradients]:
    acts = forward(mlp, X, train_seed)
    loss, dprobs = bce_loss(acts.probs, y)
    return loss, backward(mlp, acts, dprobs)


def grad_check(
    mlp: Mlp,
    X: np.ndarray,
    y: np.ndarray,
    eps: float = 1e-5,
    train_seed: int | None = None,
    analytic: Gradients | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``analytic`` may be supplied to check an externally computed gradient.
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError(f"eps must be in (0, 1e-3], got {eps}")
    if analytic is None:
        _, analytic = loss_and_grads(mlp, X, y, train_seed)
    theta = mlp.flat()
    g = analytic.flat()
    worst = 0.0
    for j in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[j] += eps
        down[j] -= eps
        l_up = bce_loss(forward(mlp.from_flat(up), X, train_seed).probs, y)[0]
        l_down = bce_loss(forward(mlp.from_flat(down), X, train_seed).probs, y)[0]
        fd = (l_up - l_down) / (2 * eps)
        err = abs(g[j] - fd) / max(abs(g[j]), abs(fd), 1e-12)
        worst = max(worst, err)
    return worst


# -- serialization -----------------------------------------------------------

MODEL_MAGIC = "tlleak-mlp 1"


def _fmt(values: np.ndarray) -> str:
    return " ".join(format(float(v), ".17g") for v in np.ravel(values))


def format_array(name: str, arr: np.ndarray) -> list[str]:
    """Header line ``name dims...`` then one line per row (row-major)."""
    arr = np.asarray(arr, dtype=np.float64)
    lines = [f"{name} {' '.join(str(d) for d in arr.shape)}"]
    rows = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)
    lines += [_fmt(r) for r in rows]
    return lines


def parse_array(lines: list[str], pos: int) -> tuple[str, np.ndarray, int]:
    head = lines[pos].split()
    name, shape = head[0], tuple(int(d) for d in head[1:])
    nrows = shape[0] if len(shape) > 1 else 1
    vals = [float(v) for line in lines[pos + 1 : pos + 1 + nrows] for v in line.split()]
    arr = np.array(vals, dtype=np.float64)
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"array {name}: expected {int(np.prod(shape))} values, got {arr.size}")
    return name, arr.reshape(shape), pos + 1 + nrows


def spec_header(spec: MlpSpec) -> list[str]:
    return [
        f"input_dim {spec.input_dim}",
        f"hidden_dims {' '.join(map(str, spec.hidden_dims))}",
        f"activation {spec.activation}",
        f"output {spec.output}",
        f"dropout_rate {spec.dropout_rate!r}",
    ]


def parse_spec_header(lines: list[str], pos: int) -> tuple[MlpSpec, int]:
    kv = {}
    for line in lines[pos : pos + 5]:
        key, _, val = line.partition(" ")
        kv[key] = val
    spec = MlpSpec(
        input_dim=int(kv["input_dim"]),
        hidden_dims=tuple(int(h) for h in kv["hidden_dims"].split()),
        activation=kv["activation"],
        output=kv["output"],
        dropout_rate=float(kv["dropout_rate"]),
    )
    return spec, pos + 5


def dumps_mlp(mlp: Mlp) -> str:
    lines = [MODEL_MAGIC, *spec_header(mlp.spec)]
    for k, (W, b) in enumerate(mlp.layers):
        lines += format_array(f"W{k}", W)
        lines += format_array(f"b{k}", b)
    return "\n".join(lines) + "\n"


def loads_mlp(text: str) -> Mlp:
    lines = text.splitlines()
    if not lines or lines[0] != MODEL_MAGIC:
        raise ValueError("not a serialized model")
    spec, pos = parse_spec_header(lines, 1)
    params = []
    while pos < len(lines) and lines[pos].strip():
        _, arr, pos = parse_array(lines, pos)
        params.append(arr)
    return Mlp(spec, tuple(params))


def save_mlp(mlp: Mlp, path: str | Path) -> None:
    Path(path).write_text(dumps_mlp(mlp))


def load_mlp(path: str | Path) -> Mlp:
    return loads_mlp(Path(path).read_text())
