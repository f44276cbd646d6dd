"""Config-driven experiment pipelines, JSONL results and text reports."""

from __future__ import annotations

import configparser
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import (
    AttackConfig,
    infer_batch_property,
    infer_property,
    membership_eval,
    train_batch_property_predictor,
    train_membership_predictor,
    train_property_predictor,
)
from .data import (
    BATCH_RULES,
    ConfigError,
    DomainPair,
    Split,
    load_adult,
    make_property_dataset,
    row_has_property,
    shadow_split,
    split_domains,
)
from .nn import Mlp, MlpSpec
from .seeding import derive_seed, rng_for
from .transfer import TrainConfig, cotrain_mapping, cotrain_parameter, evaluate, fine_tune, train_source

PAIRINGS = {"model": "membership", "mapping": "property", "parameter": "batch-property"}
DEFENSES = ("none", "sgld", "dpsgd", "dropout")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class DatasetSection:
    train_path: str = "data/adult/adult.data"
    test_path: str = "data/adult/adult.test"
    drop_missing: bool = False
    positive_income: str = "<=50K"
    property_attr: str = "sex"
    positive_value: str = "Male"
    batch_rule: str = "any_female"
    batch_size: int = 8


@dataclass
class ModelSection:
    hidden_dims: tuple[int, ...] = (64, 8)


@dataclass
class TransferSection:
    paradigm: str = "mapping"
    epochs: int = 10
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 0.001
    mmd_weight: float = 1.0
    mmd_kernel: str = "rbf"
    mmd_bandwidth: float = 0.0  # 0 selects the median heuristic
    align_layer: int = -1
    shared_init: bool = False
    source_train_rows: int = 0  # 0 keeps every source training row
    finetune_epochs: int = 5


@dataclass
class DefenseSection:
    name: str = "none"
    lr: float = 0.0  # 0 keeps the transfer lr
    sgld_temperature: float = 2.0
    dp_clip_norm: float = 1.0
    dp_noise_multiplier: float = 1.0
    dropout_rate: float = 0.0


@dataclass
class AttackSection:
    type: str = "property"
    hidden_dims: tuple[int, ...] = (64, 8)
    lr: float = 0.001
    max_epochs: int = 100
    patience: int = 10
    val_fraction: float = 0.2
    batch_size: int = 64
    shadow_count: int = 3
    L_prop: int = 256
    L_nonprop: int = 256
    window_epochs: int = 1  # trailing training epochs the online attack observes


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 1
    replicates: int = 5
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    attack: AttackSection = field(default_factory=AttackSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        t, a, d = self.transfer, self.attack, self.defense
        if t.paradigm not in PAIRINGS:
            raise ConfigError(f"unknown paradigm {t.paradigm!r}; expected one of {sorted(PAIRINGS)}")
        if PAIRINGS[t.paradigm] != a.type:
            raise ConfigError(
                f"attack {a.type!r} is incompatible with the {t.paradigm} paradigm (expects {PAIRINGS[t.paradigm]!r})"
            )
        if d.name not in DEFENSES:
            raise ConfigError(f"unknown defense {d.name!r}; expected one of {DEFENSES}")
        if t.epochs < 1:
            raise ConfigError("transfer.epochs must be >= 1")
        if t.mmd_weight < 0:
            raise ConfigError("transfer.mmd_weight must be >= 0")
        if self.dataset.batch_rule not in BATCH_RULES:
            raise ConfigError(f"unknown batch rule {self.dataset.batch_rule!r}")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if not 1 <= a.window_epochs <= t.epochs:
            raise ConfigError("attack.window_epochs must be between 1 and transfer.epochs")

    def to_dict(self) -> dict:
        return asdict(self)

    def semantic_dict(self) -> dict:
        """Everything that changes results, minus the seed/replicate bookkeeping."""
        d = self.to_dict()
        d.pop("seed")
        d.pop("replicates")
        d.pop("name")
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def train_config(self, seed: int) -> TrainConfig:
        t, d = self.transfer, self.defense
        kw = dict(
            epochs=t.epochs,
            batch_size=t.batch_size,
            optimizer=t.optimizer,
            lr=t.lr,
            mmd_weight=t.mmd_weight,
            mmd_kernel=t.mmd_kernel,
            mmd_bandwidth=t.mmd_bandwidth or None,
            align_layer=t.align_layer,
            shared_init=t.shared_init,
            seed=derive_seed(seed, "transfer"),
        )
        if d.name == "sgld":
            kw.update(optimizer="sgld", sgld_temperature=d.sgld_temperature, lr=d.lr or t.lr)
        elif d.name == "dpsgd":
            kw.update(
                optimizer="dpsgd", dp_clip_norm=d.dp_clip_norm, dp_noise_multiplier=d.dp_noise_multiplier, lr=d.lr or t.lr
            )
        elif d.name == "dropout":
            kw.update(dropout_rate=d.dropout_rate)
        return TrainConfig(**kw)

    def attack_config(self, seed: int) -> AttackConfig:
        a = self.attack
        return AttackConfig(
            hidden_dims=tuple(a.hidden_dims),
            lr=a.lr,
            max_epochs=a.max_epochs,
            patience=a.patience,
            val_fraction=a.val_fraction,
            batch_size=a.batch_size,
            seed=derive_seed(seed, "attack"),
        )

    @property
    def defense_label(self) -> str:
        d = self.defense
        return f"dropout-{d.dropout_rate:g}" if d.name == "dropout" else d.name


SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "transfer": TransferSection,
    "defense": DefenseSection,
    "attack": AttackSection,
}
TOP_KEYS = {"name": str, "seed": int, "replicates": int}


def _coerce(raw: str, typ, where: str):
    raw = raw.strip()
    try:
        if typ is bool or typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "1")
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        if typ in ("tuple[int, ...]",):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ}") from exc


def parse_config(text: str) -> ExperimentConfig:
    """Parse the INI-style experiment file; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    top = {}
    sections = {}
    for name in cp.sections():
        if name == "experiment":
            for key, val in cp[name].items():
                if key not in TOP_KEYS:
                    raise ConfigError(f"unknown key experiment.{key}")
                top[key] = _coerce(val, TOP_KEYS[key], f"experiment.{key}")
            continue
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        cls = SECTIONS[name]
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, val in cp[name].items():
            if key not in types:
                raise ConfigError(f"unknown key {name}.{key}")
            kw[key] = _coerce(val, types[key], f"{name}.{key}")
        sections[name] = cls(**kw)
    return ExperimentConfig(**top, **sections)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = ["[experiment]", f"name = {cfg.name}", f"seed = {cfg.seed}", f"replicates = {cfg.replicates}"]
    for name in SECTIONS:
        lines += ["", f"[{name}]"]
        for key, val in asdict(getattr(cfg, name)).items():
            if isinstance(val, (tuple, list)):
                val = ", ".join(map(str, val))
            elif isinstance(val, bool):
                val = str(val).lower()
            elif isinstance(val, float):
                val = repr(val)
            lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


# -- pipelines ---------------------------------------------------------------------


@lru_cache(maxsize=4)
def _raw(train_path: str, test_path: str, drop_missing: bool):
    return load_adult(train_path, test_path, drop_missing=drop_missing)


def build_domains(cfg: ExperimentConfig) -> DomainPair:
    """Domain pair as each paradigm sees it.

    mapping: the property attribute is removed and exposed as ``prop``;
    parameter: the batch rule's attribute is removed;
    model: every attribute stays a feature.
    """
    ds = cfg.dataset
    raw = _raw(ds.train_path, ds.test_path, ds.drop_missing)
    paradigm = cfg.transfer.paradigm
    if paradigm == "parameter":
        return split_domains(raw, drop_attrs=[BATCH_RULES[ds.batch_rule][0]], positive_income=ds.positive_income)
    pair = split_domains(raw, positive_income=ds.positive_income)
    if paradigm == "model":
        return pair

    def prop(split: Split) -> Split:
        return Split(
            make_property_dataset(split.train, ds.property_attr, ds.positive_value),
            make_property_dataset(split.test, ds.property_attr, ds.positive_value),
        )

    return DomainPair(prop(pair.source), prop(pair.target))


def _stage(name: str):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:  # noqa: BLE001 - re-raised with a stage tag
                raise StageError(name, exc) from exc

        return inner

    return wrap


def _run_mapping(cfg: ExperimentConfig, pair: DomainPair, seed: int) -> dict:
    spec = MlpSpec(pair.source.train.n_features, cfg.model.hidden_dims)
    tcfg = cfg.train_config(seed)
    res = _stage("train")(cotrain_mapping)(pair, (spec, spec), tcfg)
    per_epoch = len(res.trace) // tcfg.epochs
    start = res.trace.records[-1].iteration - per_epoch * cfg.attack.window_epochs + 1
    tt = pair.target.train

    @_stage("attack")
    def attack():
        pred = train_property_predictor(
            res.target, tt.X[tt.prop == 1], tt.X[tt.prop == 0], tcfg.align_layer, cfg.attack_config(seed)
        )
        return pred, infer_property(pred, res.trace, start)

    pred, ev = attack()
    final = res.history[-1]
    task = {
        "target_test_auc": final["target_auc"],
        "target_test_acc": final["target_accuracy"],
        "source_test_auc": final["source_auc"],
        "source_test_acc": final["source_accuracy"],
    }
    return {"task": task, "attack": _stage("eval")(ev.metrics)(), "predictor": pred.meta, "history": res.history}


def _run_parameter(cfg: ExperimentConfig, pair: DomainPair, seed: int) -> dict:
    spec = MlpSpec(pair.source.train.n_features, cfg.model.hidden_dims)
    tcfg = cfg.train_config(seed)
    rule = cfg.dataset.batch_rule
    res = _stage("train")(cotrain_parameter)(pair, spec, tcfg, batch_rule=rule)
    trace = res.trace
    per_epoch = (len(trace) - 1) // tcfg.epochs
    start = len(trace) - per_epoch * cfg.attack.window_epochs
    tt = pair.target.train
    has = row_has_property(tt, rule)

    @_stage("attack")
    def attack():
        snapshot = Mlp(res.model.spec, tuple(trace.params_at(start - 1)))
        pred = train_batch_property_predictor(
            snapshot,
            tt.subset(np.flatnonzero(has)),
            tt.subset(np.flatnonzero(~has)),
            cfg.attack.L_prop,
            cfg.attack.L_nonprop,
            cfg.dataset.batch_size,
            cfg.attack_config(seed),
            derive_seed(seed, "bprop/aux"),
        )
        return pred, infer_batch_property(pred, trace, tcfg.lr, int(trace.iterations[start]))

    pred, ev = attack()
    final = res.history[-1]
    task = {
        "target_test_auc": final["target_auc"],
        "target_test_acc": final["target_accuracy"],
        "source_test_auc": final["source_auc"],
        "source_test_acc": final["source_accuracy"],
    }
    return {"task": task, "attack": _stage("eval")(ev.metrics)(), "predictor": pred.meta, "history": res.history}


def _run_model(cfg: ExperimentConfig, pair: DomainPair, seed: int) -> dict:
    """Source training, shadow-model membership attack, then fine-tuning on the target."""
    src_train, src_test = pair.source.train, pair.source.test
    rows = cfg.transfer.source_train_rows or len(src_train)
    rng = rng_for(seed, "membership/rows")
    members = src_train.subset(np.sort(rng.permutation(len(src_train))[:rows]))
    # source test rows are split between the non-member evaluation pool and the shadow pool
    order = rng.permutation(len(src_test))
    n_shadow_pool = min(2 * rows, len(src_test) // 2)
    shadow_pool = src_test.subset(np.sort(order[:n_shadow_pool]))
    nonmembers = src_test.subset(np.sort(order[n_shadow_pool:]))

    spec = MlpSpec(src_train.n_features, cfg.model.hidden_dims)
    tcfg = cfg.train_config(seed)
    model, artifact, history = _stage("train")(train_source)(members, spec, tcfg, test=nonmembers)

    @_stage("attack")
    def attack():
        shadow = shadow_split(shadow_pool, cfg.attack.shadow_count, derive_seed(seed, "shadow"))
        pred = train_membership_predictor(shadow, spec, replace(tcfg, seed=derive_seed(seed, "shadow/train")), cfg.attack_config(seed))
        return pred, membership_eval(pred, artifact.observed(), members, nonmembers, derive_seed(seed, "membership/eval"))

    pred, ev = attack()
    ft_cfg = replace(tcfg, epochs=cfg.transfer.finetune_epochs, seed=derive_seed(seed, "finetune"))
    tuned = _stage("train")(fine_tune)(model, pair.target.train, ft_cfg)
    tr_metrics, te_metrics = evaluate(model, members), evaluate(model, nonmembers)
    target = evaluate(tuned, pair.target.test)
    task = {
        "source_train_acc": tr_metrics["accuracy"],
        "source_test_acc": te_metrics["accuracy"],
        "generalization_gap": tr_metrics["accuracy"] - te_metrics["accuracy"],
        "source_test_auc": te_metrics["auc"],
        "target_test_auc": target["auc"],
        "target_test_acc": target["accuracy"],
    }
    return {"task": task, "attack": _stage("eval")(ev.metrics)(), "predictor": pred.meta, "history": history}


RUNNERS = {"mapping": _run_mapping, "parameter": _run_parameter, "model": _run_model}
REPORT_KEYS = (
    "fingerprint",
    "name",
    "paradigm",
    "attack_type",
    "defense",
    "property",
    "seed",
    "task",
    "attack",
    "predictor",
    "history",
    "wall_clock_s",
    "version",
)


def run_experiment(cfg: ExperimentConfig, seed: int | None = None) -> dict:
    """Run one replicate; the result dict has keys in ``REPORT_KEYS`` order."""
    seed = cfg.seed if seed is None else seed
    t0 = time.perf_counter()
    paradigm = cfg.transfer.paradigm
    pair = _stage("data")(build_domains)(cfg)
    out = RUNNERS[paradigm](cfg, pair, seed)
    prop = cfg.dataset.batch_rule if paradigm == "parameter" else (
        "membership" if paradigm == "model" else f"{cfg.dataset.property_attr}={cfg.dataset.positive_value}"
    )
    record = {
        "fingerprint": cfg.fingerprint(),
        "name": cfg.name,
        "paradigm": paradigm,
        "attack_type": cfg.attack.type,
        "defense": cfg.defense_label,
        "property": prop,
        "seed": seed,
        "task": out["task"],
        "attack": out["attack"],
        "predictor": out["predictor"],
        "history": out["history"],
        "wall_clock_s": round(time.perf_counter() - t0, 3),
        "version": __version__,
    }
    return {k: record[k] for k in REPORT_KEYS}


def replicate_seeds(cfg: ExperimentConfig, seed: int | None = None, replicates: int | None = None) -> list[int]:
    base = cfg.seed if seed is None else seed
    n = cfg.replicates if replicates is None else replicates
    return list(range(base, base + n))


def run_replicates(cfg: ExperimentConfig, seed: int | None = None, replicates: int | None = None) -> list[dict]:
    return [run_experiment(cfg, s) for s in replicate_seeds(cfg, seed, replicates)]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def append_jsonl(records: list[dict], path: str | Path) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(_jsonable(rec), ensure_ascii=False) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def comparable(record: dict) -> dict:
    """A record without wall-clock time, for bitwise reproducibility checks."""
    return {k: v for k, v in record.items() if k != "wall_clock_s"}


# -- reports -----------------------------------------------------------------------

METRIC_COLUMNS = (
    ("task AUC", ("task", "target_test_auc")),
    ("src AUC", ("task", "source_test_auc")),
    ("attack AUC", ("attack", "auc")),
    ("attack acc", ("attack", "accuracy")),
    ("prec+", ("attack", "precision_pos")),
    ("prec-", ("attack", "precision_neg")),
)
GAP = "n/a"
UNDEF = "undef"


def _get(rec: dict, path: tuple[str, ...]):
    cur = rec
    for key in path:
        if not isinstance(cur, dict) or key not in cur:
            return GAP
        cur = cur[key]
    return UNDEF if cur is None else cur


def _cell(values: list) -> str:
    if any(v is GAP for v in values) or not values:
        return GAP
    nums = [v for v in values if v != UNDEF]
    if not nums:
        return UNDEF
    med = float(np.median(nums))
    if len(nums) == 1:
        text = f"{med:.4f}"
    else:
        q1, q3 = np.percentile(nums, [25, 75])
        text = f"{med:.4f} ± {q3 - q1:.4f}"
    if len(nums) < len(values):
        text += f" ({len(values) - len(nums)} undef)"
    return text


def report(records: list[dict], group_by: list[str] | tuple[str, ...] = ("defense", "property")) -> str:
    """Median ± IQR per group across replicates, as an aligned text table."""
    if not records:
        raise ValueError("no records to report")
    groups: dict[tuple, list[dict]] = {}
    for rec in records:
        key = tuple(str(rec.get(k, GAP)) for k in group_by)
        groups.setdefault(key, []).append(rec)
    header = [*group_by, "n", *(name for name, _ in METRIC_COLUMNS)]
    rows = []
    for key, recs in groups.items():
        rows.append([*key, str(len(recs)), *(_cell([_get(r, path) for r in recs]) for _, path in METRIC_COLUMNS)])
    widths = [max(len(h), *(len(r[j]) for r in rows)) for j, h in enumerate(header)]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths))  # noqa: E731
    lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]
    return "\n".join(lines)
