"""Acceptance criteria over UCI-Adult runs, shared by the test suite and scripts/.

Each ``criterion_*`` returns a :class:`Verdict`; experiment results come from a
:class:`Runs` cache so a config is trained at most once per process.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import load_adult, split_domains
from .metrics import pearson
from .runner import comparable, dump_config, load_config, parse_config, run_experiment, run_replicates

ROOT = Path(__file__).resolve().parents[2]
CONFIGS = ROOT / "configs"


@dataclass
class Verdict:
    number: int
    ok: bool
    checks: list[tuple[str, bool]] = field(default_factory=list)
    seconds: float = 0.0

    def line(self) -> str:
        parts = "; ".join(f"{'ok' if ok else 'MISS'} {text}" for text, ok in self.checks)
        return f"criterion {self.number}: {'PASS' if self.ok else 'FAIL'} ({self.seconds:.1f}s) {parts}"


def _verdict(number: int, checks: list[tuple[str, bool]], seconds: float) -> Verdict:
    return Verdict(number, all(ok for _, ok in checks), checks, seconds)


def _within(x: float, target: float, tol: float) -> bool:
    return abs(x - target) <= tol


class Runs:
    """Runs each shipped config once (all replicates) and remembers records and wall time."""

    def __init__(self, config_dir: Path = CONFIGS, data_dir: Path | None = None):
        self.config_dir = Path(config_dir)
        self.data_dir = data_dir
        self._records: dict[str, list[dict]] = {}
        self._seconds: dict[str, float] = {}

    def config(self, name: str):
        """Load a shipped config with data paths resolved against the repo (or ``data_dir``)."""
        cfg = load_config(self.config_dir / f"{name}.ini")
        ds = cfg.dataset
        if self.data_dir is not None:
            train, test = self.data_dir / "adult.data", self.data_dir / "adult.test"
        else:
            train, test = ROOT / ds.train_path, ROOT / ds.test_path
        return replace(cfg, dataset=replace(ds, train_path=str(train), test_path=str(test)))

    def records(self, name: str) -> list[dict]:
        if name not in self._records:
            t0 = time.perf_counter()
            self._records[name] = run_replicates(self.config(name))
            self._seconds[name] = time.perf_counter() - t0
        return self._records[name]

    def seconds(self, name: str) -> float:
        self.records(name)
        return self._seconds[name]

    def median(self, name: str, section: str, key: str) -> float:
        vals = [r[section][key] for r in self.records(name) if r[section][key] is not None]
        return float(np.median(vals))


def criterion_1(data_dir: Path | None = None) -> Verdict:
    """Pearson correlation of the income label with each property, over the whole source domain."""
    data_dir = Path(data_dir) if data_dir else ROOT / "data" / "adult"
    t0 = time.perf_counter()
    raw = load_adult(data_dir / "adult.data", data_dir / "adult.test", drop_missing=False)
    pair = split_domains(raw)
    tr, te = pair.source.train, pair.source.test
    y = np.concatenate([tr.y, te.y])
    out = {}
    for attr, value in (("sex", "Male"), ("race", "White")):
        out[attr] = pearson(y, np.concatenate([tr.attribute(attr) == value, te.attribute(attr) == value]))
    seconds = time.perf_counter() - t0
    checks = [
        (f"Prop-sex r={out['sex']:.4f} vs -0.2146±0.02", _within(out["sex"], -0.2146, 0.02)),
        (f"Prop-race r={out['race']:.4f} vs -0.0837±0.02", _within(out["race"], -0.0837, 0.02)),
        (f"runtime {seconds:.2f}s < 5s", seconds < 5),
    ]
    return _verdict(1, checks, seconds)


def criterion_2(runs: Runs) -> Verdict:
    name = "mapping_prop_sex"
    task, att = runs.median(name, "task", "target_test_auc"), runs.median(name, "attack", "auc")
    s = runs.seconds(name)
    checks = [
        (f"task AUC {task:.4f} vs 0.8650±0.03", _within(task, 0.8650, 0.03)),
        (f"attack AUC {att:.4f} vs 0.7766±0.06", _within(att, 0.7766, 0.06)),
        (f"runtime {s:.0f}s < 600s", s < 600),
    ]
    return _verdict(2, checks, s)


def criterion_3(runs: Runs) -> Verdict:
    name = "mapping_prop_race"
    att = runs.median(name, "attack", "auc")
    pos, neg = runs.median(name, "attack", "precision_pos"), runs.median(name, "attack", "precision_neg")
    s = runs.seconds(name)
    checks = [
        (f"attack AUC {att:.4f} vs 0.5885±0.05", _within(att, 0.5885, 0.05)),
        (f"precision white {pos:.4f} - non-white {neg:.4f} = {pos - neg:.4f} >= 0.3", pos - neg >= 0.3),
        (f"runtime {s:.0f}s < 600s", s < 600),
    ]
    return _verdict(3, checks, s)


def criterion_4(runs: Runs) -> Verdict:
    bsex, brace = runs.median("parameter_bprop_sex", "attack", "auc"), runs.median("parameter_bprop_race", "attack", "auc")
    msex, mrace = runs.median("mapping_prop_sex", "attack", "auc"), runs.median("mapping_prop_race", "attack", "auc")
    s = runs.seconds("parameter_bprop_sex") + runs.seconds("parameter_bprop_race")
    checks = [
        (f"BProp-sex AUC {bsex:.4f} vs 0.5654±0.05", _within(bsex, 0.5654, 0.05)),
        (f"BProp-race AUC {brace:.4f} vs 0.5545±0.05", _within(brace, 0.5545, 0.05)),
        (f"sex: mapping {msex:.4f} > parameter {bsex:.4f}", msex > bsex),
        (f"race: mapping {mrace:.4f} > parameter {brace:.4f}", mrace > brace),
    ]
    return _verdict(4, checks, s)


def criterion_5(runs: Runs) -> Verdict:
    med = {n: (runs.median(n, "task", "target_test_auc"), runs.median(n, "attack", "auc")) for n in (
        "defense_none", "defense_sgld", "defense_dpsgd", "defense_dropout_09")}
    (t0, a0), (ts, as_), (td, ad), (tq, aq) = (med[n] for n in med)
    s = sum(runs.seconds(n) for n in med)
    checks = [
        (f"SGLD attack drop {a0 - as_:.4f} >= 0.05", a0 - as_ >= 0.05),
        (f"SGLD task change {abs(ts - t0):.4f} <= 0.02", abs(ts - t0) <= 0.02),
        (f"DP-SGD attack {ad:.4f} <= SGLD attack {as_:.4f}", ad <= as_),
        (f"DP-SGD task drop {t0 - td:.4f} >= 0.05", t0 - td >= 0.05),
        (f"Dropout-0.9 task AUC {tq:.4f} in [0.48, 0.58]", 0.48 <= tq <= 0.58),
        (f"Dropout-0.9 attack AUC {aq:.4f} in [0.48, 0.58]", 0.48 <= aq <= 0.58),
    ]
    return _verdict(5, checks, s)


def criterion_6(runs: Runs) -> Verdict:
    go, ao = runs.median("membership_overfit", "task", "generalization_gap"), runs.median("membership_overfit", "attack", "auc")
    gg, ag = (
        runs.median("membership_generalized", "task", "generalization_gap"),
        runs.median("membership_generalized", "attack", "auc"),
    )
    s = runs.seconds("membership_overfit") + runs.seconds("membership_generalized")
    checks = [
        (f"overfit gap {go:.4f} >= 0.08", go >= 0.08),
        (f"overfit attack AUC {ao:.4f} > 0.60", ao > 0.60),
        (f"generalized gap {gg:.4f} <= 0.02", gg <= 0.02),
        (f"generalized attack AUC {ag:.4f} < 0.58", ag < 0.58),
    ]
    return _verdict(6, checks, s)


def criterion_7(runs: Runs) -> Verdict:
    from .selftest import CHECKS

    t0 = time.perf_counter()
    checks = []
    for name, fn in CHECKS.items():
        ok, detail = fn()
        checks.append((f"{name} [{detail}]", ok))
    # bitwise reproducibility from a persisted config and seed
    cfg = runs.config("mapping_prop_sex")
    reloaded = parse_config(dump_config(cfg))
    a = runs.records("mapping_prop_sex")[0]
    b = run_experiment(reloaded, seed=a["seed"])
    checks.append(("experiment reproducible from persisted config+seed", comparable(a) == comparable(b)))
    return _verdict(7, checks, time.perf_counter() - t0)


def evaluate_all(runs: Runs | None = None, out=print) -> list[Verdict]:
    runs = runs or Runs()
    verdicts = [criterion_1(runs.data_dir)] + [fn(runs) for fn in (criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7)]
    for v in verdicts:
        out(v.line())
    return verdicts
