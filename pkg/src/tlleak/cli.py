"""Command-line entry point: ``tlleak {prepare-data,run,report,selftest}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import AdultParseError, ConfigError, load_adult, save_dataset, split_domains
from .runner import StageError, append_jsonl, load_config, read_jsonl, report, run_experiment, replicate_seeds

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _prepare(args) -> int:
    raw = load_adult(args.train, args.test, drop_missing=not args.keep_missing)
    pair = split_domains(raw, positive_income=args.positive_income)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for domain, split in (("source", pair.source), ("target", pair.target)):
        for part, ds in (("train", split.train), ("test", split.test)):
            save_dataset(ds, out / f"{domain}_{part}.txt")
            counts[f"{domain}_{part}"] = len(ds)
    (out / "counts.json").write_text(json.dumps({**counts, "dropped_rows": raw.n_dropped}, indent=1) + "\n")
    print(json.dumps(counts))
    return EXIT_OK


def _run(args) -> int:
    cfg = load_config(args.config)
    for seed in replicate_seeds(cfg, args.seed, args.replicates):
        rec = run_experiment(cfg, seed)
        append_jsonl([rec], args.out)
        print(f"seed {seed}: task AUC {rec['task']['target_test_auc']:.4f}  attack AUC {rec['attack']['auc']}")
    return EXIT_OK


def _report(args) -> int:
    records = read_jsonl(args.results)
    if not records:
        raise ConfigError(f"{args.results} holds no records")
    print(report(records, [k.strip() for k in args.group_by.split(",") if k.strip()]))
    return EXIT_OK


def _selftest(args) -> int:
    from .selftest import run_all

    return EXIT_OK if run_all() else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tlleak", description="Privacy leakage experiments for transfer learning.")
    sub = p.add_subparsers(dest="command", required=True)

    prep = sub.add_parser("prepare-data", help="split UCI-Adult into source/target train/test files")
    prep.add_argument("train")
    prep.add_argument("test")
    prep.add_argument("--out", required=True)
    prep.add_argument("--keep-missing", action="store_true", help="keep rows with '?' fields as their own category")
    prep.add_argument("--positive-income", default="<=50K")
    prep.set_defaults(fn=_prepare)

    run = sub.add_parser("run", help="run an experiment config, appending one JSON line per replicate")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--replicates", type=int)
    run.add_argument("--out", required=True)
    run.set_defaults(fn=_run)

    rep = sub.add_parser("report", help="median ± IQR table over replicate records")
    rep.add_argument("results")
    rep.add_argument("--group-by", default="defense,property")
    rep.set_defaults(fn=_report)

    st = sub.add_parser("selftest", help="run the dataset-free invariant checks")
    st.set_defaults(fn=_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AdultParseError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, ConfigError):
            return EXIT_CONFIG
        if exc.stage == "data" or isinstance(exc.cause, (AdultParseError, FileNotFoundError)):
            return EXIT_DATA
        return EXIT_RUNTIME
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
