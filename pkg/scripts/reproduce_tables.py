"""Run every shipped config, write results/<config>.jsonl, print the tables and criteria lines."""

from __future__ import annotations

import argparse
from pathlib import Path

from tlleak.acceptance import CONFIGS, ROOT, Runs, evaluate_all
from tlleak.runner import append_jsonl, report

TABLES = {
    "mapping property attack": ["mapping_prop_sex", "mapping_prop_race"],
    "parameter batch-property attack": ["parameter_bprop_sex", "parameter_bprop_race"],
    "defenses (mapping, Prop-sex)": [
        "defense_none", "defense_sgld", "defense_dpsgd", "defense_dropout_01", "defense_dropout_05", "defense_dropout_09",
    ],
    "membership attack (model-based)": ["membership_overfit", "membership_generalized"],
}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(ROOT / "results"))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = Runs(CONFIGS)
    for title, names in TABLES.items():
        records = []
        for name in names:
            recs = runs.records(name)
            path = out / f"{name}.jsonl"
            path.unlink(missing_ok=True)
            append_jsonl(recs, path)
            records += recs
        print(f"\n## {title}\n")
        print(report(records, ["name"]))
    print()
    verdicts = evaluate_all(runs)
    return 0 if all(v.ok for v in verdicts) else 1


if __name__ == "__main__":
    raise SystemExit(main())
