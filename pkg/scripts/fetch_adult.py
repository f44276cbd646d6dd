"""Fetch the UCI-Adult files into data/adult/.

Tries the UCI archive first; falls back to the copy bundled in the
``responsibly`` wheel (fetched with pip, no install).
"""

from __future__ import annotations

import argparse
import hashlib
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

UCI = "https://archive.ics.uci.edu/ml/machine-learning-databases/adult/"
FILES = ("adult.data", "adult.test", "adult.names")
MD5 = {"adult.data": "5d7c39d7b8804f071cdd1f2a7c460872", "adult.test": "35238206dfdf7f1fe215bbb874adecdc"}
WHEEL = ("responsibly==0.1.2", "responsibly/dataset/adult/")


def md5(path: Path) -> str:
    return hashlib.md5(path.read_bytes()).hexdigest()


def from_uci(out: Path) -> None:
    for name in FILES:
        with urllib.request.urlopen(UCI + name, timeout=30) as resp:
            (out / name).write_bytes(resp.read())


def from_wheel(out: Path) -> None:
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary=:all:", WHEEL[0], "-d", tmp],
            check=True,
            capture_output=True,
        )
        (whl,) = Path(tmp).glob("*.whl")
        with zipfile.ZipFile(whl) as zf:
            for name in FILES:
                (out / name).write_bytes(zf.read(WHEEL[1] + name))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "adult"))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for source in (from_uci, from_wheel):
        try:
            source(out)
        except Exception as exc:  # noqa: BLE001 - try the next source
            print(f"{source.__name__} failed: {exc}", file=sys.stderr)
            continue
        bad = [n for n, h in MD5.items() if md5(out / n) != h]
        if not bad:
            print(f"wrote {', '.join(FILES)} to {out} via {source.__name__}")
            return 0
        print(f"{source.__name__}: checksum mismatch for {bad}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
