#!/usr/bin/env python3
"""Regenerate the size, storage and operation-count tables.

    python3 scripts/make_tables.py [--seed N] [--suite toy|classic] [--out DIR]

Writes tables.txt and tables.jsonl to DIR (default: results/).
"""

import argparse
import contextlib
import io
from pathlib import Path

from gracybus import cli


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", default="0")
    p.add_argument("--suite", default="toy")
    p.add_argument("--out", default="results")
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for fmt, name in (("table", "tables.txt"), ("json-lines", "tables.jsonl")):
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            cli.main(["tables", "--seed", args.seed, "--suite", args.suite, "--format", fmt])
        (out / name).write_text(buf.getvalue())
        print(f"wrote {out / name}")
    print((out / "tables.txt").read_text())


if __name__ == "__main__":
    main()
