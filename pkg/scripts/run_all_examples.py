#!/usr/bin/env python3
"""Run every shipped config and report the verdicts.

Writes artifacts under --out (default: a fresh temp directory), one
subdirectory per config, and exits nonzero if any run fails.
"""

import argparse
import json
import pathlib
import subprocess
import sys
import tempfile
import time

REPO = pathlib.Path(__file__).resolve().parent.parent


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=pathlib.Path, default=None,
                        help="artifact root (default: temp directory)")
    parser.add_argument("--threads", type=int, default=None)
    args = parser.parse_args()

    out = args.out or pathlib.Path(tempfile.mkdtemp(prefix="walsh-lab-"))
    out.mkdir(parents=True, exist_ok=True)
    configs = sorted((REPO / "configs").glob("*.toml"))
    if not configs:
        print("no configs found", file=sys.stderr)
        return 1

    failures = 0
    for config in configs:
        cmd = [sys.executable, "-m", "walsh_lab.cli", "run", str(config)]
        if args.threads:
            cmd += ["--threads", str(args.threads)]
        started = time.monotonic()
        proc = subprocess.run(cmd, cwd=out, capture_output=True, text=True)
        elapsed = time.monotonic() - started
        verdict = "?"
        summary = out / "artifacts" / config.stem / "summary.json"
        if summary.exists():
            verdict = json.loads(summary.read_text())["verdict"] or "none"
        status = "ok" if proc.returncode == 0 else f"exit {proc.returncode}"
        print(f"{config.stem:24s} {status:8s} verdict={verdict:5s} {elapsed:6.1f}s")
        if proc.returncode != 0:
            failures += 1
            sys.stderr.write(proc.stderr)
    print(f"\nartifacts in {out}")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
