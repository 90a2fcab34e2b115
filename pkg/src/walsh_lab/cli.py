"""Command line entry points for running and validating experiments.

Artifacts: one CSV per result table (header row, RFC 4180 quoting,
17-significant-digit floats, CRLF row endings), a summary.json with
sorted keys, and a manifest recording the canonical config digest, the
effective seed, and library versions.  Identical config and seed give
byte-identical CSV bodies for any --threads value.

Exit codes: 0 on success, 1 when the experiment ran but its verdict
failed (artifacts are still written), 2 for an invalid configuration.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform

import click
import numpy as np
import scipy

from . import __version__
from .config import (
    EXPERIMENT_KINDS,
    ConfigError,
    ExperimentConfig,
    load_config,
    read_seed_override,
    serialize_config,
)
from .experiments import ExperimentResult, run_experiment

__all__ = ["main", "write_outputs"]


def _format_cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _jsonable(value):
    """Plain-JSON copy: numpy scalars unboxed, non-finite floats nulled."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        out = float(value)
        return out if math.isfinite(out) else None
    return value


def _manifest(config: ExperimentConfig) -> dict:
    digest = hashlib.sha256(serialize_config(config.raw).encode("utf-8")).hexdigest()
    return {
        "config_sha256": digest,
        "seed": config.sim.seed,
        "versions": {
            "numpy": np.__version__,
            "python": platform.python_version(),
            "scipy": scipy.__version__,
            "walsh_lab": __version__,
        },
    }


def write_outputs(result: ExperimentResult, config: ExperimentConfig,
                  directory: "str | None" = None) -> list:
    """Write the configured artifact files; returns the paths written.

    The manifest is written unconditionally; tables respect the "csv"
    format flag and the summary the "json" one.
    """
    out_dir = config.output_dir if directory is None else directory
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if "csv" in config.formats:
        for table in result.tables:
            path = os.path.join(out_dir, f"{table.name}.csv")
            with open(path, "w", encoding="utf-8", newline="") as handle:
                writer = csv.writer(handle, lineterminator="\r\n")
                writer.writerow(table.columns)
                for row in table.rows:
                    writer.writerow([_format_cell(cell) for cell in row])
            written.append(path)
    if "json" in config.formats:
        summary = _jsonable(result.summary)
        summary["kind"] = result.kind
        summary["verdict"] = (None if result.verdict is None
                              else "pass" if result.verdict else "fail")
        path = os.path.join(out_dir, "summary.json")
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(summary, handle, indent=2, sort_keys=True)
            handle.write("\n")
        written.append(path)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(_manifest(config), handle, indent=2, sort_keys=True)
        handle.write("\n")
    written.append(path)
    return written


def _load(config_path: str) -> ExperimentConfig:
    return load_config(config_path, seed_override=read_seed_override())


@click.group()
@click.version_option(version=__version__, prog_name="walsh-lab")
def main() -> None:
    """Simulate diffusions on unions of rays and check their limits."""


@main.command("list-kinds")
def list_kinds() -> None:
    """Print the supported experiment kinds, one per line."""
    for kind in EXPERIMENT_KINDS:
        click.echo(kind)


@main.command("validate")
@click.argument("config_path", metavar="CONFIG")
def validate(config_path: str) -> None:
    """Parse and validate a config file without running it."""
    try:
        config = _load(config_path)
    except ConfigError as err:
        click.echo(str(err), err=True)
        raise SystemExit(2)
    click.echo(f"ok: {config.kind} experiment, seed {config.sim.seed}")


@main.command("run")
@click.argument("config_path", metavar="CONFIG")
@click.option("--threads", type=click.IntRange(min=1), default=None,
              help="Cap worker threads; defaults to the available cores.")
def run(config_path: str, threads: "int | None") -> None:
    """Run one experiment and write its artifact files."""
    try:
        config = _load(config_path)
    except ConfigError as err:
        click.echo(str(err), err=True)
        raise SystemExit(2)
    if threads is None:
        threads = os.cpu_count() or 1
    try:
        result = run_experiment(config, threads=threads)
    except (ValueError, RuntimeError) as err:
        click.echo(f"run failed: {err}", err=True)
        raise SystemExit(1)
    for path in write_outputs(result, config):
        click.echo(path)
    if result.verdict is not None:
        click.echo(f"verdict: {'pass' if result.verdict else 'fail'}")
        if not result.verdict:
            raise SystemExit(1)


if __name__ == "__main__":
    main()
