"""Command-line entry points: run sweeps, render tables, run oracle suites."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from .errors import ConfigError
from .experiment import (
    ExperimentConfig,
    desk_preset,
    load_grid,
    paper_preset,
    render_table,
    run_grid,
)
from .validation import SUITES, run_suite

_LIST_FIELDS = {"k2_list", "n_list", "regimes"}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name in _LIST_FIELDS:
            parser.add_argument(flag, dest=f.name, default=None, help="comma-separated list")
        elif f.type in ("bool", bool):
            parser.add_argument(flag, dest=f.name, default=None, choices=["true", "false"])
        else:
            parser.add_argument(flag, dest=f.name, default=None)


def _coerce(name: str, raw: str):
    if name in _LIST_FIELDS:
        parts = [p for p in raw.split(",") if p]
        if name == "regimes":
            return tuple(parts)
        return tuple(int(p) for p in parts)
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    typ = fields[name].type
    if typ in ("bool", bool):
        return raw == "true"
    for caster in (int, float):
        try:
            return caster(raw)
        except ValueError:
            continue
    return raw


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Layer the config: preset, then config file, then individual flags."""
    data: dict = {}
    if args.preset == "desk":
        data = desk_preset().to_dict()
    elif args.preset == "paper":
        if args.dataset_path is None and not (args.config and "dataset_path" in json.load(open(args.config))):
            raise ConfigError("the paper preset needs --dataset-path (a ratings file)")
        data = paper_preset(dataset_path="").to_dict()
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            data.update(json.load(fh))
    for f in dataclasses.fields(ExperimentConfig):
        raw = getattr(args, f.name, None)
        if raw is not None:
            data[f.name] = _coerce(f.name, raw) if isinstance(raw, str) else raw
    if args.seed is not None:
        data["master_seed"] = args.seed
    if args.out is not None:
        data["out_dir"] = args.out
    return ExperimentConfig.from_dict(data)


def _parse_cells(specs: list[str]) -> list[tuple[str, int, int]]:
    cells = []
    for spec in specs:
        parts = spec.split(",")
        if len(parts) != 3:
            raise ConfigError(f"--cell expects regime,K2,N; got {spec!r}")
        cells.append((parts[0], int(parts[1]), int(parts[2])))
    return cells


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="twostage-cltr")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run sweep cells and write grid.csv / table.txt")
    p_run.add_argument("--config", help="JSON config file (flat keys)")
    p_run.add_argument("--preset", choices=["desk", "paper"], default=None)
    p_run.add_argument("--cell", action="append", default=[], help="regime,K2,N (repeatable)")
    p_run.add_argument("--out", help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="master seed")
    _add_config_flags(p_run)

    p_table = sub.add_parser("table", help="render the results table from an output directory")
    p_table.add_argument("--in", dest="in_dir", required=True)

    p_val = sub.add_parser("validate", help="run an oracle suite")
    p_val.add_argument(
        "--suite", action="append", default=[], choices=sorted(SUITES) + ["all"], required=True
    )

    args = parser.parse_args(argv)

    if args.command == "run":
        config = build_config(args)
        cells = _parse_cells(args.cell) if args.cell else None
        grid = run_grid(config, cells=cells)
        print(render_table(grid))
        print(f"results written to {config.out_dir}")
        return 0

    if args.command == "table":
        grid = load_grid(args.in_dir)
        text = render_table(grid)
        print(text)
        with open(os.path.join(args.in_dir, "table.txt"), "w", encoding="utf-8") as fh:
            fh.write(text)
        return 0

    if args.command == "validate":
        names = sorted(SUITES) if "all" in args.suite else args.suite
        ok = True
        for name in names:
            report = run_suite(name)
            print(report)
            ok = ok and report.passed
        return 0 if ok else 1

    return 2


if __name__ == "__main__":
    sys.exit(main())
