"""Grid sweeps over algorithms and FL settings, resumable cell by cell."""

from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .experiment import (
    SCHEMA_VERSION,
    ConfigError,
    ExperimentConfig,
    run_eval,
    run_train,
)

log = logging.getLogger("fedsim")

RESULT_COLUMNS = [
    "config_hash",
    "algorithm",
    "partition_mode",
    "s_or_beta",
    "clients",
    "fraction",
    "local_epochs",
    "rounds",
    "seed",
    "tau_f",
    "part",
    "initial_mean",
    "initial_std",
    "personalized_mean",
    "personalized_std",
]


def _set_dotted(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = d
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"grid key {dotted!r} does not exist in the base config")
        node = node[key]
    if keys[-1] not in node and keys[0] not in ("dataset", "network", "partition", "federation", "eval"):
        raise ConfigError(f"grid key {dotted!r} does not exist in the base config")
    node[keys[-1]] = value


def load_sweep(path) -> dict:
    try:
        sweep = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read sweep config {path}: {e}") from e
    for key in ("base", "grid"):
        if key not in sweep:
            raise ConfigError(f"sweep config needs a {key!r} section")
    sweep.setdefault("seeds", [sweep["base"].get("seed", 0)])
    sweep.setdefault("name", "sweep")
    sweep.setdefault("out", "runs/" + sweep["name"])
    return sweep


def expand_cells(sweep: dict) -> list[ExperimentConfig]:
    """Cartesian product of the grid axes and the seed list."""
    grid = sweep["grid"]
    axes = sorted(grid)
    combos = list(itertools.product(*(grid[a] for a in axes))) or [()]
    cells = []
    out_root = Path(sweep["out"])
    for combo in combos:
        for seed in sweep["seeds"]:
            raw = copy.deepcopy(sweep["base"])
            raw.pop("out", None)
            for axis, value in zip(axes, combo):
                _set_dotted(raw, axis, value)
            raw["seed"] = seed
            cfg = ExperimentConfig.from_dict(raw)
            cfg = cfg.with_overrides(out=str(out_root / "cells" / cfg.config_hash()))
            cells.append(cfg)
    budgets = {
        c["federation"]["rounds"] * c["federation"]["local_epochs"] for c in cells
    }
    if len(budgets) > 1:
        raise ConfigError(
            f"sweep cells disagree on the rounds*local_epochs budget: {sorted(budgets)}"
        )
    return cells


def _cell_summary(cfg: ExperimentConfig) -> dict:
    fed = cfg["federation"]
    part_cfg = cfg["partition"]
    s_or_beta = (
        part_cfg["shards_per_client"] if part_cfg["mode"] == "shard" else part_cfg.get("beta")
    )
    return {
        "config_hash": cfg.config_hash(),
        "algorithm": fed["algorithm"],
        "partition_mode": part_cfg["mode"],
        "s_or_beta": s_or_beta,
        "clients": fed["clients"],
        "fraction": fed["fraction"],
        "local_epochs": fed["local_epochs"],
        "rounds": fed["rounds"],
        "seed": cfg.seed,
        "part": cfg["eval"]["part"],
    }


def run_cell(raw_config: dict, jobs: int = 1) -> dict:
    """Train + evaluate one cell; returns (and persists) its result record.
    Top-level so process pools can pick it up."""
    cfg = ExperimentConfig(raw_config)
    result_path = cfg.out_dir / "result.json"
    if result_path.exists():
        try:
            return json.loads(result_path.read_text())
        except json.JSONDecodeError:
            log.warning("cell %s: corrupt result, rerunning", cfg.config_hash())
    run_train(cfg, jobs=1)
    reports = run_eval(cfg)
    record = _cell_summary(cfg)
    record["initial_mean"] = reports["initial"].mean
    record["initial_std"] = reports["initial"].std
    record["personalized"] = {
        str(tf): {
            "mean": reports[f"personalized_tf{tf}"].mean,
            "std": reports[f"personalized_tf{tf}"].std,
        }
        for tf in cfg["eval"]["finetune_epochs"]
    }
    result_path.write_text(json.dumps(record, indent=2, sort_keys=True))
    return record


def run_sweep(sweep: dict, jobs: int = 1) -> Path:
    """Run every cell (in parallel when jobs > 1) and consolidate one CSV
    row per (cell, finetune-epoch) pair."""
    cells = expand_cells(sweep)
    out_root = Path(sweep["out"])
    out_root.mkdir(parents=True, exist_ok=True)
    raws = [cell.raw for cell in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(run_cell, raws))
    else:
        records = [run_cell(raw) for raw in raws]

    rows = []
    for record in records:
        for tf, stats in sorted(record["personalized"].items(), key=lambda kv: int(kv[0])):
            rows.append(
                [
                    record["config_hash"],
                    record["algorithm"],
                    record["partition_mode"],
                    record["s_or_beta"],
                    record["clients"],
                    record["fraction"],
                    record["local_epochs"],
                    record["rounds"],
                    record["seed"],
                    tf,
                    record["part"],
                    f"{record['initial_mean']:.6f}",
                    f"{record['initial_std']:.6f}",
                    f"{stats['mean']:.6f}",
                    f"{stats['std']:.6f}",
                ]
            )
    results_path = out_root / "results.csv"
    with open(results_path, "w", newline="") as fh:
        fh.write(f"# schema={SCHEMA_VERSION}\n")
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        writer.writerows(rows)
    return results_path
