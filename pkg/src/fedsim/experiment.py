"""Declarative experiment configs, artifact IO, and the single-run drivers
behind the command-line front end."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .algorithms import get_algorithm
from .datasets import LabeledDataset, load_idx, synthetic_gaussian
from .engine import (
    FederatedData,
    FederationState,
    FLConfig,
    RoundLog,
    init_state,
    run_federation,
    total_rounds,
)
from .evaluation import (
    EvalReport,
    client_models,
    in_out_class_accuracy,
    initial_accuracy,
    personalized_accuracy,
    template_accuracy,
    terminal_lr,
)
from .layers import ShapeError, conv2d, dense, flatten, infer_shapes, maxpool2d, relu
from .network import InitScheme, Network, init_network
from .params import ParamVector
from .partition import PartitionSpec, partition, save_splits, split_client_test

log = logging.getLogger("fedsim")

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration (CLI exit code 2)."""


_DEFAULTS = {
    "seed": 0,
    "dataset": {
        "kind": "synthetic",
        "classes": 10,
        "per_class": 100,
        "test_per_class": 20,
        "dim": 32,
        "spread": 1.0,
        "scale": 1.0,
        # idx mode
        "train_images": None,
        "train_labels": None,
        "test_images": None,
        "test_labels": None,
    },
    "network": {
        "kind": "mlp",
        "hidden": [64],  # mlp
        "channels": [8, 16],  # conv2
        "kernel": 3,
        "padding": 1,
        "pool": 2,
    },
    "partition": {"mode": "shard", "shards_per_client": 2, "beta": 0.5, "test_mode": "matched"},
    "federation": {
        "algorithm": "fedavg",
        "clients": 20,
        "fraction": 0.5,
        "local_epochs": 2,
        "rounds": 32,
        "batch_size": 50,
        "base_lr": 0.1,
        "momentum": 0.9,
        "mu": 0.0,
        "lambda": 0.75,
        "server_share": 0.0,
        "server_update_part": "full",
        "perfedavg_alpha": 0.01,
        "init": "he_uniform",
    },
    "eval": {
        "finetune_epochs": [5],
        "part": "full",
        "lr": None,
        "template": False,
        "in_out": False,
    },
}


def _merge_defaults(defaults: dict, given: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in out:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge_defaults(out[key], value, path + key + ".")
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    """One experiment, fully described: data, partition, network,
    federation, and evaluation settings plus output directory."""

    raw: dict

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        name = d.pop("name", "experiment")
        out = d.pop("out", "runs/" + name)
        merged = _merge_defaults(_DEFAULTS, d)
        merged["name"] = name
        merged["out"] = out
        cfg = cls(merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e

    def __getitem__(self, key: str):
        return self.raw[key]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def out_dir(self) -> Path:
        return Path(self.raw["out"])

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "ExperimentConfig":
        d = copy.deepcopy(self.raw)
        if seed is not None:
            d["seed"] = seed
        if out is not None:
            d["out"] = out
        cfg = ExperimentConfig(d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        fed = self.raw["federation"]
        try:
            get_algorithm(fed["algorithm"])
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if not 0 < fed["fraction"] <= 1:
            raise ConfigError("federation.fraction must be in (0, 1]")
        ds = self.raw["dataset"]
        if ds["kind"] not in ("synthetic", "idx"):
            raise ConfigError(f"unknown dataset kind {ds['kind']!r}")
        part = self.raw["partition"]
        if part["mode"] not in ("shard", "dirichlet", "iid"):
            raise ConfigError(f"unknown partition mode {part['mode']!r}")
        net = self.raw["network"]
        if net["kind"] not in ("mlp", "conv2"):
            raise ConfigError(f"unknown network kind {net['kind']!r}")
        ev = self.raw["eval"]
        if ev["part"] not in ("body", "head", "full"):
            raise ConfigError("eval.part must be body, head, or full")
        if any(t < 0 for t in ev["finetune_epochs"]):
            raise ConfigError("eval.finetune_epochs must be non-negative")
        if ev["in_out"] and part["test_mode"] != "global":
            raise ConfigError("eval.in_out needs partition.test_mode = 'global'")

    # hash covers everything that determines the trained model and splits;
    # eval settings are recorded in reports instead.
    def config_hash(self) -> str:
        payload = {
            k: self.raw[k]
            for k in ("seed", "dataset", "network", "partition", "federation")
        }
        canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def fl_config(self) -> FLConfig:
        fed = self.raw["federation"]
        try:
            return FLConfig(
                clients=fed["clients"],
                fraction=fed["fraction"],
                local_epochs=fed["local_epochs"],
                rounds=fed["rounds"],
                batch_size=fed["batch_size"],
                algorithm=fed["algorithm"],
                base_lr=fed["base_lr"],
                momentum=fed["momentum"],
                mu=fed["mu"],
                lam=fed["lambda"],
                server_share=fed["server_share"],
                server_update_part=fed["server_update_part"],
                perfedavg_alpha=fed["perfedavg_alpha"],
                seed=self.seed,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def eval_lr(self) -> float:
        ev = self.raw["eval"]
        if ev["lr"] is not None:
            return float(ev["lr"])
        return terminal_lr(self.raw["federation"]["base_lr"])


# --- builders ----------------------------------------------------------------


def build_datasets(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    ds = cfg["dataset"]
    if ds["kind"] == "synthetic":
        per_train, per_test = ds["per_class"], ds["test_per_class"]
        pooled = synthetic_gaussian(
            ds["classes"], per_train + per_test, ds["dim"], ds["spread"],
            seed=cfg.seed, scale=ds["scale"],
        )
        block = per_train + per_test
        train_idx, test_idx = [], []
        for c in range(ds["classes"]):
            start = c * block
            train_idx.extend(range(start, start + per_train))
            test_idx.extend(range(start + per_train, start + block))
        return pooled.subset(np.array(train_idx)), pooled.subset(np.array(test_idx))
    paths = [ds.get(k) for k in ("train_images", "train_labels", "test_images", "test_labels")]
    if any(p is None for p in paths):
        raise ConfigError("idx dataset needs train_images/train_labels/test_images/test_labels")
    train = load_idx(paths[0], paths[1])
    test = load_idx(paths[2], paths[3])
    classes = max(train.num_classes, test.num_classes)
    train.num_classes = test.num_classes = classes
    return train, test


def build_splits(cfg: ExperimentConfig, train: LabeledDataset, test: LabeledDataset):
    p = cfg["partition"]
    spec = PartitionSpec(
        mode=p["mode"],
        clients=cfg["federation"]["clients"],
        shards_per_client=p.get("shards_per_client", 0),
        beta=p.get("beta", 0.0),
        seed=cfg.seed,
    )
    splits = partition(train, spec)
    return split_client_test(train, test, splits, p["test_mode"], seed=cfg.seed)


def build_network(cfg: ExperimentConfig, sample_shape: tuple[int, ...], classes: int) -> Network:
    net = cfg["network"]
    layers: list = []
    if net["kind"] == "mlp":
        in_dim = int(np.prod(sample_shape))
        if len(sample_shape) > 1:
            layers.append(flatten())
        prev = in_dim
        for width in net["hidden"]:
            layers += [dense(prev, width), relu()]
            prev = width
        layers.append(dense(prev, classes))
    else:  # conv2
        if len(sample_shape) != 3:
            raise ConfigError("conv2 network needs (C, H, W) samples")
        prev_ch = sample_shape[0]
        for ch in net["channels"]:
            layers += [conv2d(prev_ch, ch, net["kernel"], net["padding"]), relu(), maxpool2d(net["pool"])]
            prev_ch = ch
        layers.append(flatten())
        try:
            shapes = infer_shapes(tuple(layers), sample_shape)
        except ShapeError as e:
            raise ConfigError(str(e)) from e
        layers.append(dense(shapes[-1][0], classes))
    try:
        infer_shapes(tuple(layers), sample_shape)
        scheme = InitScheme(cfg["federation"]["init"], cfg.seed)
        return init_network(layers, scheme)
    except (ShapeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def prepare(cfg: ExperimentConfig) -> tuple[FLConfig, FederatedData, Network]:
    train, test = build_datasets(cfg)
    splits = build_splits(cfg, train, test)
    template = build_network(cfg, train.sample_shape, train.num_classes)
    return cfg.fl_config(), FederatedData(train, test, splits), template


# --- artifact IO --------------------------------------------------------------


def _write_csv(path: Path, header: list[str], rows, config_hash: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash} schema={SCHEMA_VERSION}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_round_csv(path: Path, logs: list[RoundLog], config_hash: str, append: bool = False) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "a" if append and path.exists() else "w"
    with open(path, mode, newline="") as fh:
        if mode == "w":
            fh.write(f"# config_hash={config_hash} schema={SCHEMA_VERSION}\n")
            csv.writer(fh).writerow(["round", "client_ids", "mean_loss", "lr", "wall_time"])
        writer = csv.writer(fh)
        for rl in logs:
            writer.writerow(
                [rl.round, ";".join(map(str, rl.client_ids)),
                 f"{rl.mean_loss:.6f}", f"{rl.lr:g}", f"{rl.wall_time:.4f}"]
            )


def write_eval_report(out_dir: Path, stem: str, report: EvalReport, config_hash: str) -> None:
    rows = [
        [cid, "" if np.isnan(acc) else f"{acc:.6f}"]
        for cid, acc in zip(report.client_ids, report.accuracies)
    ]
    _write_csv(out_dir / f"{stem}.csv", ["client_id", "accuracy"], rows, config_hash)
    summary = {
        "config_hash": config_hash,
        "mean": None if np.isnan(report.mean) else report.mean,
        "std": None if np.isnan(report.std) else report.std,
        "finetune_epochs": report.finetune_epochs,
        "part": report.part,
        "clients": len(report.client_ids),
    }
    (out_dir / f"{stem}.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


def save_checkpoint(out_dir: Path, state: FederationState, cfg: ExperimentConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "checkpoint.pv").write_bytes(state.global_params.to_blob())
    for cid, params in sorted(state.client_params.items()):
        (out_dir / f"client_{cid:04d}.pv").write_bytes(params.to_blob())
    sidecar = {
        "round": state.round,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "algorithm": cfg["federation"]["algorithm"],
        "persistent_clients": sorted(state.client_params),
        "schema": SCHEMA_VERSION,
    }
    (out_dir / "checkpoint.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(out_dir: Path, template: Network) -> tuple[FederationState, dict]:
    sidecar_path = out_dir / "checkpoint.json"
    if not sidecar_path.exists():
        raise ConfigError(f"no checkpoint at {out_dir}")
    sidecar = json.loads(sidecar_path.read_text())
    global_params = ParamVector.from_blob((out_dir / "checkpoint.pv").read_bytes())
    if global_params.bounds != template.params.bounds:
        raise ConfigError("checkpoint topology does not match the configured network")
    state = init_state(template)
    state.global_params = global_params
    state.round = sidecar["round"]
    for cid in sidecar.get("persistent_clients", []):
        state.client_params[cid] = ParamVector.from_blob(
            (out_dir / f"client_{cid:04d}.pv").read_bytes()
        )
    return state, sidecar


# --- drivers -------------------------------------------------------------------


def run_train(
    cfg: ExperimentConfig,
    jobs: int = 1,
    resume: bool = False,
    stop_after: int | None = None,
) -> FederationState:
    fl_cfg, data, template = prepare(cfg)
    out = cfg.out_dir
    state = None
    append = False
    if resume:
        state, sidecar = load_checkpoint(out, template)
        if sidecar["config_hash"] != cfg.config_hash():
            raise ConfigError("checkpoint was produced by a different config")
        append = True
        log.info("resuming from round %d", state.round)
    state, logs = run_federation(
        fl_cfg, data, template, state=state, jobs=jobs, until_round=stop_after
    )
    write_round_csv(out / "rounds.csv", logs, cfg.config_hash(), append=append)
    save_checkpoint(out, state, cfg)
    return state


def run_partition(cfg: ExperimentConfig) -> None:
    train, test = build_datasets(cfg)
    splits = build_splits(cfg, train, test)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    save_splits(splits, out / "splits.json")
    meta = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "mode": cfg["partition"]["mode"],
        "clients": cfg["federation"]["clients"],
        "schema": SCHEMA_VERSION,
    }
    (out / "partition_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    classes = train.num_classes
    rows = []
    for s in splits:
        counts = np.bincount(train.labels[s.train_indices], minlength=classes)
        rows.append([s.client_id, *counts.tolist()])
    _write_csv(
        out / "label_histogram.csv",
        ["client_id", *[f"class_{c}" for c in range(classes)]],
        rows,
        cfg.config_hash(),
    )


def run_eval(cfg: ExperimentConfig, checkpoint_dir: Path | None = None) -> dict[str, EvalReport]:
    fl_cfg, data, template = prepare(cfg)
    ckpt_dir = checkpoint_dir or cfg.out_dir
    state, sidecar = load_checkpoint(ckpt_dir, template)
    chash = sidecar["config_hash"]
    if chash != cfg.config_hash():
        raise ConfigError(
            "checkpoint was trained under a different config "
            f"(hash {chash} vs {cfg.config_hash()})"
        )
    alg = get_algorithm(cfg["federation"]["algorithm"])
    models = client_models(state, template, alg, fl_cfg.clients)
    ev = cfg["eval"]
    out = cfg.out_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    lr = cfg.eval_lr()
    rule = "sequential_head_then_body" if alg.local_rule == "sequential_head_then_body" else "joint"

    reports: dict[str, EvalReport] = {}
    reports["initial"] = initial_accuracy(models, template, data)
    write_eval_report(out, "initial", reports["initial"], chash)
    for tf in ev["finetune_epochs"]:
        rep = personalized_accuracy(
            models, template, data, ev["part"], tf, lr, cfg.seed,
            fl_cfg.batch_size, fl_cfg.momentum, rule,
        )
        key = f"personalized_tf{tf}"
        reports[key] = rep
        write_eval_report(out, key, rep, chash)
    if ev["template"]:
        reports["template"] = template_accuracy(models, template, data)
        write_eval_report(out, "template", reports["template"], chash)
    if ev["in_out"]:
        rep_in, rep_out = in_out_class_accuracy(models, template, data)
        reports["in_class"], reports["out_class"] = rep_in, rep_out
        write_eval_report(out, "in_class", rep_in, chash)
        write_eval_report(out, "out_class", rep_out, chash)
    return reports
