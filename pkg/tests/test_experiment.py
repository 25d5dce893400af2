"""Config loading, defaulting, hashing, and the dataset/network builders."""

import json

import numpy as np
import pytest

import fedsim as fs
from fedsim.experiment import (
    ConfigError,
    ExperimentConfig,
    build_datasets,
    build_network,
    build_splits,
    prepare,
)


def minimal(**over):
    d = {"name": "m", "out": "runs/m"}
    d.update(over)
    return ExperimentConfig.from_dict(d)


def test_defaults_fill_in():
    cfg = minimal()
    assert cfg["federation"]["batch_size"] == 50
    assert cfg["federation"]["base_lr"] == 0.1
    assert cfg["federation"]["momentum"] == 0.9
    assert cfg["federation"]["lambda"] == 0.75
    assert cfg["eval"]["part"] == "full"
    assert cfg["dataset"]["kind"] == "synthetic"


def test_partial_overrides_merge():
    cfg = minimal(federation={"algorithm": "fedbabu", "rounds": 4})
    assert cfg["federation"]["algorithm"] == "fedbabu"
    assert cfg["federation"]["rounds"] == 4
    assert cfg["federation"]["batch_size"] == 50  # untouched default


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        minimal(federation={"alg": "fedavg"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"nonsense": 1})


def test_hash_ignores_name_out_and_eval():
    a = minimal()
    b = ExperimentConfig.from_dict(
        {"name": "other", "out": "elsewhere", "eval": {"finetune_epochs": [1, 2, 3]}}
    )
    assert a.config_hash() == b.config_hash()
    c = minimal(federation={"rounds": 99})
    assert c.config_hash() != a.config_hash()


def test_hash_stable_across_loads(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"name": "x", "seed": 3, "federation": {"algorithm": "ditto"}}))
    h1 = ExperimentConfig.load(p).config_hash()
    h2 = ExperimentConfig.load(p).config_hash()
    assert h1 == h2 and len(h1) == 16


def test_synthetic_train_test_share_class_means():
    cfg = minimal(dataset={"per_class": 300, "test_per_class": 100, "spread": 0.3, "dim": 16, "classes": 5})
    train, test = build_datasets(cfg)
    assert train.num_classes == test.num_classes == 5
    for c in range(5):
        mu_train = train.samples[train.labels == c].mean(axis=0)
        mu_test = test.samples[test.labels == c].mean(axis=0)
        assert np.linalg.norm(mu_train - mu_test) < 0.3  # same underlying mean


def test_mlp_builder_flattens_images():
    cfg = minimal(network={"kind": "mlp", "hidden": [8]})
    net = build_network(cfg, (1, 6, 6), 4)
    assert net.layers[0].kind == "flatten"
    assert net.layers[1].fan_in == 36
    assert net.layers[-1].fan_out == 4


def test_conv2_builder_computes_flatten_dim():
    cfg = minimal(network={"kind": "conv2", "channels": [4, 8], "kernel": 3, "padding": 1, "pool": 2})
    net = build_network(cfg, (1, 8, 8), 5)
    x = np.zeros((2, 1, 8, 8), dtype=np.float32)
    logits, _ = fs.forward(net, x)
    assert logits.shape == (2, 5)


def test_conv2_on_flat_samples_rejected():
    cfg = minimal(network={"kind": "conv2"})
    with pytest.raises(ConfigError):
        build_network(cfg, (32,), 10)


def test_idx_config_missing_paths():
    with pytest.raises(ConfigError):
        build_datasets(minimal(dataset={"kind": "idx"}))


def test_in_out_requires_global_test_mode():
    with pytest.raises(ConfigError):
        minimal(eval={"in_out": True})
    minimal(eval={"in_out": True}, partition={"test_mode": "global"})  # ok


def test_prepare_produces_consistent_bundle():
    cfg = minimal(
        dataset={"classes": 4, "per_class": 40, "test_per_class": 10, "dim": 8, "spread": 0.4},
        federation={"clients": 4, "rounds": 2, "local_epochs": 1, "batch_size": 10, "fraction": 1.0},
    )
    fl_cfg, data, template = prepare(cfg)
    assert fl_cfg.clients == len(data.splits) == 4
    assert template.num_classes == 4
    state, logs = fs.run_federation(fl_cfg, data, template)
    assert len(logs) == 2


def test_splits_respect_partition_seed():
    cfg_a = minimal(seed=1, dataset={"classes": 4, "per_class": 40, "test_per_class": 10, "dim": 8},
                    federation={"clients": 4})
    cfg_b = minimal(seed=2, dataset={"classes": 4, "per_class": 40, "test_per_class": 10, "dim": 8},
                    federation={"clients": 4})
    train_a, test_a = build_datasets(cfg_a)
    train_b, test_b = build_datasets(cfg_b)
    sa = build_splits(cfg_a, train_a, test_a)
    sb = build_splits(cfg_b, train_b, test_b)
    assert not all(np.array_equal(x.train_indices, y.train_indices) for x, y in zip(sa, sb))
