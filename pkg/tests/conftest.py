import numpy as np
import pytest

import fedsim as fs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mlp_net():
    layers = [fs.dense(6, 10), fs.relu(), fs.dense(10, 8), fs.relu(), fs.dense(8, 4)]
    return fs.init_network(layers, fs.InitScheme("he_uniform", 7))


@pytest.fixture
def conv_net():
    layers = [
        fs.conv2d(2, 3, 3, padding=1),
        fs.relu(),
        fs.maxpool2d(2),
        fs.flatten(),
        fs.dense(3 * 2 * 2, 3),
    ]
    return fs.init_network(layers, fs.InitScheme("he_uniform", 3))


def make_federated_data(
    classes=4,
    per_class=60,
    test_per_class=20,
    dim=8,
    spread=0.3,
    clients=4,
    shards_per_client=2,
    seed=0,
    test_mode="matched",
):
    """Small synthetic federation shared by the engine/eval tests."""
    pooled = fs.synthetic_gaussian(classes, per_class + test_per_class, dim, spread, seed)
    block = per_class + test_per_class
    train_idx, test_idx = [], []
    for c in range(classes):
        start = c * block
        train_idx.extend(range(start, start + per_class))
        test_idx.extend(range(start + per_class, start + block))
    train = pooled.subset(np.array(train_idx))
    test = pooled.subset(np.array(test_idx))
    spec = fs.PartitionSpec("shard", clients=clients, shards_per_client=shards_per_client, seed=seed)
    splits = fs.shard_partition(train, spec)
    splits = fs.split_client_test(train, test, splits, test_mode, seed=seed)
    return fs.FederatedData(train, test, splits)


@pytest.fixture
def small_fed_data():
    return make_federated_data()
