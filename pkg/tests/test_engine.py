"""Round-loop mechanics: sampling, aggregation algebra, masked local updates,
determinism, budget invariance, and the server data-sharing path."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import fedsim as fs
from fedsim.engine import (
    FederationError,
    NumericError,
    client_schedule,
    iterations_per_epoch,
    stream,
    total_rounds,
)
from fedsim.params import ParamMask, ParamVector
from tests.conftest import make_federated_data


def vec(values, bounds=None):
    data = np.asarray(values, dtype=np.float32)
    return ParamVector(data, bounds or ((0, len(data)),))


def small_net(seed=0, dim=8, classes=4):
    return fs.init_network(
        [fs.dense(dim, 12), fs.relu(), fs.dense(12, classes)],
        fs.InitScheme("he_uniform", seed),
    )


# --- sampling -----------------------------------------------------------------


def test_sample_counts():
    rng = stream(0, 0, 1)
    ids = fs.sample_clients(100, 0.1, rng)
    assert len(ids) == 10 and len(set(ids)) == 10
    assert fs.sample_clients(100, 1.0, stream(0, 0, 2)) == list(range(100))
    assert len(fs.sample_clients(10, 0.05, stream(0, 0, 3))) == 1


def test_sample_rejects_bad_fraction():
    with pytest.raises(ValueError):
        fs.sample_clients(10, 0.0, stream(0, 0, 1))
    with pytest.raises(ValueError):
        fs.sample_clients(10, 1.5, stream(0, 0, 1))


# --- aggregation ----------------------------------------------------------------


def brute_force_aggregate(updates, theta_prev, mask):
    """Per-scalar oracle with explicit ascending-order summation."""
    out = theta_prev.copy()
    total = sum(n for _, n in updates)
    for seg in range(theta_prev.n_segments):
        if not mask.include[seg]:
            continue
        start, end = theta_prev.bounds[seg]
        for j in range(start, end):
            acc = 0.0
            for theta, n in updates:
                acc += (n / total) * float(theta.data[j])
            out.data[j] = np.float32(acc)
    return out


def test_aggregate_equal_weights():
    a, b = vec([1.0, 3.0]), vec([3.0, 5.0])
    prev = vec([0.0, 0.0])
    out = fs.aggregate([(a, 10), (b, 10)], prev, ParamMask.full(1))
    np.testing.assert_array_equal(out.data, np.float32([2.0, 4.0]))


def test_aggregate_weighted_mean():
    out = fs.aggregate([(vec([0.0]), 100), (vec([4.0]), 300)], vec([9.0]), ParamMask.full(1))
    assert out.data[0] == pytest.approx(3.0)


def test_aggregate_masked_out_bit_copied():
    bounds = ((0, 2), (2, 4))
    prev = vec([7.0, 8.0, 9.0, 10.0], bounds)
    a = vec([1.0, 1.0, 1.0, 1.0], bounds)
    b = vec([3.0, 3.0, 3.0, 3.0], bounds)
    out = fs.aggregate([(a, 1), (b, 1)], prev, ParamMask((True, False)))
    assert out.segment(1).tobytes() == prev.segment(1).tobytes()
    np.testing.assert_array_equal(out.segment(0), np.float32([2.0, 2.0]))


@given(st.integers(min_value=1, max_value=5), st.integers(min_value=0, max_value=10_000))
@settings(max_examples=30, deadline=None)
def test_aggregate_matches_brute_force(n_clients, seed):
    rng = np.random.default_rng(seed)
    bounds = ((0, 3), (3, 8), (8, 9))
    updates = [
        (ParamVector(rng.normal(size=9).astype(np.float32), bounds), int(rng.integers(1, 500)))
        for _ in range(n_clients)
    ]
    prev = ParamVector(rng.normal(size=9).astype(np.float32), bounds)
    mask = ParamMask(tuple(bool(b) for b in rng.integers(0, 2, size=3))) if n_clients > 1 else ParamMask.full(3)
    out = fs.aggregate(updates, prev, mask)
    ref = brute_force_aggregate(updates, prev, mask)
    np.testing.assert_allclose(out.data, ref.data, atol=1e-6)
    for seg in range(3):
        if not mask.include[seg]:
            assert out.segment(seg).tobytes() == prev.segment(seg).tobytes()


@given(st.integers(min_value=2, max_value=6), st.integers(min_value=0, max_value=10_000))
@settings(max_examples=30, deadline=None)
def test_aggregate_is_convex_combination(n_clients, seed):
    rng = np.random.default_rng(seed)
    updates = [
        (ParamVector(rng.normal(size=6).astype(np.float32), ((0, 6),)), int(rng.integers(1, 100)))
        for _ in range(n_clients)
    ]
    out = fs.aggregate(updates, updates[0][0].copy(), ParamMask.full(1))
    stacked = np.stack([u.data for u, _ in updates])
    assert np.all(out.data >= stacked.min(axis=0) - 1e-5)
    assert np.all(out.data <= stacked.max(axis=0) + 1e-5)


def test_aggregate_rejects_empty_and_zero_weight():
    with pytest.raises(FederationError):
        fs.aggregate([], vec([1.0]), ParamMask.full(1))
    with pytest.raises(FederationError):
        fs.aggregate([(vec([1.0]), 0)], vec([1.0]), ParamMask.full(1))


# --- local updates ----------------------------------------------------------------


def lr_const(value):
    return lambda u: value


def test_local_update_zero_epochs_returns_start(small_fed_data):
    net = small_net()
    alg = fs.get_algorithm("fedavg")
    out, loss = fs.local_update(
        small_fed_data.client_train(0), net.params, net, alg, 0, 10, 0.9,
        lr_const(0.1), stream(0, 1, 1, 0),
    )
    assert out.data.tobytes() == net.params.data.tobytes()
    assert np.isnan(loss)


def test_fedbabu_local_update_freezes_head(small_fed_data):
    net = small_net()
    alg = fs.get_algorithm("fedbabu")
    out, _ = fs.local_update(
        small_fed_data.client_train(1), net.params, net, alg, 3, 10, 0.9,
        lr_const(0.1), stream(0, 1, 1, 1),
    )
    head = net.head_segment
    assert out.segment(head).tobytes() == net.params.segment(head).tobytes()
    assert not np.array_equal(out.segment(0), net.params.segment(0))


def test_fedprox_mu_zero_equals_fedavg(small_fed_data):
    net = small_net()
    kw = dict(local_epochs=2, batch_size=10, momentum=0.9)
    a, _ = fs.local_update(
        small_fed_data.client_train(2), net.params, net, fs.get_algorithm("fedprox"),
        kw["local_epochs"], kw["batch_size"], kw["momentum"],
        lr_const(0.1), stream(0, 1, 1, 2), mu=0.0,
    )
    b, _ = fs.local_update(
        small_fed_data.client_train(2), net.params, net, fs.get_algorithm("fedavg"),
        kw["local_epochs"], kw["batch_size"], kw["momentum"],
        lr_const(0.1), stream(0, 1, 1, 2),
    )
    assert a.data.tobytes() == b.data.tobytes()


def test_fedprox_mu_positive_shrinks_drift(small_fed_data):
    net = small_net()
    ds = small_fed_data.client_train(0)
    out_plain, _ = fs.local_update(
        ds, net.params, net, fs.get_algorithm("fedavg"), 3, 10, 0.9,
        lr_const(0.1), stream(0, 1, 1, 0),
    )
    out_prox, _ = fs.local_update(
        ds, net.params, net, fs.get_algorithm("fedprox"), 3, 10, 0.9,
        lr_const(0.1), stream(0, 1, 1, 0), mu=1.0,
    )
    drift_plain = fs.param_distance(out_plain, net.params)
    drift_prox = fs.param_distance(out_prox, net.params)
    assert drift_prox < drift_plain


def test_fedprox_babu_freezes_head_and_regularizes(small_fed_data):
    net = small_net()
    ds = small_fed_data.client_train(1)
    out, _ = fs.local_update(
        ds, net.params, net, fs.get_algorithm("fedprox-babu"), 3, 10, 0.9,
        lr_const(0.1), stream(0, 1, 1, 1), mu=1.0,
    )
    head = net.head_segment
    assert out.segment(head).tobytes() == net.params.segment(head).tobytes()
    out_babu, _ = fs.local_update(
        ds, net.params, net, fs.get_algorithm("fedbabu"), 3, 10, 0.9,
        lr_const(0.1), stream(0, 1, 1, 1),
    )
    # the proximal term keeps the body closer to the broadcast model
    assert fs.param_distance(out, net.params) < fs.param_distance(out_babu, net.params)


def test_local_update_empty_client_raises():
    net = small_net()
    empty = fs.LabeledDataset(np.zeros((0, 8), dtype=np.float32), np.zeros(0, dtype=np.int64), 4)
    with pytest.raises(FederationError):
        fs.local_update(empty, net.params, net, fs.get_algorithm("fedavg"), 1, 10, 0.9,
                        lr_const(0.1), stream(0, 1, 1, 0))


# --- schedule plumbing ----------------------------------------------------------


def test_budget_invariance_of_schedule_length():
    totals = set()
    for rounds, tau in [(64, 1), (32, 2), (16, 4), (8, 8)]:
        cfg = fs.FLConfig(clients=10, fraction=0.5, local_epochs=tau, rounds=rounds, batch_size=50)
        totals.add(client_schedule(cfg, 500).total_updates)
    assert len(totals) == 1
    assert totals.pop() == 64 * iterations_per_epoch(500, 50)


def test_iterations_per_epoch_ceil():
    assert iterations_per_epoch(500, 50) == 10
    assert iterations_per_epoch(501, 50) == 11
    assert iterations_per_epoch(49, 50) == 1


# --- run_federation ---------------------------------------------------------------


def test_one_round_fedavg_is_mean_of_local_models():
    data = make_federated_data(clients=2, per_class=30, classes=4, shards_per_client=2, seed=1)
    net = small_net(seed=2)
    cfg = fs.FLConfig(clients=2, fraction=1.0, local_epochs=1, rounds=1, batch_size=10, seed=5)
    state, _ = fs.run_federation(cfg, data, net)

    # replay both clients by hand and average
    outs = []
    for cid in range(2):
        sched = client_schedule(cfg, len(data.client_train(cid)))
        out, _ = fs.local_update(
            data.client_train(cid), net.params, net, fs.get_algorithm("fedavg"),
            1, 10, 0.9, lambda u: sched.lr_at(u), stream(5, 1, 1, cid),
        )
        outs.append((out, len(data.client_train(cid))))
    expected = fs.aggregate(outs, net.params, net.mask_for("full"))
    assert state.global_params.data.tobytes() == expected.data.tobytes()


def test_run_federation_deterministic(small_fed_data):
    net = small_net(seed=3)
    cfg = fs.FLConfig(clients=4, fraction=0.5, local_epochs=2, rounds=6, batch_size=10, seed=11)
    s1, logs1 = fs.run_federation(cfg, small_fed_data, net)
    s2, logs2 = fs.run_federation(cfg, small_fed_data, net)
    assert s1.global_params.data.tobytes() == s2.global_params.data.tobytes()
    assert [l.client_ids for l in logs1] == [l.client_ids for l in logs2]
    assert [l.mean_loss for l in logs1] == [l.mean_loss for l in logs2]


def test_run_federation_jobs_bit_identical(small_fed_data):
    net = small_net(seed=3)
    cfg = fs.FLConfig(clients=4, fraction=1.0, local_epochs=1, rounds=4, batch_size=10, seed=13)
    s1, _ = fs.run_federation(cfg, small_fed_data, net, jobs=1)
    s2, _ = fs.run_federation(cfg, small_fed_data, net, jobs=3)
    assert s1.global_params.data.tobytes() == s2.global_params.data.tobytes()


def test_fedbabu_head_frozen_over_rounds(small_fed_data):
    net = small_net(seed=4)
    cfg = fs.FLConfig(
        clients=4, fraction=0.5, local_epochs=1, rounds=24, batch_size=10,
        algorithm="fedbabu", seed=17,
    )
    state, _ = fs.run_federation(cfg, small_fed_data, net)
    head = net.head_segment
    assert state.global_params.segment(head).tobytes() == net.params.segment(head).tobytes()
    assert not np.array_equal(state.global_params.segment(0), net.params.segment(0))


def test_resume_matches_uninterrupted(small_fed_data):
    net = small_net(seed=5)
    cfg = fs.FLConfig(clients=4, fraction=0.5, local_epochs=1, rounds=8, batch_size=10, seed=23)
    full_state, full_logs = fs.run_federation(cfg, small_fed_data, net)

    part_state, logs_a = fs.run_federation(cfg, small_fed_data, net, until_round=3)
    assert part_state.round == 3
    part_state, logs_b = fs.run_federation(cfg, small_fed_data, net, state=part_state)
    assert part_state.round == 8
    assert part_state.global_params.data.tobytes() == full_state.global_params.data.tobytes()
    assert [l.client_ids for l in logs_a + logs_b] == [l.client_ids for l in full_logs]


def test_round_log_sample_counts(small_fed_data):
    net = small_net(seed=6)
    cfg = fs.FLConfig(clients=4, fraction=0.5, local_epochs=1, rounds=3, batch_size=10, seed=29)
    _, logs = fs.run_federation(cfg, small_fed_data, net)
    assert all(len(l.client_ids) == 2 for l in logs)
    assert all(l.round == i + 1 for i, l in enumerate(logs))
    assert all(np.isfinite(l.mean_loss) for l in logs)


def test_server_body_update_keeps_head(small_fed_data):
    net = small_net(seed=7)
    cfg = fs.FLConfig(
        clients=4, fraction=1.0, local_epochs=1, rounds=3, batch_size=10,
        algorithm="fedbabu", server_share=0.25, server_update_part="body", seed=31,
    )
    state, _ = fs.run_federation(cfg, small_fed_data, net)
    head = net.head_segment
    assert state.global_params.segment(head).tobytes() == net.params.segment(head).tobytes()


def test_server_full_update_changes_head(small_fed_data):
    net = small_net(seed=7)
    base = dict(clients=4, fraction=1.0, local_epochs=1, rounds=3, batch_size=10, seed=31)
    cfg_off = fs.FLConfig(algorithm="fedbabu", **base)
    cfg_on = fs.FLConfig(algorithm="fedbabu", server_share=0.25, server_update_part="full", **base)
    state_off, _ = fs.run_federation(cfg_off, small_fed_data, net)
    state_on, _ = fs.run_federation(cfg_on, small_fed_data, net)
    head = net.head_segment
    assert not np.array_equal(state_on.global_params.segment(head), net.params.segment(head))
    # p=0 baseline untouched by the server path
    assert state_off.global_params.segment(head).tobytes() == net.params.segment(head).tobytes()


def test_server_update_affects_result(small_fed_data):
    net = small_net(seed=8)
    base = dict(clients=4, fraction=1.0, local_epochs=1, rounds=2, batch_size=10, seed=37)
    s0, _ = fs.run_federation(fs.FLConfig(**base), small_fed_data, net)
    s1, _ = fs.run_federation(fs.FLConfig(server_share=0.25, **base), small_fed_data, net)
    assert not np.array_equal(s0.global_params.data, s1.global_params.data)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_blowup_raises(small_fed_data):
    net = small_net(seed=9)
    cfg = fs.FLConfig(
        clients=4, fraction=1.0, local_epochs=2, rounds=20, batch_size=10,
        base_lr=1e18, seed=41,
    )
    with pytest.raises(NumericError):
        fs.run_federation(cfg, small_fed_data, net)


def test_config_validation():
    with pytest.raises(ValueError):
        fs.FLConfig(clients=4, fraction=0.0, local_epochs=1, rounds=1)
    with pytest.raises(ValueError):
        fs.FLConfig(clients=4, fraction=0.5, local_epochs=1, rounds=1, algorithm="nope")
    with pytest.raises(ValueError):
        fs.FLConfig(clients=4, fraction=0.5, local_epochs=1, rounds=1, mu=-1.0)


def test_total_rounds_lg_extension():
    cfg = fs.FLConfig(clients=4, fraction=0.5, local_epochs=2, rounds=16, algorithm="lg-fedavg")
    assert total_rounds(cfg) == 16 + 4
    cfg2 = fs.FLConfig(clients=4, fraction=0.5, local_epochs=2, rounds=16)
    assert total_rounds(cfg2) == 16
