import math

import numpy as np
import pytest

import src.config as config
from src.app.errors import (
    DuplicateFacilityId,
    EmptyClientData,
    EmptyUpdateSet,
    InvalidConfig,
    ShapeMismatch,
    TrainingFailed,
)
from src.app.evaluation import split
from src.app.fed import (
    HISTORY_COLUMNS,
    ClientState,
    ClientUpdate,
    FedConfig,
    aggregate,
    domain_rectangle,
    local_update,
    overlap_expand,
    partition_by_facility,
    pooled_data,
    regroup_clients,
    run_federated,
    run_single,
    select_clients,
    server_test_set,
    write_history,
)
from src.app.grid import CellId, DemandLevel, GridSpec, SlotId
from src.app.ingest import FacilityDataset, LabeledSample
from src.app.nn import (
    ModelParams,
    encode_features,
    init_params,
    loss_arrays,
    one_hot_rows,
    samples_to_arrays,
    train_epochs,
)
from src.helper.seeding import make_rng
from src.optimizer.adam_optimizer import AdamHyper, AdamOptimizer
from src.runtime.runtime_manager import RuntimeManager
from tests.mock.recording_executor import RecordingExecutor

GRID = GridSpec(n_rows=10, n_cols=10)
WIDTHS = (6, 8, 4)


def sample(row, col, index=0, label=0):
    slot = SlotId(index, index % 24, 0)
    cell = CellId(row, col)
    return LabeledSample(cell, slot, encode_features(cell, slot, GRID), DemandLevel(label), label)


def random_samples(n, seed, rows=range(10), cols=range(10)):
    rng = np.random.default_rng(seed)
    rows, cols = list(rows), list(cols)
    out = []
    for _ in range(n):
        row = rows[int(rng.integers(len(rows)))]
        col = cols[int(rng.integers(len(cols)))]
        index = int(rng.integers(0, 168))
        label = (row // 3 + (index % 24 > 12)) % 4
        out.append(sample(row, col, index, label))
    return out


def make_client(facility_id, n_train, seed, n_val=None):
    data = random_samples(n_train + (n_val if n_val is not None else max(1, n_train // 4)), seed)
    return ClientState(facility_id, data[:n_train], data[n_train:])


def scalar_params(value):
    return ModelParams(((np.array([[float(value)]]), np.array([0.0])),))


def fed_config(**overrides):
    defaults = dict(n_rounds=5, patience=math.inf, layer_widths=WIDTHS, seed=3)
    defaults.update(overrides)
    return FedConfig(**defaults)


def test_aggregate_scalar_example():
    result = aggregate([ClientUpdate("A", scalar_params(0.0), 1), ClientUpdate("B", scalar_params(4.0), 3)])
    assert result.layers[0][0][0, 0] == 3.0


def test_aggregate_of_one_update_is_exact():
    params = init_params(WIDTHS, seed=1)
    assert aggregate([ClientUpdate("F00", params, 17)]).equals(params)


def test_aggregate_matches_a_brute_force_weighted_mean():
    rng = np.random.default_rng(0)
    for trial in range(100):
        k = int(rng.integers(1, 7))
        updates = [
            ClientUpdate(f"F{i:02d}", init_params(WIDTHS, seed=trial * 10 + i), int(rng.integers(1, 500)))
            for i in range(k)
        ]
        result = aggregate(updates).flatten()
        n = sum(u.n_k for u in updates)
        expected = sum(u.n_k * u.params.flatten() for u in updates) / n
        assert np.allclose(result, expected, rtol=0, atol=1e-12)

        stacked = np.stack([u.params.flatten() for u in updates])
        assert np.all(result >= stacked.min(axis=0) - 1e-12)
        assert np.all(result <= stacked.max(axis=0) + 1e-12)

        scaled = [ClientUpdate(u.facility_id, u.params, u.n_k * 7) for u in updates]
        assert np.allclose(aggregate(scaled).flatten(), result, rtol=0, atol=1e-12)


def test_aggregate_at_scale_matches_an_extended_precision_mean():
    rng = np.random.default_rng(11)
    for trial in range(100):
        k = int(rng.integers(1, 17))
        hidden = int(rng.integers(1, 900))
        widths = (6, hidden, 4)
        updates = [
            ClientUpdate(f"F{i:02d}", init_params(widths, seed=trial * 100 + i), int(rng.integers(0, 5000)))
            for i in range(k)
        ]
        if sum(u.n_k for u in updates) == 0:
            updates[0] = ClientUpdate(updates[0].facility_id, updates[0].params, 1)
        result = aggregate(updates).flatten()
        assert result.size <= 10_000

        n = sum(u.n_k for u in updates)
        expected = sum(np.longdouble(u.n_k) * u.params.flatten().astype(np.longdouble) for u in updates) / n
        error = np.linalg.norm((result - expected).astype(np.float64))
        assert error <= 1e-12 * np.linalg.norm(expected.astype(np.float64))


def test_aggregate_ignores_the_order_updates_arrive_in():
    updates = [ClientUpdate(f"F{i:02d}", init_params(WIDTHS, seed=i), 10 + i) for i in range(5)]
    assert aggregate(updates).equals(aggregate(list(reversed(updates))))


def test_aggregate_rejects_empty_zero_weight_and_mismatched_updates():
    with pytest.raises(EmptyUpdateSet):
        aggregate([])
    with pytest.raises(EmptyUpdateSet):
        aggregate([ClientUpdate("A", scalar_params(1.0), 0), ClientUpdate("B", scalar_params(2.0), 0)])
    with pytest.raises(ShapeMismatch):
        aggregate([ClientUpdate("A", init_params([6, 4], 0), 1), ClientUpdate("B", init_params([6, 3, 4], 0), 1)])


def test_select_all_clients_without_a_generator():
    assert select_clients(5, 1.0) == [0, 1, 2, 3, 4]


def test_select_a_fraction_deterministically():
    first = select_clients(8, 0.25, make_rng(0, "select", 1))
    again = select_clients(8, 0.25, make_rng(0, "select", 1))
    assert first == again
    assert len(first) == 2
    assert first == sorted(set(first))
    assert len(select_clients(3, 0.1, make_rng(0, "select", 1))) == 1


def test_select_rejects_bad_fractions():
    with pytest.raises(InvalidConfig):
        select_clients(4, 0.0)
    with pytest.raises(InvalidConfig):
        select_clients(4, 1.5)
    with pytest.raises(InvalidConfig):
        select_clients(4, 0.5)


def datasets_and_splits(sizes):
    datasets = [FacilityDataset(f"F{i:02d}", random_samples(n, seed=i)) for i, n in enumerate(sizes)]
    splits = {d.facility_id: split(len(d.samples), seed=i) for i, d in enumerate(datasets)}
    return datasets, splits


def test_partition_keeps_train_val_and_test_disjoint():
    datasets, splits = datasets_and_splits([30, 20, 50])
    clients = partition_by_facility(list(reversed(datasets)), splits)
    test, owners = server_test_set(datasets, splits)

    assert [c.facility_id for c in clients] == ["F00", "F01", "F02"]
    seen = set()
    for group in [c.train for c in clients] + [c.val for c in clients] + [test]:
        ids = {id(s) for s in group}
        assert not ids & seen
        seen |= ids
    assert len(seen) == 100
    assert owners.count("F02") == len(splits["F02"].test_idx)


def test_partition_rejects_duplicate_facilities():
    datasets, splits = datasets_and_splits([10])
    with pytest.raises(DuplicateFacilityId):
        partition_by_facility(datasets + datasets, splits)


def test_regroup_merges_contiguous_facilities():
    clients = [make_client(f"F{i:02d}", 10 + i, seed=i) for i in range(5)]
    groups = regroup_clients(list(reversed(clients)), 2)

    assert [g.facility_id for g in groups] == ["G00", "G01"]
    assert groups[0].n_k == 10 + 11 + 12
    assert groups[1].n_k == 13 + 14
    assert groups[0].train[:10] == clients[0].train
    assert sum(len(g.val) for g in groups) == sum(len(c.val) for c in clients)


def test_regroup_to_the_same_count_is_the_identity():
    clients = [make_client(f"F{i:02d}", 5, seed=i) for i in range(3)]
    assert all(a is b for a, b in zip(regroup_clients(clients, 3), clients))
    with pytest.raises(InvalidConfig):
        regroup_clients(clients, 0)
    with pytest.raises(InvalidConfig):
        regroup_clients(clients, 4)


def block_client(facility_id, rows, cols):
    return ClientState(
        facility_id,
        [sample(r, c) for r in rows for c in cols],
        [sample(rows[0], cols[0], index=1)],
    )


def test_overlap_margin_zero_returns_the_same_clients():
    clients = [block_client("A", range(0, 3), range(0, 3)), block_client("B", range(3, 6), range(0, 3))]
    expanded = overlap_expand(clients, GRID, 0)
    assert all(a is b for a, b in zip(expanded, clients))
    assert all(a.train is b.train for a, b in zip(expanded, clients))


def test_overlap_margin_one_shares_the_bordering_row():
    a = block_client("A", range(0, 3), range(0, 3))
    b = block_client("B", range(3, 6), range(0, 3))
    c = block_client("C", range(8, 10), range(8, 10))
    before = {client.facility_id: list(client.train) for client in (a, b, c)}

    expanded = {client.facility_id: client for client in overlap_expand([c, b, a], GRID, 1)}

    assert domain_rectangle(a) == (0, 2, 0, 2)
    gained_a = expanded["A"].train[len(a.train) :]
    gained_b = expanded["B"].train[len(b.train) :]
    assert sorted((s.cell.row, s.cell.col) for s in gained_a) == [(3, 0), (3, 1), (3, 2)]
    assert sorted((s.cell.row, s.cell.col) for s in gained_b) == [(2, 0), (2, 1), (2, 2)]
    assert expanded["C"].train == c.train
    assert expanded["A"].val == a.val
    assert {k: v.train for k, v in {"A": a, "B": b, "C": c}.items()} == before


def test_overlap_margin_covering_the_grid_shares_everything():
    clients = [block_client("A", range(0, 3), range(0, 3)), block_client("C", range(8, 10), range(8, 10))]
    expanded = overlap_expand(clients, GRID, 20)
    assert all(e.n_k == 9 + 4 for e in expanded)


def test_overlap_matches_a_rectangle_membership_oracle_on_random_domains():
    rng = np.random.default_rng(21)
    for trial in range(50):
        clients = []
        for k in range(int(rng.integers(1, 6))):
            n = int(rng.integers(1, 12))
            cells = [(int(rng.integers(GRID.n_rows)), int(rng.integers(GRID.n_cols))) for _ in range(n)]
            clients.append(ClientState(f"F{k:02d}", [sample(r, c, index=i) for i, (r, c) in enumerate(cells)], []))
        margin = int(rng.integers(0, 4))

        expanded = {c.facility_id: c for c in overlap_expand(clients, GRID, margin)}
        for client in clients:
            own_rows = [s.cell.row for s in client.train]
            own_cols = [s.cell.col for s in client.train]
            inside = {
                (r, c)
                for r in range(GRID.n_rows)
                for c in range(GRID.n_cols)
                if min(own_rows) - margin <= r <= max(own_rows) + margin
                and min(own_cols) - margin <= c <= max(own_cols) + margin
            }
            wanted = []
            if margin > 0:
                wanted = [
                    s
                    for other in clients
                    if other.facility_id != client.facility_id
                    for s in other.train
                    if (s.cell.row, s.cell.col) in inside
                ]
            result = expanded[client.facility_id].train
            assert result[: len(client.train)] == client.train
            assert result[len(client.train) :] == wanted


def test_overlap_rejects_negative_margins():
    with pytest.raises(InvalidConfig):
        overlap_expand([], GRID, -1)


def test_local_update_equals_plain_training():
    client = make_client("F00", 40, seed=0)
    params = init_params(WIDTHS, seed=0)
    before = params.copy()

    update = local_update(params, client, 3, round_seed=9)
    x, y = samples_to_arrays(client.train)
    expected = train_epochs(params, x, y, 3, AdamOptimizer(), 9)

    assert update.params.equals(expected)
    assert update.n_k == 40
    assert params.equals(before)


def test_local_update_resets_a_used_optimizer():
    client = make_client("F00", 20, seed=1)
    params = init_params(WIDTHS, seed=0)
    optimizer = AdamOptimizer()
    local_update(params, client, 2, 0, optimizer)
    assert local_update(params, client, 2, 0, optimizer).params.equals(local_update(params, client, 2, 0).params)


def test_local_update_reduces_the_training_loss():
    improved = 0
    for seed in range(20):
        client = make_client(f"F{seed:02d}", 80, seed=seed)
        params = init_params(WIDTHS, seed=seed)
        x, y = samples_to_arrays(client.train)
        before = loss_arrays(params, x, one_hot_rows(y))
        optimizer = AdamOptimizer(AdamHyper(learning_rate=config.LEARNING_RATE))
        update = local_update(params, client, 3, round_seed=seed, optimizer=optimizer)
        improved += loss_arrays(update.params, x, one_hot_rows(y)) < before
    assert improved >= 18


def test_local_update_needs_training_data():
    with pytest.raises(EmptyClientData):
        local_update(init_params(WIDTHS, 0), ClientState("F00", []), 1, 0)


def recorder():
    seen = []
    return seen, lambda record, params: seen.append((record, params.copy()))


def test_one_client_federated_run_equals_the_single_model():
    client = make_client("F00", 60, seed=2)
    cfg = fed_config(n_rounds=20)
    fed_seen, on_fed = recorder()
    single_seen, on_single = recorder()

    fed_params, fed_history = run_federated([client], cfg, on_round=on_fed)
    single_params, single_history = run_single(client.train, client.val, cfg, facility_id="F00", on_round=on_single)

    assert fed_params.equals(single_params)
    assert len(fed_seen) == len(single_seen) == 20
    for (fr, fp), (sr, sp) in zip(fed_seen, single_seen):
        assert fp.equals(sp)
        assert fr.global_val_loss == sr.global_val_loss
        assert fr.global_val_balanced_accuracy == sr.global_val_balanced_accuracy


def test_infinite_patience_runs_every_round():
    clients = [make_client(f"F{i:02d}", 30, seed=i) for i in range(3)]
    _, history = run_federated(clients, fed_config(n_rounds=12))
    assert [r.round for r in history] == list(range(1, 13))
    assert all(r.participants == ("F00", "F01", "F02") for r in history)


def test_early_stopping_returns_the_best_round(monkeypatch):
    losses = iter([1.0, 0.8, 0.7, 0.5, 0.6, 0.55, 0.9, 0.4, 0.3])
    monkeypatch.setattr("src.app.fed._validate", lambda params, validation: (next(losses), 0.5))
    seen, on_round = recorder()

    params, history = run_federated([make_client("F00", 20, seed=0)], fed_config(n_rounds=50, patience=3), on_round=on_round)

    assert len(history) == 7
    assert params.equals(seen[3][1])
    assert not params.equals(seen[-1][1])


def test_partial_participation_is_seeded():
    clients = [make_client(f"F{i:02d}", 15, seed=i) for i in range(4)]
    cfg = fed_config(n_rounds=6, client_fraction=0.5)
    _, first = run_federated(clients, cfg)
    _, second = run_federated(clients, cfg)

    assert all(r.n_participants == 2 for r in first)
    assert [r.participants for r in first] == [r.participants for r in second]
    assert [r.global_val_loss for r in first] == [r.global_val_loss for r in second]


def test_executor_order_does_not_change_the_result():
    clients = [make_client(f"F{i:02d}", 25, seed=i) for i in range(4)]
    cfg = fed_config(n_rounds=4)
    executor = RecordingExecutor()

    expected, _ = run_federated(clients, cfg)
    recorded, _ = run_federated(list(reversed(clients)), cfg, executor=executor)

    assert recorded.equals(expected)
    assert executor.calls == [["F00", "F01", "F02", "F03"]] * 4
    assert not executor.shut_down


def test_threaded_run_is_bit_identical():
    clients = [make_client(f"F{i:02d}", 25, seed=i) for i in range(4)]
    cfg = fed_config(n_rounds=4, local_optimizer="sgd")
    executor = RuntimeManager().load_executor(3)
    try:
        threaded, threaded_history = run_federated(clients, cfg, executor=executor)
    finally:
        executor.shutdown()
    sequential, sequential_history = run_federated(clients, cfg)

    assert threaded.equals(sequential)
    assert [r.global_val_loss for r in threaded_history] == [r.global_val_loss for r in sequential_history]


def test_failures_inside_a_round_carry_the_round(monkeypatch):
    calls = iter([(1.0, 0.5), (float("nan"), 0.5)])
    monkeypatch.setattr("src.app.fed._validate", lambda params, validation: next(calls))
    with pytest.raises(TrainingFailed) as error:
        run_federated([make_client("F00", 10, seed=0)], fed_config())
    assert error.value.round_number == 2


def test_run_federated_validates_clients_up_front():
    with pytest.raises(EmptyClientData):
        run_federated([], fed_config())
    with pytest.raises(EmptyClientData):
        run_federated([make_client("F00", 10, seed=0), ClientState("F01", [], [])], fed_config())
    with pytest.raises(EmptyClientData):
        run_federated([make_client("F00", 10, seed=0, n_val=0)], fed_config())
    with pytest.raises(EmptyClientData):
        run_single([], [], fed_config())


def test_adam_moment_settings_reach_the_client_optimizers(monkeypatch):
    loaded = []
    original = RuntimeManager.load_optimizer

    def recording_load(self, *args, **kwargs):
        optimizer = original(self, *args, **kwargs)
        loaded.append(optimizer)
        return optimizer

    monkeypatch.setattr(RuntimeManager, "load_optimizer", recording_load)
    cfg = fed_config(n_rounds=1, learning_rate=0.02, beta1=0.0, beta2=0.5, epsilon=0.1)
    run_federated([make_client("F00", 10, seed=0)], cfg)
    assert [o.hyper for o in loaded] == [AdamHyper(0.02, 0.0, 0.5, 0.1)]


def test_init_seed_override_changes_the_start():
    client = make_client("F00", 20, seed=0)
    a, _ = run_federated([client], fed_config(n_rounds=1), init_seed=1)
    b, _ = run_federated([client], fed_config(n_rounds=1), init_seed=2)
    assert not a.equals(b)


@pytest.mark.parametrize(
    "overrides",
    [
        {"n_rounds": 0},
        {"local_epochs": 0},
        {"client_fraction": 0.0},
        {"patience": 0},
        {"patience": 2.5},
        {"overlap_margin": -1},
        {"local_optimizer": "rmsprop"},
        {"beta1": 1.0},
        {"beta2": -0.1},
        {"epsilon": 0.0},
    ],
)
def test_fed_config_rejects_invalid_values(overrides):
    with pytest.raises(InvalidConfig):
        fed_config(**overrides)


def test_pooled_data_concatenates_in_facility_order():
    clients = [make_client("F01", 5, seed=1), make_client("F00", 4, seed=0)]
    train, val = pooled_data(clients)
    assert train == clients[1].train + clients[0].train
    assert len(val) == len(clients[0].val) + len(clients[1].val)


def test_write_history_layout(tmp_path):
    _, history = run_federated([make_client("F00", 10, seed=0)], fed_config(n_rounds=2))
    path = tmp_path / "history-federated.csv"
    write_history(str(path), history)

    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == ",".join(HISTORY_COLUMNS)
    assert len(lines) == 3
    fields = lines[1].split(",")
    assert fields[0] == "1"
    assert float(fields[1]) == history[0].global_val_loss
    assert fields[3] == "1"
