"""
Federated averaging over facility clients.

Each facility is one client holding its own train / validation samples;
the server holds only the pooled test set. A round distributes the global
model to the selected clients, lets each run `local_epochs` passes of local
training with a fresh optimizer, and replaces the global model with the
n_k-weighted mean of the returned parameters.

Every source of randomness is derived from the master seed:

    init        derive_seed(seed, "init")
    local step  derive_seed(seed, "local", facility_id, round)
    selection   make_rng(seed, "select", round)

and aggregation sums in ascending facility-id order, so a threaded run is
bit-identical to a sequential one.
"""

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

import src.config as config
from src.app.errors import (
    DuplicateFacilityId,
    EmptyClientData,
    EmptyUpdateSet,
    FedTaxiError,
    InvalidConfig,
    ShapeMismatch,
    TrainingFailed,
)
from src.app.evaluation import CONTINUE, EarlyStopState, Split, balanced_accuracy, early_stop_update
from src.app.grid import GridSpec
from src.app.ingest import FacilityDataset, LabeledSample
from src.app.nn import ModelParams, init_params, loss_arrays, one_hot_rows, predict_labels, samples_to_arrays, train_epochs
from src.helper.atomic_io import write_csv_atomic
from src.helper.clock import elapsed_ms, log, time
from src.helper.seeding import derive_seed, make_rng
from src.interfaces.client_executor import ClientExecutorInterface
from src.interfaces.optimizer import OptimizerInterface
from src.runtime.runtime_manager import RuntimeManager

HISTORY_COLUMNS = ("round", "global_val_loss", "global_val_bal_acc", "n_participants", "elapsed_ms")


@dataclass
class ClientState:
    facility_id: str
    train: List[LabeledSample]
    val: List[LabeledSample] = field(default_factory=list)

    @property
    def n_k(self) -> int:
        return len(self.train)


@dataclass(frozen=True)
class FedConfig:
    n_rounds: int = config.N_ROUNDS
    local_epochs: int = config.LOCAL_EPOCHS
    client_fraction: float = config.CLIENT_FRACTION
    patience: float = config.PATIENCE
    seed: int = config.MASTER_SEED
    overlap_margin: int = config.OVERLAP_MARGIN
    local_optimizer: str = config.LOCAL_OPTIMIZER
    learning_rate: Optional[float] = None
    beta1: float = config.ADAM_BETA1
    beta2: float = config.ADAM_BETA2
    epsilon: float = config.ADAM_EPSILON
    layer_widths: Tuple[int, ...] = config.LAYER_WIDTHS

    def __post_init__(self) -> None:
        if int(self.n_rounds) != self.n_rounds or self.n_rounds < 1:
            raise InvalidConfig("fed.n_rounds", f"must be an integer >= 1, got {self.n_rounds}")
        if int(self.local_epochs) != self.local_epochs or self.local_epochs < 1:
            raise InvalidConfig("fed.local_epochs", f"must be an integer >= 1, got {self.local_epochs}")
        if not 0.0 < self.client_fraction <= 1.0:
            raise InvalidConfig("fed.client_fraction", f"must be in (0, 1], got {self.client_fraction}")
        if not (self.patience == math.inf or (int(self.patience) == self.patience and self.patience >= 1)):
            raise InvalidConfig("fed.patience", f"must be an integer >= 1 or infinite, got {self.patience}")
        if int(self.overlap_margin) != self.overlap_margin or self.overlap_margin < 0:
            raise InvalidConfig("fed.overlap_margin", f"must be an integer >= 0, got {self.overlap_margin}")
        if self.local_optimizer not in ("adam", "sgd"):
            raise InvalidConfig("model.local_optimizer", f"expected 'adam' or 'sgd', got {self.local_optimizer!r}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise InvalidConfig(f"model.{name}", f"must be in [0, 1), got {getattr(self, name)}")
        if not self.epsilon > 0:
            raise InvalidConfig("model.epsilon", f"must be > 0, got {self.epsilon}")


@dataclass(frozen=True)
class ClientUpdate:
    facility_id: str
    params: ModelParams
    n_k: int


@dataclass(frozen=True)
class RoundRecord:
    round: int
    global_val_loss: float
    global_val_balanced_accuracy: float
    participants: Tuple[str, ...]
    elapsed_ms: int

    @property
    def n_participants(self) -> int:
        return len(self.participants)


def partition_by_facility(datasets: Sequence[FacilityDataset], splits: Dict[str, Split]) -> List[ClientState]:
    """One client per facility holding that facility's train and validation portions.

    Raises:
        DuplicateFacilityId: two datasets share a facility id
    """
    seen: Set[str] = set()
    clients: List[ClientState] = []
    for dataset in sorted(datasets, key=lambda d: d.facility_id):
        if dataset.facility_id in seen:
            raise DuplicateFacilityId(f"facility {dataset.facility_id!r} appears twice")
        seen.add(dataset.facility_id)
        s = splits[dataset.facility_id]
        clients.append(
            ClientState(
                dataset.facility_id,
                [dataset.samples[i] for i in s.train_idx],
                [dataset.samples[i] for i in s.val_idx],
            )
        )
    return clients


def server_test_set(
    datasets: Sequence[FacilityDataset], splits: Dict[str, Split]
) -> Tuple[List[LabeledSample], List[str]]:
    """Pooled test portions of every facility, with the owning facility of each sample."""
    samples: List[LabeledSample] = []
    owners: List[str] = []
    for dataset in sorted(datasets, key=lambda d: d.facility_id):
        for i in splits[dataset.facility_id].test_idx:
            samples.append(dataset.samples[i])
            owners.append(dataset.facility_id)
    return samples, owners


def regroup_clients(clients: Sequence[ClientState], n_groups: int) -> List[ClientState]:
    """Merge facility clients (sorted by id) into n_groups contiguous groups.

    Keeps the total data fixed while the client count varies. Asking for
    as many groups as there are clients returns them unchanged.
    """
    ordered = sorted(clients, key=lambda c: c.facility_id)
    if int(n_groups) != n_groups or not 1 <= n_groups <= len(ordered):
        raise InvalidConfig("fed.facilities", f"must be between 1 and {len(ordered)}, got {n_groups}")
    if n_groups == len(ordered):
        return list(ordered)

    groups: List[ClientState] = []
    for index, members in enumerate(np.array_split(np.arange(len(ordered)), n_groups)):
        train: List[LabeledSample] = []
        val: List[LabeledSample] = []
        for member in members:
            train.extend(ordered[int(member)].train)
            val.extend(ordered[int(member)].val)
        groups.append(ClientState(f"G{index:02d}", train, val))
    log(f"FedAvg: regrouped {len(ordered)} facilities into {n_groups} clients")
    return groups


def domain_rectangle(client: ClientState) -> Optional[Tuple[int, int, int, int]]:
    """(row_min, row_max, col_min, col_max) of the client's own training cells."""
    if not client.train:
        return None
    rows = [s.cell.row for s in client.train]
    cols = [s.cell.col for s in client.train]
    return min(rows), max(rows), min(cols), max(cols)


def overlap_expand(clients: Sequence[ClientState], grid: GridSpec, margin: int) -> List[ClientState]:
    """Share training samples between neighbouring facilities.

    Each client's domain is the bounding rectangle of its own training
    cells, grown by `margin` cells on every side and clipped to the grid.
    Every other client's original training sample whose cell falls inside
    is appended to the client's training set. Validation sets never move.
    margin 0 returns the clients unchanged.
    """
    if int(margin) != margin or margin < 0:
        raise InvalidConfig("fed.overlap_margin", f"must be an integer >= 0, got {margin}")
    if margin == 0:
        return list(clients)

    ordered = sorted(clients, key=lambda c: c.facility_id)
    expanded: List[ClientState] = []
    for client in ordered:
        rect = domain_rectangle(client)
        if rect is None:
            expanded.append(ClientState(client.facility_id, list(client.train), list(client.val)))
            continue
        row_lo = max(rect[0] - margin, 0)
        row_hi = min(rect[1] + margin, grid.n_rows - 1)
        col_lo = max(rect[2] - margin, 0)
        col_hi = min(rect[3] + margin, grid.n_cols - 1)

        gained = [
            sample
            for other in ordered
            if other.facility_id != client.facility_id
            for sample in other.train
            if row_lo <= sample.cell.row <= row_hi and col_lo <= sample.cell.col <= col_hi
        ]
        expanded.append(ClientState(client.facility_id, list(client.train) + gained, list(client.val)))
        log(f"FedAvg: overlap margin {margin}: {client.facility_id} gained {len(gained)} samples")
    return expanded


def select_clients(n_clients: int, fraction: float, round_rng: Optional[np.random.Generator] = None) -> List[int]:
    """ceil(fraction * n_clients) distinct client indices, ascending.

    fraction 1.0 returns every index without touching the generator.
    """
    if not 0.0 < fraction <= 1.0:
        raise InvalidConfig("fed.client_fraction", f"must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(range(n_clients))
    k = min(n_clients, max(1, int(math.ceil(fraction * n_clients))))
    if round_rng is None:
        raise InvalidConfig("fed.client_fraction", "partial participation needs a round generator")
    return sorted(int(i) for i in round_rng.choice(n_clients, size=k, replace=False))


def local_update(
    global_params: ModelParams,
    client: ClientState,
    local_epochs: int,
    round_seed: int,
    optimizer: Optional[OptimizerInterface] = None,
) -> ClientUpdate:
    """Train a copy of the global model on the client's training data.

    The optimizer is reset first, so no optimizer state survives between
    rounds; only parameters leave the client.

    Raises:
        EmptyClientData: the client has no training samples
    """
    if not client.train:
        raise EmptyClientData(f"client {client.facility_id!r} has no training samples")
    if optimizer is None:
        from src.optimizer.adam_optimizer import AdamOptimizer

        optimizer = AdamOptimizer()
    optimizer.reset()
    x, y = samples_to_arrays(client.train)
    params = train_epochs(global_params.copy(), x, y, local_epochs, optimizer, round_seed)
    return ClientUpdate(client.facility_id, params, client.n_k)


def aggregate(updates: Sequence[ClientUpdate]) -> ModelParams:
    """Coordinate-wise sum over k of (n_k / n) * w_k, in ascending facility-id order.

    Raises:
        EmptyUpdateSet: no updates, or every update has n_k = 0
        ShapeMismatch: updates disagree on parameter shapes
    """
    if not updates:
        raise EmptyUpdateSet("aggregate needs at least one client update")
    ordered = sorted(updates, key=lambda u: u.facility_id)
    reference = ordered[0].params
    for update in ordered[1:]:
        if not reference.same_shape(update.params):
            raise ShapeMismatch(
                f"update from {update.facility_id!r} has widths {update.params.layer_widths}, "
                f"expected {reference.layer_widths}"
            )

    n = sum(update.n_k for update in ordered)
    if n == 0:
        raise EmptyUpdateSet("aggregate needs at least one update with n_k > 0")
    total: Optional[ModelParams] = None
    for update in ordered:
        weight = update.n_k / n
        scaled = update.params.map(lambda a: weight * a)
        total = scaled if total is None else total.map(np.add, scaled)
    return total


def run_federated(
    clients: Sequence[ClientState],
    cfg: FedConfig,
    init_seed: Optional[int] = None,
    executor: Optional[ClientExecutorInterface] = None,
    on_round: Optional[Callable[[RoundRecord, ModelParams], None]] = None,
) -> Tuple[ModelParams, List[RoundRecord]]:
    """FedAvg with validation-loss early stopping.

    Returns the best-validation global parameters and one RoundRecord per
    completed round. `on_round` sees every round's record and new global
    parameters.

    Raises:
        EmptyClientData: no clients, a client without training data, or no
            validation data anywhere
        TrainingFailed: any failure inside a round, tagged with the round
    """
    ordered = sorted(clients, key=lambda c: c.facility_id)
    if not ordered:
        raise EmptyClientData("federated training needs at least one client")
    for client in ordered:
        if not client.train:
            raise EmptyClientData(f"client {client.facility_id!r} has no training samples")
    if not any(client.val for client in ordered):
        raise EmptyClientData("no client holds validation samples")

    manager = RuntimeManager()
    prototype = manager.load_optimizer(
        cfg.local_optimizer, cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon
    )
    optimizers = {client.facility_id: copy.deepcopy(prototype) for client in ordered}
    owns_executor = executor is None
    if executor is None:
        executor = manager.load_executor(1)

    seed = derive_seed(cfg.seed, "init") if init_seed is None else init_seed
    global_params = init_params(cfg.layer_widths, seed)
    validation = _validation_arrays(ordered)
    state = EarlyStopState(cfg.patience)
    history: List[RoundRecord] = []
    log(
        f"FedAvg: {len(ordered)} clients, {sum(c.n_k for c in ordered)} training samples, "
        f"up to {cfg.n_rounds} rounds, patience {cfg.patience}"
    )

    try:
        for round_number in range(1, cfg.n_rounds + 1):
            started = time()
            try:
                rng = None if cfg.client_fraction == 1.0 else make_rng(cfg.seed, "select", round_number)
                selected = [ordered[i] for i in select_clients(len(ordered), cfg.client_fraction, rng)]

                def train_client(client: ClientState) -> ClientUpdate:
                    return local_update(
                        global_params,
                        client,
                        cfg.local_epochs,
                        derive_seed(cfg.seed, "local", client.facility_id, round_number),
                        optimizers[client.facility_id],
                    )

                global_params = aggregate(executor.map(train_client, selected))
                val_loss, val_bal_acc = _validate(global_params, validation)
                if not math.isfinite(val_loss):
                    raise FloatingPointError(f"validation loss is {val_loss}")
            except (FedTaxiError, ArithmeticError, ValueError) as e:
                raise TrainingFailed(round_number, e) from e

            record = RoundRecord(
                round_number, val_loss, val_bal_acc, tuple(c.facility_id for c in selected), elapsed_ms(started)
            )
            history.append(record)
            log(
                f"FedAvg: round {round_number}/{cfg.n_rounds}: val_loss={val_loss:.6f}, "
                f"val_bal_acc={val_bal_acc:.4f}, participants={record.n_participants}"
            )
            if on_round is not None:
                on_round(record, global_params)

            state, decision = early_stop_update(state, val_loss, round_number, global_params)
            if decision != CONTINUE:
                log(
                    f"FedAvg: early stop at round {round_number}, best round {state.best_round} "
                    f"(val_loss={state.best_metric:.6f})"
                )
                break
    finally:
        if owns_executor:
            executor.shutdown()

    return state.best_snapshot, history


def run_single(
    train: Sequence[LabeledSample],
    val: Sequence[LabeledSample],
    cfg: FedConfig,
    facility_id: str = config.POOLED_CLIENT_ID,
    init_seed: Optional[int] = None,
    on_round: Optional[Callable[[RoundRecord, ModelParams], None]] = None,
) -> Tuple[ModelParams, List[RoundRecord]]:
    """The pooled baseline: the same loop with one client holding all data."""
    if not train:
        raise EmptyClientData("single-model training needs pooled training data")
    pooled = ClientState(facility_id, list(train), list(val))
    return run_federated([pooled], replace(cfg, client_fraction=1.0), init_seed=init_seed, on_round=on_round)


def pooled_data(clients: Sequence[ClientState]) -> Tuple[List[LabeledSample], List[LabeledSample]]:
    """Concatenated train and validation sets of all clients, ascending facility order."""
    train: List[LabeledSample] = []
    val: List[LabeledSample] = []
    for client in sorted(clients, key=lambda c: c.facility_id):
        train.extend(client.train)
        val.extend(client.val)
    return train, val


def write_history(path: str, history: Sequence[RoundRecord]) -> None:
    rows = [
        (r.round, repr(r.global_val_loss), repr(r.global_val_balanced_accuracy), r.n_participants, r.elapsed_ms)
        for r in history
    ]
    write_csv_atomic(path, HISTORY_COLUMNS, rows)
    log(f"FedAvg: wrote {len(rows)} rounds to {path}")


def _validation_arrays(clients: Sequence[ClientState]) -> List[Tuple[int, np.ndarray, np.ndarray, np.ndarray]]:
    arrays = []
    for client in clients:
        if not client.val:
            continue
        x, y = samples_to_arrays(client.val)
        arrays.append((client.n_k, x, y, one_hot_rows(y)))
    return arrays


def _validate(params: ModelParams, validation: Sequence[Tuple[int, np.ndarray, np.ndarray, np.ndarray]]) -> Tuple[float, float]:
    """n_k-weighted mean of per-client validation losses, and balanced accuracy on their union."""
    total_weight = sum(weight for weight, _, _, _ in validation)
    loss = sum(weight * loss_arrays(params, x, g) for weight, x, _, g in validation) / total_weight
    preds = np.concatenate([predict_labels(params, x) for _, x, _, _ in validation])
    truth = np.concatenate([y for _, _, y, _ in validation])
    return float(loss), balanced_accuracy(preds, truth)
