"""
Federated orchestration: local training, FedAvg, the round loop and
persistence of exactly one round of client updates.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .checkpoint import checkpoint_size, read_checkpoint, write_checkpoint
from .data import Dataset
from .errors import ConfigurationError, IntegrityError, NumericalError, UsageError
from .metrics import EventLog, RoundMetrics
from .nn import Batch, ModelParams, OptimizerState, train_step
from .seeding import derive_seed

logger = logging.getLogger(__name__)


class Weighting(str, Enum):
    UNIFORM = "uniform"
    BY_SAMPLE_COUNT = "by_sample_count"


@dataclass
class Client:
    client_id: int
    dataset: Dataset
    is_malicious: bool = False
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 1e-3

    def __post_init__(self):
        if len(self.dataset) == 0:
            raise ConfigurationError(f"client {self.client_id} has an empty dataset")
        if self.local_epochs < 0 or self.batch_size < 1:
            raise ConfigurationError(
                f"client {self.client_id}: local_epochs must be >= 0 and batch_size >= 1"
            )


@dataclass(frozen=True)
class ClientUpdate:
    """A client's model after local training. The delta is params - previous global."""

    client_id: int
    params: ModelParams
    sample_count: int
    round_index: int = 0
    diverged: bool = False
    reason: str = ""


@dataclass
class ServerState:
    global_model: ModelParams
    round_index: int = 0
    previous_global: Optional[ModelParams] = None
    last_round_updates: Tuple[ClientUpdate, ...] = ()
    enrolled: FrozenSet[int] = frozenset()
    pending_detections: FrozenSet[int] = frozenset()
    last_unlearn_round: Optional[int] = None
    storage_counter: int = 0  # one update per enrolled client plus the global model
    metrics: Tuple[RoundMetrics, ...] = ()
    recovery_plans: Tuple = ()
    events: EventLog = field(default_factory=EventLog)

    @classmethod
    def initial(cls, global_model: ModelParams, client_ids: Iterable[int],
                events: Optional[EventLog] = None) -> "ServerState":
        return cls(global_model=global_model, enrolled=frozenset(client_ids),
                   events=events if events is not None else EventLog())

    def update_for(self, client_id: int) -> Optional[ClientUpdate]:
        for update in self.last_round_updates:
            if update.client_id == client_id:
                return update
        return None

    def check_invariants(self) -> None:
        ids = [u.client_id for u in self.last_round_updates]
        if len(ids) != len(set(ids)):
            raise IntegrityError("last_round_updates holds more than one update per client")
        if any(u.round_index != self.round_index for u in self.last_round_updates):
            raise IntegrityError("server retains client updates older than the last round")
        if not self.pending_detections <= self.enrolled:
            raise IntegrityError("pending detections include clients that are not enrolled")


# ============================================================================
# Local training
# ============================================================================

def local_train(client: Client, global_model: ModelParams, seed: int,
                round_index: int = 0) -> ClientUpdate:
    """
    Train a copy of the global model for `local_epochs` over seeded mini-batches.

    Numerical divergence does not raise; the update comes back flagged and
    carries the diagnostic in `reason`.
    """
    model = global_model.copy()
    data = client.dataset
    if client.local_epochs == 0:
        return ClientUpdate(client.client_id, model, len(data), round_index)

    opt = OptimizerState.fresh(model, client.learning_rate)
    rng = np.random.default_rng(seed)
    try:
        for _ in range(client.local_epochs):
            order = rng.permutation(len(data))
            for start in range(0, len(data), client.batch_size):
                idx = order[start:start + client.batch_size]
                model, opt, _ = train_step(model, opt, Batch(data.inputs[idx], data.labels[idx]))
    except NumericalError as e:
        logger.warning(f"client {client.client_id} diverged in round {round_index}: {e}")
        return ClientUpdate(client.client_id, global_model.copy(), len(data), round_index,
                            diverged=True, reason=str(e))
    return ClientUpdate(client.client_id, model, len(data), round_index)


# ============================================================================
# Aggregation
# ============================================================================

def fedavg(updates: Sequence[ClientUpdate], weighting: Union[str, Weighting] = Weighting.UNIFORM,
           dtype=np.float32) -> ModelParams:
    """
    Per-weight weighted mean of the update parameters.

    Summation runs in ascending client-id order with a float64
    accumulator, so the result does not depend on the input order.
    """
    if not updates:
        raise UsageError("fedavg needs at least one update")
    weighting = Weighting(weighting)
    ordered = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ordered]
    if len(ids) != len(set(ids)):
        raise IntegrityError(f"duplicate client ids in updates: {ids}")
    reference = ordered[0].params
    for update in ordered[1:]:
        reference.check_congruent(update.params, "client updates")

    if weighting == Weighting.UNIFORM:
        coefficients = [1.0] * len(ordered)
    else:
        coefficients = [float(u.sample_count) for u in ordered]
    total = sum(coefficients)
    if total <= 0:
        raise UsageError("aggregation weights sum to zero")

    layers = []
    for index, layer in enumerate(reference.layers):
        acc_w = np.zeros(layer.weights.shape, dtype=np.float64)
        acc_b = np.zeros(layer.biases.shape, dtype=np.float64)
        for update, coef in zip(ordered, coefficients):
            acc_w += coef * update.params.layers[index].weights.astype(np.float64)
            acc_b += coef * update.params.layers[index].biases.astype(np.float64)
        layers.append(layer.with_arrays((acc_w / total).astype(dtype), (acc_b / total).astype(dtype)))
    return ModelParams(layers)


def avg_models(updates: Sequence[ClientUpdate], subset: Iterable[int], dtype=np.float32) -> ModelParams:
    """Uniform mean over the updates whose client id is in `subset`."""
    wanted = set(subset)
    if not wanted:
        raise UsageError("avg_models needs a nonempty subset")
    chosen = [u for u in updates if u.client_id in wanted]
    missing = wanted - {u.client_id for u in chosen}
    if missing:
        raise UsageError(f"no update for clients {sorted(missing)}")
    return fedavg(chosen, Weighting.UNIFORM, dtype)


# ============================================================================
# Round loop
# ============================================================================

RoundObserver = Callable[[ServerState], RoundMetrics]


def _collect_updates(participants: Sequence[Client], global_model: ModelParams,
                     seed: int, round_index: int, workers: int) -> List[ClientUpdate]:
    def train(client: Client) -> ClientUpdate:
        client_seed = derive_seed(seed, "local", client.client_id, round_index)
        return local_train(client, global_model, client_seed, round_index)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(train, participants))
    return [train(client) for client in participants]


def run_round(state: ServerState, clients: Sequence[Client], seed: int,
              weighting: Union[str, Weighting] = Weighting.UNIFORM,
              observer: Optional[RoundObserver] = None, workers: int = 1) -> ServerState:
    """
    One FedAvg round over the enrolled clients.

    Every enrolled client trains and its update is stored as the new
    last round. Clients with a pending detection are left out of the
    aggregate. If no usable update remains the round is aborted and only
    the event log changes.
    """
    participants = sorted((c for c in clients if c.client_id in state.enrolled),
                          key=lambda c: c.client_id)
    if len(participants) < 2:
        raise UsageError(f"a round needs at least 2 enrolled clients, have {len(participants)}")

    next_round = state.round_index + 1
    updates = _collect_updates(participants, state.global_model, seed, next_round, workers)

    healthy = []
    for update in updates:
        if update.diverged:
            state.events.warn(next_round, "update_diverged", client=update.client_id)
        else:
            healthy.append(update)
    aggregated = [u for u in healthy if u.client_id not in state.pending_detections]
    if not aggregated:
        state.events.warn(next_round, "round_aborted", diverged=len(updates) - len(healthy))
        return state

    new_global = fedavg(aggregated, weighting)
    new_state = replace(
        state,
        global_model=new_global,
        previous_global=state.global_model,
        round_index=next_round,
        last_round_updates=tuple(healthy),
        storage_counter=(len(state.enrolled) + 1) * checkpoint_size(new_global),
    )
    new_state.check_invariants()
    logger.debug(f"round {next_round}: {len(aggregated)} of {len(updates)} updates aggregated")

    if observer is not None:
        new_state = replace(new_state, metrics=new_state.metrics + (observer(new_state),))
    return new_state


def remove_clients(state: ServerState, client_ids: Iterable[int]) -> ServerState:
    """Unenroll clients and forget their pending detections."""
    gone = frozenset(client_ids)
    return replace(state, enrolled=state.enrolled - gone,
                   pending_detections=state.pending_detections - gone)


# ============================================================================
# One-round persistence
# ============================================================================

def save_round(state: ServerState, directory: Union[str, Path]) -> int:
    """
    Write the global model, the model broadcast at the start of the last
    round and each last-round client update. Client files from earlier
    rounds are removed. Returns the bytes written.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for stale in directory.glob("client_*.fupm"):
        stale.unlink()
    written = write_checkpoint(state.global_model, directory / "global.fupm")
    if state.previous_global is not None:
        written += write_checkpoint(state.previous_global, directory / "previous_global.fupm")
    for update in state.last_round_updates:
        written += write_checkpoint(update.params, directory / f"client_{update.client_id}.fupm")
    return written


def load_round(directory: Union[str, Path], round_index: int = 0) -> Tuple[ModelParams, Optional[ModelParams], List[ClientUpdate]]:
    """Read back what save_round wrote. Sample counts are not persisted and come back as 0."""
    directory = Path(directory)
    global_model = read_checkpoint(directory / "global.fupm")
    previous_path = directory / "previous_global.fupm"
    previous = read_checkpoint(previous_path) if previous_path.exists() else None
    updates = []
    for path in sorted(directory.glob("client_*.fupm"), key=lambda p: int(p.stem.split("_")[1])):
        client_id = int(path.stem.split("_")[1])
        updates.append(ClientUpdate(client_id, read_checkpoint(path), 0, round_index))
    return global_model, previous, updates
