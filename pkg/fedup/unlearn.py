"""
Pruning-based unlearning engine.

Builds the unlearning mask from the last round's client models, zeroes
the selected weights on the benign average, picks the pruning rate from
benign-client similarity, runs recovery rounds under the R* x P bound and
rate-limits unlearning requests.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from itertools import combinations
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    ConfigurationError,
    IntegrityError,
    MajorityViolationError,
    StateError,
    UsageError,
)
from .fl import (
    Client,
    ClientUpdate,
    RoundObserver,
    ServerState,
    Weighting,
    avg_models,
    remove_clients,
    run_round,
)
from .nn import ModelParams, last_layer_cosine_similarity

logger = logging.getLogger(__name__)


# ============================================================================
# Mask
# ============================================================================

@dataclass(frozen=True)
class UnlearnMask:
    """Per prunable layer, the sorted flat weight indices to zero."""

    entries: Dict[int, np.ndarray]
    pruning_rate: Optional[float] = None

    @classmethod
    def empty(cls) -> "UnlearnMask":
        return cls({})

    @property
    def total(self) -> int:
        return int(sum(idx.size for idx in self.entries.values()))

    @property
    def layer_count(self) -> int:
        return len(self.entries)

    def indices(self, layer_index: int) -> np.ndarray:
        return self.entries.get(layer_index, np.zeros(0, dtype=np.int64))

    def validate(self, model: ModelParams) -> None:
        for layer_index, idx in self.entries.items():
            if not 0 <= layer_index < len(model.layers):
                raise IntegrityError(f"mask names layer {layer_index}, model has {len(model.layers)}")
            layer = model.layers[layer_index]
            if not layer.prunable:
                raise IntegrityError(f"mask touches non-prunable {layer.kind.value} layer {layer_index}")
            if idx.size and (idx.min() < 0 or idx.max() >= layer.weight_count):
                raise IntegrityError(
                    f"mask index out of bounds for layer {layer_index} ({layer.weight_count} weights)"
                )
            if idx.size > 1 and np.any(np.diff(idx) <= 0):
                raise IntegrityError(f"mask indices for layer {layer_index} are not strictly increasing")


def prune_count(pruning_rate: float, weight_count: int) -> int:
    """
    Number of weights to zero in one layer.

    Args:
        pruning_rate: P in (0, 1]
        weight_count: Weights in the layer

    Returns:
        ceil(P * n) clamped to [1, n]; 0 for an empty layer
    """
    if weight_count == 0:
        return 0
    return min(weight_count, max(1, math.ceil(pruning_rate * weight_count - 1e-9)))


def select_top_k(rank: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest ranks, lower flat index first on ties, returned sorted."""
    rank = np.asarray(rank).reshape(-1)
    order = np.lexsort((np.arange(rank.size), -rank))
    return np.sort(order[:k]).astype(np.int64)


def _check_rate(pruning_rate: float) -> None:
    if not (0.0 < pruning_rate <= 1.0):
        raise UsageError(f"pruning rate must lie in (0, 1], got {pruning_rate}")


def mask_from_averages(avg_malicious: ModelParams, avg_benign: ModelParams,
                       global_prev: ModelParams, pruning_rate: float,
                       signed: bool = False) -> UnlearnMask:
    """
    rank = (avg_malicious - avg_benign)^2 * |global_prev| per prunable layer,
    top ceil(P * n) per layer. With `signed` the global weight keeps its sign.
    """
    _check_rate(pruning_rate)
    avg_benign.check_congruent(avg_malicious, "benign and malicious averages")
    avg_benign.check_congruent(global_prev, "averages and the previous global model")

    entries = {}
    for index in global_prev.prunable_layers():
        mal = avg_malicious.layers[index].weights.astype(np.float64)
        ben = avg_benign.layers[index].weights.astype(np.float64)
        ref = global_prev.layers[index].weights.astype(np.float64)
        diff = (mal - ben) ** 2
        rank = diff * (ref if signed else np.abs(ref))
        entries[index] = select_top_k(rank, prune_count(pruning_rate, rank.size))
    return UnlearnMask(entries, pruning_rate)


def generate_mask(local_updates: Sequence[ClientUpdate], malicious_ids: Iterable[int],
                  global_prev: ModelParams, pruning_rate: float,
                  signed: bool = False) -> UnlearnMask:
    """
    Unlearning mask from one round of client models.

    Args:
        local_updates: Every client update of the last round
        malicious_ids: Clients to unlearn; must be a strict minority
        global_prev: Global model those clients trained from
        pruning_rate: P in (0, 1]
        signed: Rank by the signed global weight instead of its magnitude

    Returns:
        UnlearnMask with exactly ceil(P * n) indices per prunable layer
    """
    _check_rate(pruning_rate)
    malicious = frozenset(malicious_ids)
    if not malicious:
        raise UsageError("generate_mask needs at least one malicious client")
    present = {u.client_id for u in local_updates}
    if not malicious <= present:
        raise UsageError(f"no update for clients {sorted(malicious - present)}")
    if 2 * len(malicious) >= len(present):
        raise MajorityViolationError(
            f"{len(malicious)} of {len(present)} clients marked malicious; "
            f"the benign clients must be a strict majority"
        )
    avg_malicious = avg_models(local_updates, malicious, np.float64)
    avg_benign = avg_models(local_updates, present - malicious, np.float64)
    return mask_from_averages(avg_malicious, avg_benign, global_prev, pruning_rate, signed)


def apply_mask(mask: UnlearnMask, avg_benign: ModelParams) -> ModelParams:
    """Copy of avg_benign with the masked weights set to 0.0; everything else bit-identical."""
    mask.validate(avg_benign)
    layers = []
    for index, layer in enumerate(avg_benign.layers):
        weights = layer.weights.copy()
        idx = mask.indices(index)
        if idx.size:
            weights[idx] = 0.0
        layers.append(layer.with_arrays(weights, layer.biases.copy()))
    return ModelParams(layers)


# ============================================================================
# Pruning-rate heuristic
# ============================================================================

@dataclass(frozen=True)
class PruningHeuristicConfig:
    p_min: float = 0.01
    p_max: float = 0.15
    gamma: float = 5.0
    sim_min: float = 0.5
    sim_max: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p_min < self.p_max <= 1.0:
            raise ConfigurationError("pruning needs 0 < p_min < p_max <= 1")
        if self.gamma < 1.0:
            raise ConfigurationError("gamma must be >= 1")
        if not self.sim_min < self.sim_max:
            raise ConfigurationError("sim_min must be below sim_max")


def normalize_similarity(sim: float, cfg: PruningHeuristicConfig = PruningHeuristicConfig()) -> float:
    """
    Map a mean cosine similarity onto [0, 1].

    Args:
        sim: Mean pairwise similarity of the benign updates, in [-1, 1]
        cfg: sim_min maps to 0 and sim_max to 1

    Returns:
        z, clamped to [0, 1]
    """
    z = (sim - cfg.sim_min) / (cfg.sim_max - cfg.sim_min)
    return float(min(1.0, max(0.0, z)))


def pruning_rate(z: float, cfg: PruningHeuristicConfig = PruningHeuristicConfig()) -> float:
    """P = (p_max - p_min) * z^gamma + p_min, evaluated so both endpoints are exact."""
    if not 0.0 <= z <= 1.0:
        raise UsageError(f"normalized similarity must lie in [0, 1], got {z}")
    w = z ** cfg.gamma
    return cfg.p_max * w + cfg.p_min * (1.0 - w)


def estimate_similarity(benign_updates: Sequence[ClientUpdate]) -> float:
    """
    Mean last-layer cosine similarity over all unordered pairs.

    Args:
        benign_updates: At least two updates, taken in client-id order

    Returns:
        Similarity in [-1, 1]
    """
    if len(benign_updates) < 2:
        raise UsageError("similarity needs at least 2 benign updates")
    ordered = sorted(benign_updates, key=lambda u: u.client_id)
    sims = [last_layer_cosine_similarity(a.params, b.params) for a, b in combinations(ordered, 2)]
    return math.fsum(sims) / len(sims)


# ============================================================================
# Rate limiter
# ============================================================================

@dataclass(frozen=True)
class RateLimiter:
    """Pending detections and the round of the last unlearning; T rounds must separate runs."""

    threshold: int = 10
    last_unlearn_round: Optional[int] = None
    pending: FrozenSet[int] = frozenset()

    def next_eligible_round(self) -> Optional[int]:
        if self.last_unlearn_round is None:
            return None
        return self.last_unlearn_round + self.threshold


def rate_limiter_step(rl: RateLimiter, round_index: int,
                      new_detections: Iterable[int]) -> Tuple[RateLimiter, bool, FrozenSet[int]]:
    """
    Advance the limiter by one round.

    New detections join the pending set. Unlearning fires when something is
    pending and at least `threshold` rounds have passed since the last run,
    or no run has happened yet.

    Args:
        rl: Current limiter state
        round_index: Round being closed
        new_detections: Client ids flagged in this round

    Returns:
        (next limiter, whether to unlearn now, clients to unlearn)
    """
    pending = rl.pending | frozenset(new_detections)
    ready = rl.last_unlearn_round is None or round_index - rl.last_unlearn_round >= rl.threshold
    if pending and ready:
        return replace(rl, last_unlearn_round=round_index, pending=frozenset()), True, pending
    return replace(rl, pending=pending), False, frozenset()


# ============================================================================
# Recovery
# ============================================================================

def recovery_bound(r_star: int, pruning_rate: float) -> int:
    """
    Most recovery rounds one unlearning may use.

    Args:
        r_star: Rounds retraining from scratch took to converge (>= 1)
        pruning_rate: P the mask was built with

    Returns:
        ceil(R* x P), at least 1
    """
    if r_star < 1:
        raise UsageError(f"R* must be >= 1, got {r_star}")
    _check_rate(pruning_rate)
    return max(1, math.ceil(r_star * pruning_rate - 1e-9))


class RecoveryMode(str, Enum):
    ADAPTIVE = "adaptive"
    FIXED = "fixed"


@dataclass
class RecoveryPlan:
    """Record of one unlearning execution and the recovery that followed."""

    round_index: int
    clients: Tuple[int, ...]
    strategy: str
    pruning_rate: Optional[float]
    r_star: Optional[int]
    max_rounds: int
    actual_rounds_used: int = 0
    similarity: Optional[float] = None
    pruned: int = 0
    layers: int = 0

    @property
    def bound(self) -> int:
        if self.r_star is not None and self.pruning_rate is not None:
            return recovery_bound(self.r_star, self.pruning_rate)
        return self.max_rounds

    @property
    def within_bound(self) -> bool:
        return self.actual_rounds_used <= self.bound


ModelEvaluator = Callable[[ModelParams], float]


def recover(state: ServerState, clients: Sequence[Client], seed: int, rounds: int,
            mode: Union[str, RecoveryMode] = RecoveryMode.ADAPTIVE,
            target_acc: Optional[float] = None, evaluate_fn: Optional[ModelEvaluator] = None,
            tolerance: float = 0.01, weighting: Union[str, Weighting] = Weighting.UNIFORM,
            observer: Optional[RoundObserver] = None, workers: int = 1) -> Tuple[ServerState, int]:
    """
    Recovery FedAvg rounds with the remaining clients.

    Adaptive mode stops after the first round whose test accuracy reaches
    target_acc - tolerance, and never runs more than `rounds`. Fixed mode
    runs exactly `rounds`.
    """
    mode = RecoveryMode(mode)
    used = 0
    for step in range(1, rounds + 1):
        state.events.record(state.round_index + 1, "recovery", step=step, of=rounds)
        state = run_round(state, clients, seed, weighting, observer, workers)
        used = step
        if (mode == RecoveryMode.ADAPTIVE and target_acc is not None and evaluate_fn is not None
                and evaluate_fn(state.global_model) >= target_acc - tolerance):
            break
    return state, used


# ============================================================================
# Unlearning
# ============================================================================

@dataclass(frozen=True)
class UnlearnConfig:
    pruning: PruningHeuristicConfig = field(default_factory=PruningHeuristicConfig)
    p_opt: Optional[float] = None
    signed_rank: bool = False
    max_recovery_rounds: int = 10
    fixed_recovery_rounds: Optional[int] = None
    tolerance: float = 0.01
    weighting: Weighting = Weighting.UNIFORM

    def __post_init__(self):
        if self.p_opt is not None and not 0.0 < self.p_opt <= 1.0:
            raise ConfigurationError(f"p_opt must lie in (0, 1], got {self.p_opt}")
        if self.max_recovery_rounds < 1:
            raise ConfigurationError("max_recovery_rounds must be >= 1")
        if self.fixed_recovery_rounds is not None and self.fixed_recovery_rounds < 0:
            raise ConfigurationError("fixed_recovery_rounds must be >= 0")


@dataclass(frozen=True)
class UnlearnContext:
    """What one unlearning execution reads from the server state."""

    round_index: int
    to_unlearn: FrozenSet[int]
    targets: FrozenSet[int]
    benign_ids: FrozenSet[int]
    updates: Tuple[ClientUpdate, ...]
    global_prev: ModelParams

    @property
    def benign_updates(self) -> List[ClientUpdate]:
        return [u for u in self.updates if u.client_id in self.benign_ids]


def unlearning_context(state: ServerState, to_unlearn: Iterable[int]) -> UnlearnContext:
    """
    Check that the last round can serve an unlearning request.

    Requested clients without a last-round update are logged and removed
    without contributing to the mask.
    """
    to_unlearn = frozenset(to_unlearn)
    if not state.last_round_updates or state.previous_global is None:
        raise StateError("no client updates from a completed round are stored")
    present = frozenset(u.client_id for u in state.last_round_updates)
    missing = to_unlearn - present
    if missing:
        state.events.warn(state.round_index, "unlearn_missing_update", clients=sorted(missing))
    targets = to_unlearn & present
    if not targets:
        raise StateError(f"none of clients {sorted(to_unlearn)} has an update in the last round")
    if 2 * len(targets) >= len(present):
        raise MajorityViolationError(
            f"unlearning {len(targets)} of {len(present)} clients would leave no benign majority"
        )
    return UnlearnContext(state.round_index, to_unlearn, targets, present - targets,
                          state.last_round_updates, state.previous_global)


def choose_pruning_rate(benign_updates: Sequence[ClientUpdate],
                        cfg: UnlearnConfig) -> Tuple[float, Optional[float]]:
    """(P, similarity). An explicit p_opt wins over the similarity heuristic."""
    similarity = estimate_similarity(benign_updates) if len(benign_updates) >= 2 else None
    if cfg.p_opt is not None:
        return cfg.p_opt, similarity
    if similarity is None:
        raise UsageError("similarity needs at least 2 benign updates")
    return pruning_rate(normalize_similarity(similarity, cfg.pruning), cfg.pruning), similarity


def finish_unlearning(state: ServerState, clients: Sequence[Client], ctx: UnlearnContext,
                      new_global: ModelParams, cfg: UnlearnConfig, seed: int, strategy: str,
                      pruning_rate: Optional[float] = None, mask: Optional[UnlearnMask] = None,
                      similarity: Optional[float] = None, r_star: Optional[int] = None,
                      target_acc: Optional[float] = None,
                      evaluate_fn: Optional[ModelEvaluator] = None,
                      observer: Optional[RoundObserver] = None, workers: int = 1) -> ServerState:
    """Install the unlearned model, drop the clients, log the event and recover."""
    mask = mask if mask is not None else UnlearnMask.empty()
    plan = RecoveryPlan(
        round_index=ctx.round_index,
        clients=tuple(sorted(ctx.to_unlearn)),
        strategy=strategy,
        pruning_rate=pruning_rate,
        r_star=r_star,
        max_rounds=cfg.max_recovery_rounds,
        similarity=similarity,
        pruned=mask.total,
        layers=mask.layer_count,
    )
    state = replace(remove_clients(state, ctx.to_unlearn), global_model=new_global,
                    last_unlearn_round=ctx.round_index)
    state.events.record(
        ctx.round_index, "unlearn",
        P=pruning_rate if pruning_rate is not None else 0.0,
        layers=plan.layers, pruned=plan.pruned,
        clients=list(plan.clients), bound=plan.bound,
    )

    if cfg.fixed_recovery_rounds is not None:
        state, used = recover(state, clients, seed, cfg.fixed_recovery_rounds, RecoveryMode.FIXED,
                              weighting=cfg.weighting, observer=observer, workers=workers)
    else:
        state, used = recover(state, clients, seed, plan.bound, RecoveryMode.ADAPTIVE,
                              target_acc, evaluate_fn, cfg.tolerance, cfg.weighting,
                              observer, workers)
    plan.actual_rounds_used = used
    if not plan.within_bound:
        logger.info(f"recovery used {used} rounds, bound was {plan.bound}")
    return replace(state, recovery_plans=state.recovery_plans + (plan,))


def unlearn_and_recover(state: ServerState, clients: Sequence[Client], to_unlearn: Iterable[int],
                        cfg: UnlearnConfig, seed: int, r_star: Optional[int] = None,
                        target_acc: Optional[float] = None,
                        evaluate_fn: Optional[ModelEvaluator] = None,
                        observer: Optional[RoundObserver] = None, workers: int = 1) -> ServerState:
    """
    Remove the listed clients' influence and recover.

    The mask comes from the last round's updates only. It is applied to the
    benign average, the clients leave the federation and recovery rounds run
    until the stopping rule or ceil(R* x P) rounds (max_recovery_rounds
    when R* is unknown).
    """
    to_unlearn = frozenset(to_unlearn)
    if not to_unlearn:
        state.events.record(state.round_index, "unlearn_skipped", reason="no_clients")
        return state

    ctx = unlearning_context(state, to_unlearn)
    rate, similarity = choose_pruning_rate(ctx.benign_updates, cfg)
    mask = generate_mask(ctx.updates, ctx.targets, ctx.global_prev, rate, cfg.signed_rank)
    pruned = apply_mask(mask, avg_models(ctx.updates, ctx.benign_ids))
    if similarity is not None:
        logger.info(f"benign similarity {similarity:.4f} -> pruning rate {rate:.4f}")
    return finish_unlearning(state, clients, ctx, pruned, cfg, seed, "fedup", rate, mask,
                             similarity, r_star, target_acc, evaluate_fn, observer, workers)
