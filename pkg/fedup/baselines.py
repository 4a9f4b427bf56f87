"""
Comparison strategies: retrain from scratch, natural forgetting, random
pruning, malicious-magnitude pruning and first-layer weight negation.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, UsageError
from .fl import Client, RoundObserver, ServerState, Weighting, avg_models, run_round
from .metrics import EventLog
from .nn import ModelParams, ModelSpec, init_model
from .seeding import derive_seed
from .unlearn import (
    ModelEvaluator,
    UnlearnConfig,
    UnlearnMask,
    apply_mask,
    finish_unlearning,
    prune_count,
    select_top_k,
    unlearning_context,
)

logger = logging.getLogger(__name__)


class BaselineKind(str, Enum):
    RETRAIN = "retrain"
    NATURAL_FORGETTING = "natural_forgetting"
    RANDOM_PRUNE = "random_prune"
    MALICIOUS_MAGNITUDE_PRUNE = "malicious_magnitude_prune"
    WEIGHT_NEGATION = "weight_negation"


PRUNING_KINDS = (BaselineKind.RANDOM_PRUNE, BaselineKind.MALICIOUS_MAGNITUDE_PRUNE)


@dataclass(frozen=True)
class BaselineSpec:
    kind: BaselineKind
    P: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", BaselineKind(self.kind))
        prunes = self.kind in PRUNING_KINDS
        if prunes and self.P is None:
            raise ConfigurationError(f"{self.kind.value} needs a pruning rate P")
        if not prunes and self.P is not None:
            raise ConfigurationError(f"{self.kind.value} does not take a pruning rate")
        if prunes and not 0.0 < self.P <= 1.0:
            raise ConfigurationError(f"P must lie in (0, 1], got {self.P}")


# ============================================================================
# Retrain from scratch
# ============================================================================

@dataclass
class RetrainResult:
    model: ModelParams
    r_star: int
    converged: bool
    history: List[float] = field(default_factory=list)


def retrain_from_scratch(clients: Sequence[Client], model_spec: ModelSpec, seed: int,
                         max_rounds: int, target_acc: Optional[float] = None,
                         evaluate_fn: Optional[ModelEvaluator] = None, tolerance: float = 0.01,
                         weighting: Union[str, Weighting] = Weighting.UNIFORM,
                         workers: int = 1) -> RetrainResult:
    """
    FedAvg from a fresh initialisation over the given clients only.

    R* is the first round whose test accuracy is within `tolerance` of
    target_acc. Without convergence the run stops at max_rounds and the
    result is flagged.
    """
    if len(clients) < 2:
        raise UsageError("retraining needs at least 2 clients")
    if max_rounds < 1:
        raise UsageError("max_rounds must be >= 1")

    model = init_model(model_spec, derive_seed(seed, "init"))
    state = ServerState.initial(model, (c.client_id for c in clients), EventLog())
    history: List[float] = []
    for _ in range(max_rounds):
        state = run_round(state, clients, seed, weighting, workers=workers)
        if evaluate_fn is None:
            continue
        history.append(evaluate_fn(state.global_model))
        if target_acc is not None and history[-1] >= target_acc - tolerance:
            logger.info(f"retrain converged after {state.round_index} rounds")
            return RetrainResult(state.global_model, state.round_index, True, history)

    logger.warning(f"retrain did not reach the target within {max_rounds} rounds")
    return RetrainResult(state.global_model, state.round_index, False, history)


# ============================================================================
# Masks and negation
# ============================================================================

def random_mask(model: ModelParams, P: float, seed: int) -> UnlearnMask:
    """Uniformly random ceil(P * n) indices per prunable layer."""
    rng = np.random.default_rng(seed)
    entries = {}
    for index in model.prunable_layers():
        n = model.layers[index].weight_count
        entries[index] = np.sort(rng.choice(n, size=prune_count(P, n), replace=False)).astype(np.int64)
    return UnlearnMask(entries, P)


def malicious_magnitude_mask(avg_malicious: ModelParams, P: float) -> UnlearnMask:
    """Top ceil(P * n) indices by |avg_malicious| per prunable layer."""
    entries = {}
    for index in avg_malicious.prunable_layers():
        magnitude = np.abs(avg_malicious.layers[index].weights.astype(np.float64))
        entries[index] = select_top_k(magnitude, prune_count(P, magnitude.size))
    return UnlearnMask(entries, P)


def negate_first_layer(model: ModelParams) -> ModelParams:
    """
    Flip the sign of the first prunable layer's weights.

    Args:
        model: Model to negate; left untouched

    Returns:
        Copy with the first dense or conv2d weight tensor negated and
        every bias and other layer unchanged
    """
    prunable = model.prunable_layers()
    if not prunable:
        raise UsageError("model has no dense or conv2d layer to negate")
    first = prunable[0]
    layers = [layer.copy() for layer in model.layers]
    layers[first] = layers[first].with_arrays(-layers[first].weights, layers[first].biases)
    return ModelParams(layers)


def natural_forgetting(state: ServerState, clients_minus_malicious: Sequence[Client], rounds: int,
                       seed: int = 0, weighting: Union[str, Weighting] = Weighting.UNIFORM,
                       observer: Optional[RoundObserver] = None, workers: int = 1) -> ServerState:
    """Keep running FedAvg without the removed clients and without pruning."""
    for step in range(1, rounds + 1):
        state.events.record(state.round_index + 1, "natural_forgetting", step=step, of=rounds)
        state = run_round(state, clients_minus_malicious, seed, weighting, observer, workers)
    return state


# ============================================================================
# Timeline slot
# ============================================================================

def unlearn_with_baseline(state: ServerState, clients: Sequence[Client], to_unlearn: Iterable[int],
                          spec: BaselineSpec, cfg: UnlearnConfig, seed: int,
                          r_star: Optional[int] = None, target_acc: Optional[float] = None,
                          evaluate_fn: Optional[ModelEvaluator] = None,
                          observer: Optional[RoundObserver] = None,
                          workers: int = 1) -> ServerState:
    """
    Run a comparison strategy where FedUP would run.

    The pruning baselines apply their mask to the benign average, weight
    negation flips the first prunable layer of the current global model and
    natural forgetting drops the clients and keeps training for the whole
    recovery budget without an early stop. Otherwise recovery follows the
    same rules as FedUP.
    """
    to_unlearn = frozenset(to_unlearn)
    if spec.kind == BaselineKind.RETRAIN:
        raise UsageError("retrain is not applied in place; use retrain_from_scratch")
    if not to_unlearn:
        state.events.record(state.round_index, "unlearn_skipped", reason="no_clients")
        return state

    ctx = unlearning_context(state, to_unlearn)
    if spec.kind == BaselineKind.NATURAL_FORGETTING:
        state = finish_unlearning(state, clients, ctx, state.global_model,
                                  replace(cfg, fixed_recovery_rounds=0), seed, spec.kind.value,
                                  r_star=r_star, observer=observer, workers=workers)
        plan = state.recovery_plans[-1]
        rounds = cfg.fixed_recovery_rounds if cfg.fixed_recovery_rounds is not None else plan.bound
        remaining = [c for c in clients if c.client_id in state.enrolled]
        state = natural_forgetting(state, remaining, rounds, seed, cfg.weighting, observer, workers)
        plan.actual_rounds_used = rounds
        return state

    mask = None
    if spec.kind == BaselineKind.WEIGHT_NEGATION:
        new_global = negate_first_layer(state.global_model)
    else:
        avg_benign = avg_models(ctx.updates, ctx.benign_ids)
        if spec.kind == BaselineKind.RANDOM_PRUNE:
            mask = random_mask(avg_benign, spec.P, derive_seed(spec.seed, "random_mask", ctx.round_index))
        else:
            mask = malicious_magnitude_mask(avg_models(ctx.updates, ctx.targets, np.float64), spec.P)
        new_global = apply_mask(mask, avg_benign)

    return finish_unlearning(state, clients, ctx, new_global, cfg, seed, spec.kind.value,
                             spec.P, mask, None, r_star, target_acc, evaluate_fn,
                             observer, workers)
