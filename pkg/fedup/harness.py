"""
Experiment runner.

Executes one configured timeline (poisoned training rounds, oracle
detection injections, rate-limited unlearning, recovery) and produces a
MetricsReport. Sweeps run one experiment per seed in a process pool.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

from .baselines import (
    BaselineKind,
    BaselineSpec,
    RetrainResult,
    retrain_from_scratch,
    unlearn_with_baseline,
)
from .checkpoint import checkpoint_size
from .config import ExperimentConfig, FEDUP_STRATEGY
from .data import (
    AttackKind,
    Dataset,
    PartitionPlan,
    apply_attack,
    gen_synthetic,
    gen_synthetic_images,
    load_idx,
    make_triggered_testset,
    partition,
    poisoned_subset,
    split_dataset,
)
from .errors import UsageError
from .fl import Client, ServerState, run_round, save_round
from .metrics import (
    EventLog,
    MetricsReport,
    RoundMetrics,
    emit_csv,
    emit_event_log,
    emit_summary_json,
)
from .nn import ModelParams, ModelSpec, evaluate, init_model
from .seeding import derive_seed
from .unlearn import (
    RateLimiter,
    RecoveryPlan,
    finish_unlearning,
    rate_limiter_step,
    unlearn_and_recover,
    unlearning_context,
)

logger = logging.getLogger(__name__)


# ============================================================================
# Storage accounting
# ============================================================================

@dataclass(frozen=True)
class StorageModel:
    """Closed-form server storage: one round of updates vs the full update history."""

    client_count: int
    rounds: int
    model_bytes: int
    fedup_bytes: int
    historical_bytes: int
    negation_bytes: int

    @classmethod
    def from_counts(cls, client_count: int, rounds: int, model_bytes: int) -> "StorageModel":
        return cls(
            client_count=client_count,
            rounds=rounds,
            model_bytes=model_bytes,
            fedup_bytes=(client_count + 1) * model_bytes,
            historical_bytes=rounds * client_count * model_bytes,
            negation_bytes=model_bytes,
        )

    @property
    def ratio(self) -> float:
        return self.historical_bytes / self.fedup_bytes

    def to_dict(self) -> Dict:
        return {
            "client_count": self.client_count,
            "rounds": self.rounds,
            "model_bytes": self.model_bytes,
            "fedup_bytes": self.fedup_bytes,
            "historical_bytes": self.historical_bytes,
            "negation_bytes": self.negation_bytes,
            "historical_to_fedup_ratio": self.ratio,
        }


# ============================================================================
# Experiment construction
# ============================================================================

@dataclass
class ExperimentData:
    train: Dataset
    test: Dataset
    plan: PartitionPlan
    clients: List[Client]
    model_spec: ModelSpec
    triggered_test: Optional[Dataset] = None
    malicious_eval: Optional[Dataset] = None

    def client_data(self, client_ids) -> Optional[Dataset]:
        wanted = set(client_ids)
        parts = [c.dataset for c in self.clients if c.client_id in wanted]
        return Dataset.concat(parts) if parts else None


def load_datasets(config: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    """Train and test sets for the configured source."""
    ds = config.dataset
    seed = config.seed
    if ds.kind == "idx":
        train = load_idx(ds.images_path, ds.labels_path, ds.num_classes)
        if ds.test_images_path and ds.test_labels_path:
            return train, load_idx(ds.test_images_path, ds.test_labels_path, ds.num_classes)
        return split_dataset(train, ds.test_fraction, derive_seed(seed, "split"))

    per_class = ds.per_class_count + ds.test_per_class
    if ds.kind == "synthetic":
        full = gen_synthetic(ds.num_classes, ds.dim, per_class, ds.cluster_spread, derive_seed(seed, "data"),
                             ds.noise_dims)
    else:
        full = gen_synthetic_images(ds.num_classes, ds.image_size, per_class, ds.noise,
                                    derive_seed(seed, "data"), ds.channels)
    return split_dataset(full, ds.test_per_class / per_class, derive_seed(seed, "split"))


def model_spec_for(config: ExperimentConfig, input_shape: Tuple[int, ...]) -> ModelSpec:
    m = config.model
    return ModelSpec(m.arch, input_shape, config.dataset.num_classes, m.hidden,
                     m.conv_channels, m.kernel_size, m.input_affine)


def build_experiment(config: ExperimentConfig, events: EventLog) -> ExperimentData:
    """Generate data, partition it, poison the malicious clients and build the clients."""
    train, test = load_datasets(config)
    plan = partition(train, config.partition.scheme, config.client_count,
                     config.partition.alpha, derive_seed(config.seed, "partition"))
    plan.validate(len(train))

    malicious = set(config.malicious_ids)
    clients = []
    for client_id, indices in enumerate(plan.assignment):
        dataset = train.subset(indices)
        if client_id in malicious and config.attack is not None:
            dataset = apply_attack(dataset, config.attack, derive_seed(config.seed, "attack", client_id))
            poisoned = len(poisoned_subset(dataset))
            if poisoned == 0:
                events.warn(0, "poison_skipped", client=client_id)
            else:
                logger.info(f"client {client_id}: {poisoned} of {len(dataset)} samples poisoned")
        t = config.training
        clients.append(Client(client_id, dataset, client_id in malicious,
                              t.local_epochs, t.batch_size, t.learning_rate))

    data = ExperimentData(train, test, plan, clients, model_spec_for(config, train.input_shape))
    attack = config.attack
    if attack is not None and attack.kind == AttackKind.BACKDOOR:
        data.triggered_test = make_triggered_testset(test, attack)
        data.malicious_eval = data.triggered_test
    elif attack is not None and malicious:
        flipped = [poisoned_subset(c.dataset) for c in clients if c.is_malicious]
        flipped = [d for d in flipped if len(d)]
        data.malicious_eval = Dataset.concat(flipped) if flipped else None
    else:
        data.malicious_eval = data.client_data({d.client_id for d in config.detections})
    return data


def compute_attack_success(model: ModelParams, dataset: Optional[Dataset]) -> float:
    """Fraction of samples predicted as their malicious label (trigger target or flipped label)."""
    if dataset is None or len(dataset) == 0:
        raise UsageError("attack success needs a nonempty triggered or flipped set")
    return evaluate(model, dataset)


def storage_report(config: ExperimentConfig, model_bytes: Optional[int] = None) -> StorageModel:
    """
    Storage each scheme would need for this config.

    Args:
        config: Experiment config; client count and rounds drive the totals
        model_bytes: Checkpoint size; derived from a fresh model when omitted

    Returns:
        StorageModel
    """
    if model_bytes is None:
        if config.dataset.kind == "synthetic":
            input_shape = (config.dataset.dim,)
        elif config.dataset.kind == "synthetic_images":
            input_shape = (config.dataset.channels, config.dataset.image_size, config.dataset.image_size)
        else:
            input_shape = load_datasets(config)[0].input_shape
        model_bytes = checkpoint_size(init_model(model_spec_for(config, input_shape), 0))
    return StorageModel.from_counts(config.client_count, config.total_rounds, model_bytes)


# ============================================================================
# Timeline
# ============================================================================

class _Evaluator:
    def __init__(self, config: ExperimentConfig, data: ExperimentData):
        self.config = config
        self.data = data

    def test_acc(self, model: ModelParams) -> float:
        return evaluate(model, self.data.test)

    def malicious_acc(self, model: ModelParams) -> float:
        if self.data.malicious_eval is None:
            return math.nan
        return compute_attack_success(model, self.data.malicious_eval)

    def forgetting_acc(self, model: ModelParams, client_ids) -> Optional[float]:
        forget = self.data.client_data(client_ids)
        return evaluate(model, forget) if forget is not None else None

    def snapshot(self, model: ModelParams, client_ids) -> Dict:
        return {
            "test_acc": self.test_acc(model),
            "malicious_acc": self.malicious_acc(model),
            "forgetting_acc": self.forgetting_acc(model, client_ids),
        }

    def observe(self, state: ServerState) -> RoundMetrics:
        return RoundMetrics(
            round=state.round_index,
            test_acc=self.test_acc(state.global_model),
            malicious_acc=self.malicious_acc(state.global_model),
            storage_bytes=state.storage_counter,
            strategy=self.config.strategy_name,
            seed=self.config.seed,
        )


def _attach_events(rows: Sequence[RoundMetrics], events: EventLog) -> List[RoundMetrics]:
    attached = []
    for row in rows:
        names = list(dict.fromkeys(e.name for e in events.for_round(row.round)))
        attached.append(replace(row, events=tuple(names)))
    return attached


def _row_metrics(row: RoundMetrics) -> Dict:
    return {"test_acc": row.test_acc, "malicious_acc": row.malicious_acc}


class ExperimentRunner:
    """Owns the server state and the rate limiter for one experiment."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.events = EventLog()
        self.data = build_experiment(config, self.events)
        self.evaluator = _Evaluator(config, self.data)
        self.unlearn_cfg = config.unlearn_config()
        self.forget_set: FrozenSet[int] = frozenset(d.client_id for d in config.detections)
        self.pre_detection_acc: Optional[float] = None
        self.retrain: Optional[RetrainResult] = None
        self.baseline_metrics: Optional[Dict] = None
        self.unlearning: List[Dict] = []

    # ------------------------------------------------------------------
    def _ensure_retrain(self) -> None:
        if self.retrain is not None or not self.config.retrain.enabled:
            return
        benign = [c for c in self.data.clients if c.client_id not in self.forget_set]
        logger.info(f"retraining from scratch on {len(benign)} clients for the R* reference")
        self.retrain = retrain_from_scratch(
            benign, self.data.model_spec, self.config.seed, self.config.retrain.max_rounds,
            self.pre_detection_acc, self.evaluator.test_acc,
            weighting=self.config.training.weighting, workers=self.config.workers,
        )
        self.baseline_metrics = self.evaluator.snapshot(self.retrain.model, self.forget_set)

    def _baseline_spec(self) -> BaselineSpec:
        spec = self.config.strategy
        return replace(spec, seed=derive_seed(self.config.seed, "baseline", spec.seed))

    def _unlearn(self, state: ServerState, to_unlearn: FrozenSet[int]) -> ServerState:
        self._ensure_retrain()
        r_star = self.retrain.r_star if self.retrain is not None else None
        before_row = state.metrics[-1]
        before = dict(_row_metrics(before_row),
                      forgetting_acc=self.evaluator.forgetting_acc(state.global_model, to_unlearn))
        target = before_row.test_acc
        observe = self.evaluator.observe
        seed = self.config.seed
        workers = self.config.workers

        if self.config.strategy == FEDUP_STRATEGY:
            state = unlearn_and_recover(state, self.data.clients, to_unlearn, self.unlearn_cfg, seed,
                                        r_star, target, self.evaluator.test_acc, observe, workers)
        elif self.config.strategy.kind == BaselineKind.RETRAIN:
            ctx = unlearning_context(state, to_unlearn)
            state = finish_unlearning(state, self.data.clients, ctx, self.retrain.model.copy(),
                                      self.unlearn_cfg, seed, BaselineKind.RETRAIN.value,
                                      r_star=r_star, target_acc=target,
                                      evaluate_fn=self.evaluator.test_acc,
                                      observer=observe, workers=workers)
        else:
            state = unlearn_with_baseline(state, self.data.clients, to_unlearn, self._baseline_spec(),
                                          self.unlearn_cfg, seed, r_star, target,
                                          self.evaluator.test_acc, observe, workers)

        plan: RecoveryPlan = state.recovery_plans[-1]
        if plan.actual_rounds_used > 0:
            after = _row_metrics(state.metrics[-1])
        else:
            after = {"test_acc": self.evaluator.test_acc(state.global_model),
                     "malicious_acc": self.evaluator.malicious_acc(state.global_model)}
        after["forgetting_acc"] = self.evaluator.forgetting_acc(state.global_model, to_unlearn)

        self.unlearning.append({
            "round": plan.round_index,
            "clients": list(plan.clients),
            "strategy": plan.strategy,
            "P": plan.pruning_rate,
            "similarity": plan.similarity,
            "layers": plan.layers,
            "pruned": plan.pruned,
            "before": before,
            "after": after,
            "baseline_B": self.baseline_metrics,
            "R_star": r_star,
            "R_star_converged": self.retrain.converged if self.retrain is not None else None,
            "R_rec": plan.actual_rounds_used,
            "bound": plan.bound,
            "within_bound": plan.within_bound,
        })
        return state

    # ------------------------------------------------------------------
    def run(self) -> MetricsReport:
        config = self.config
        model = init_model(self.data.model_spec, derive_seed(config.seed, "init"))
        state = ServerState.initial(model, range(config.client_count), self.events)
        limiter = RateLimiter(threshold=config.rate_limit_T)
        schedule = list(config.detections)

        for _ in range(config.total_rounds):
            state = run_round(state, self.data.clients, config.seed, config.training.weighting,
                              self.evaluator.observe, config.workers)
            if config.checkpoint_dir:
                save_round(state, Path(config.checkpoint_dir) / config.run_id / f"seed_{config.seed}")

            due = [d for d in schedule if d.round <= state.round_index]
            schedule = [d for d in schedule if d.round > state.round_index]
            new = set()
            for detection in due:
                if detection.client_id in state.enrolled:
                    new.add(detection.client_id)
                    self.events.record(state.round_index, "detection", client=detection.client_id)
                else:
                    self.events.record(state.round_index, "detection_ignored", client=detection.client_id)
            if new and self.pre_detection_acc is None:
                self.pre_detection_acc = state.metrics[-1].test_acc
            state = replace(state, pending_detections=state.pending_detections | frozenset(new))

            limiter, fire, to_unlearn = rate_limiter_step(limiter, state.round_index, new)
            if fire:
                state = self._unlearn(state, to_unlearn)
            elif limiter.pending and new:
                self.events.record(state.round_index, "rate_limited", pending=sorted(limiter.pending),
                                   next_round=limiter.next_eligible_round())

        rows = _attach_events(state.metrics, self.events)
        summary = self._summary(state, rows)
        return MetricsReport(config.run_id, config.seed, config.strategy_name, rows, summary,
                             self.events.lines())

    def _summary(self, state: ServerState, rows: Sequence[RoundMetrics]) -> Dict:
        model_bytes = checkpoint_size(state.global_model)
        storage = storage_report(self.config, model_bytes)
        final = _row_metrics(rows[-1]) if rows else {}
        return {
            "run_id": self.config.run_id,
            "seed": self.config.seed,
            "strategy": self.config.strategy_name,
            "total_rounds": self.config.total_rounds,
            "rounds_run": state.round_index,
            "final": final,
            "pre_detection_test_acc": self.pre_detection_acc,
            "pending_detections": sorted(state.pending_detections),
            "storage": storage.to_dict(),
            "unlearning": self.unlearning,
            "config": self.config.to_dict(),
        }


def run_experiment(config: ExperimentConfig) -> MetricsReport:
    """Run one seeded experiment end to end."""
    logger.info(f"Running {config.run_id} (seed {config.seed}, strategy {config.strategy_name})")
    return ExperimentRunner(config).run()


# ============================================================================
# Output and sweeps
# ============================================================================

def run_directory(out_dir: Union[str, Path], run_id: str, seed: int) -> Path:
    return Path(out_dir) / run_id / f"seed_{seed}"


def write_outputs(report: MetricsReport, out_dir: Union[str, Path]) -> Dict[str, str]:
    """Write the three result files under <out_dir>/<run_id>/seed_<n>."""
    directory = run_directory(out_dir, report.run_id, report.seed)
    return {
        "metrics_csv": str(emit_csv(report, directory / "metrics.csv")),
        "summary_json": str(emit_summary_json(report, directory / "summary.json")),
        "event_log": str(emit_event_log(report, directory / "events.log")),
    }


def _run_and_write(config: ExperimentConfig, out_dir: str) -> Dict[str, str]:
    return write_outputs(run_experiment(config), out_dir)


def parse_seed_range(text: str) -> List[int]:
    """'a..b' (inclusive) or a comma list."""
    try:
        if ".." in text:
            start, end = text.split("..", 1)
            seeds = list(range(int(start), int(end) + 1))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise UsageError(f"cannot parse seeds '{text}'") from e
    if not seeds:
        raise UsageError(f"seed range '{text}' is empty")
    return seeds


def run_sweep(config: ExperimentConfig, seeds: Sequence[int], out_dir: Union[str, Path],
              workers: int = 1) -> List[Dict[str, str]]:
    """One experiment per seed; each writes its own files, results come back in seed order."""
    configs = [replace(config, seed=int(seed)) for seed in seeds]
    if workers <= 1:
        return [_run_and_write(c, str(out_dir)) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_and_write, configs, [str(out_dir)] * len(configs)))
