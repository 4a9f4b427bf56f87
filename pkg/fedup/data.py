"""
Datasets, client partitioning and poisoning transforms.

Synthetic Gaussian-cluster tasks are the default workload. An IDX loader
covers small real image datasets. Poisoning is applied per client as
label flipping (source -> target class) or a backdoor trigger.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import CheckpointFormatError, ConfigurationError, IntegrityError, UsageError

logger = logging.getLogger(__name__)

IMAGE_MAX_INTENSITY = 1.0
VECTOR_SENTINEL = 4.0
SYNTHETIC_IMAGE_CEILING = 0.8


# ============================================================================
# Dataset
# ============================================================================

class Provenance(IntEnum):
    CLEAN = 0
    LABEL_FLIPPED = 1
    BACKDOORED = 2


@dataclass
class Dataset:
    """Samples with labels and a provenance tag per sample."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    tags: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.tags is None:
            self.tags = np.zeros(self.labels.size, dtype=np.uint8)
        self.tags = np.asarray(self.tags, dtype=np.uint8).reshape(-1)
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if not (self.inputs.shape[0] == self.labels.size == self.tags.size):
            raise IntegrityError(
                f"dataset arrays disagree: {self.inputs.shape[0]} inputs, "
                f"{self.labels.size} labels, {self.tags.size} tags"
            )

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, self.tags[idx])

    def tag_count(self, tag: Provenance) -> int:
        return int(np.count_nonzero(self.tags == tag))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @classmethod
    def concat(cls, datasets: Sequence["Dataset"]) -> "Dataset":
        if not datasets:
            raise UsageError("nothing to concatenate")
        return cls(
            np.concatenate([d.inputs for d in datasets]),
            np.concatenate([d.labels for d in datasets]),
            datasets[0].num_classes,
            np.concatenate([d.tags for d in datasets]),
        )


def gen_synthetic(num_classes: int, dim: int, per_class_count: int,
                  cluster_spread: float, seed: int, noise_dims: int = 0) -> Dataset:
    """
    Gaussian clusters: one N(0, 1) mean per class, isotropic spread around it.

    Args:
        num_classes: Number of classes (>= 2)
        dim: Feature dimension (>= 2)
        per_class_count: Samples drawn per class
        cluster_spread: Standard deviation of every cluster (> 0)
        seed: Generator seed
        noise_dims: Trailing features whose mean is 0 for every class, so
            they carry no class signal

    Returns:
        Dataset with samples in shuffled order
    """
    if cluster_spread <= 0:
        raise UsageError(f"cluster_spread must be positive, got {cluster_spread}")
    if num_classes < 2 or dim < 2 or per_class_count < 1:
        raise UsageError("gen_synthetic needs num_classes >= 2, dim >= 2, per_class_count >= 1")
    if not 0 <= noise_dims < dim:
        raise UsageError(f"noise_dims must lie in [0, {dim}), got {noise_dims}")

    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 1.0, size=(num_classes, dim))
    means[:, dim - noise_dims:] = 0.0
    labels = np.repeat(np.arange(num_classes), per_class_count)
    inputs = means[labels] + rng.normal(0.0, cluster_spread, size=(labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(inputs[order].astype(np.float32), labels[order], num_classes)


def gen_synthetic_images(num_classes: int, image_size: int, per_class_count: int,
                         noise: float, seed: int, channels: int = 1) -> Dataset:
    """Image-shaped clusters around per-class prototypes, values kept in [0, 0.8]."""
    if noise <= 0:
        raise UsageError(f"noise must be positive, got {noise}")
    if num_classes < 2 or image_size < 2 or per_class_count < 1 or channels < 1:
        raise UsageError("gen_synthetic_images got a degenerate shape")

    rng = np.random.default_rng(seed)
    shape = (channels, image_size, image_size)
    prototypes = rng.uniform(0.0, SYNTHETIC_IMAGE_CEILING, size=(num_classes,) + shape)
    labels = np.repeat(np.arange(num_classes), per_class_count)
    inputs = prototypes[labels] + rng.normal(0.0, noise, size=(labels.size,) + shape)
    # clip after the cast; float32(0.8) rounds up
    inputs = np.clip(inputs.astype(np.float32), np.float32(0.0), np.float32(SYNTHETIC_IMAGE_CEILING))
    order = rng.permutation(labels.size)
    return Dataset(inputs[order], labels[order], num_classes)


def split_dataset(dataset: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Stratified train/test split: each class contributes round(fraction * count) test samples."""
    if not 0.0 < test_fraction < 1.0:
        raise UsageError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for cls in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == cls)
        rng.shuffle(idx)
        n_test = int(math.floor(test_fraction * idx.size + 0.5))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx))
    if train.size == 0 or test.size == 0:
        raise UsageError("split leaves an empty train or test set")
    return dataset.subset(train), dataset.subset(test)


# ============================================================================
# IDX loader
# ============================================================================

IDX_UBYTE = 0x08


def _read_idx(path: Union[str, Path]) -> np.ndarray:
    payload = Path(path).read_bytes()
    if len(payload) < 4 or payload[0] != 0 or payload[1] != 0:
        raise CheckpointFormatError(f"{path}: not an IDX file")
    if payload[2] != IDX_UBYTE:
        raise CheckpointFormatError(f"{path}: only unsigned-byte IDX payloads are supported")
    ndim = payload[3]
    header = 4 + 4 * ndim
    if len(payload) < header:
        raise CheckpointFormatError(f"{path}: truncated IDX header")
    dims = tuple(int(d) for d in np.frombuffer(payload[4:header], dtype=">u4"))
    expected = int(np.prod(dims))
    if len(payload) - header != expected:
        raise CheckpointFormatError(
            f"{path}: expected {expected} payload bytes, found {len(payload) - header}"
        )
    return np.frombuffer(payload[header:], dtype=np.uint8).reshape(dims)


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path],
             num_classes: Optional[int] = None) -> Dataset:
    """Load an IDX image/label pair as N x 1 x H x W reals in [0, 1]."""
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise CheckpointFormatError("IDX images must be N x H x W and labels N")
    if images.shape[0] != labels.shape[0]:
        raise CheckpointFormatError(
            f"IDX image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    if num_classes is None:
        num_classes = max(2, int(labels.max()) + 1)
    inputs = (images.astype(np.float32) / 255.0)[:, None, :, :]
    logger.info(f"Loaded {labels.size} IDX samples of shape {inputs.shape[1:]}")
    return Dataset(inputs, labels.astype(np.int64), num_classes)


# ============================================================================
# Partitioning
# ============================================================================

class PartitionScheme(str, Enum):
    IID = "iid"
    DIRICHLET = "dirichlet"


@dataclass
class PartitionPlan:
    client_count: int
    assignment: List[List[int]]
    scheme: PartitionScheme
    alpha: Optional[float]
    seed: int

    def validate(self, sample_count: int) -> None:
        """Disjointness, full coverage and nonempty clients."""
        if len(self.assignment) != self.client_count:
            raise IntegrityError("assignment length differs from client_count")
        seen = np.zeros(sample_count, dtype=np.int64)
        for client_id, indices in enumerate(self.assignment):
            if not indices:
                raise IntegrityError(f"client {client_id} received no samples")
            np.add.at(seen, np.asarray(indices, dtype=np.int64), 1)
        if not np.all(seen == 1):
            raise IntegrityError("partition is not a disjoint cover of the dataset")


def partition(dataset: Dataset, scheme: Union[str, PartitionScheme], client_count: int,
              alpha: Optional[float], seed: int) -> PartitionPlan:
    """
    Split sample indices across clients.

    IID shuffles and deals equal shares, remainder to the lowest ids.
    Dirichlet draws per-class client proportions from Dir(alpha); any
    empty client then takes one sample from the largest client (lowest id
    on ties) until every client holds data.
    """
    scheme = PartitionScheme(scheme)
    n = len(dataset)
    if client_count < 2:
        raise UsageError("partition needs at least 2 clients")
    if client_count > n:
        raise UsageError(f"{client_count} clients but only {n} samples")
    rng = np.random.default_rng(seed)

    if scheme == PartitionScheme.IID:
        order = rng.permutation(n)
        base, remainder = divmod(n, client_count)
        sizes = [base + 1 if i < remainder else base for i in range(client_count)]
        cuts = np.cumsum(sizes)[:-1]
        buckets = [sorted(int(i) for i in chunk) for chunk in np.split(order, cuts)]
        return PartitionPlan(client_count, buckets, scheme, None, seed)

    if alpha is None or alpha <= 0:
        raise UsageError(f"dirichlet partition needs alpha > 0, got {alpha}")
    proportions = rng.dirichlet(np.full(client_count, float(alpha)), size=dataset.num_classes)
    buckets: List[List[int]] = [[] for _ in range(client_count)]
    for cls in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == cls)
        rng.shuffle(idx)
        cuts = (np.cumsum(proportions[cls])[:-1] * idx.size).astype(np.int64)
        for client_id, chunk in enumerate(np.split(idx, cuts)):
            buckets[client_id].extend(int(i) for i in chunk)
    buckets = [sorted(bucket) for bucket in buckets]

    while any(not bucket for bucket in buckets):
        sizes = np.array([len(bucket) for bucket in buckets])
        donor = int(np.argmax(sizes))
        recipient = next(i for i, bucket in enumerate(buckets) if not bucket)
        buckets[recipient].append(buckets[donor].pop())
        logger.debug(f"dirichlet repair: client {recipient} took one sample from client {donor}")

    return PartitionPlan(client_count, buckets, scheme, float(alpha), seed)


# ============================================================================
# Poisoning
# ============================================================================

class AttackKind(str, Enum):
    LABEL_FLIP = "label_flip"
    BACKDOOR = "backdoor"


@dataclass
class TriggerSpec:
    """
    Backdoor trigger. Images: a size x size block in the bottom-right
    corner of every channel. Vectors: `feature_indices`, default the last
    `size` features.
    """

    size: int = 3
    sentinel: Optional[float] = None
    feature_indices: Optional[Tuple[int, ...]] = None


@dataclass
class AttackSpec:
    kind: AttackKind
    poison_fraction: float = 0.10
    source_class: Optional[int] = None
    target_class: int = 0
    trigger: TriggerSpec = field(default_factory=TriggerSpec)

    def __post_init__(self):
        self.kind = AttackKind(self.kind)
        if not 0.0 < self.poison_fraction <= 1.0:
            raise ConfigurationError(f"poison_fraction must lie in (0, 1], got {self.poison_fraction}")
        if self.kind == AttackKind.LABEL_FLIP:
            if self.source_class is None:
                raise ConfigurationError("label_flip needs a source_class")
            if self.source_class == self.target_class:
                raise ConfigurationError("source_class and target_class must differ")

    def check_classes(self, num_classes: int) -> None:
        for name in ("source_class", "target_class"):
            value = getattr(self, name)
            if value is not None and not 0 <= value < num_classes:
                raise ConfigurationError(f"{name} {value} outside [0, {num_classes})")


def poison_budget(sample_count: int, fraction: float) -> int:
    """floor(fraction * count), guarded against binary rounding just below an integer."""
    return int(math.floor(fraction * sample_count + 1e-9))


def stamp_trigger(inputs: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Return a copy of `inputs` with the trigger written into every sample."""
    stamped = np.array(inputs, dtype=np.float32, copy=True)
    if stamped.ndim == 4:
        _, _, height, width = stamped.shape
        size = trigger.size
        if size < 1 or size > height or size > width:
            raise ConfigurationError(f"{size}x{size} trigger does not fit a {height}x{width} image")
        sentinel = IMAGE_MAX_INTENSITY if trigger.sentinel is None else trigger.sentinel
        stamped[:, :, height - size:, width - size:] = sentinel
        return stamped
    if stamped.ndim == 2:
        dim = stamped.shape[1]
        indices = trigger.feature_indices
        if indices is None:
            if trigger.size < 1 or trigger.size > dim:
                raise ConfigurationError(f"trigger of {trigger.size} features exceeds dim {dim}")
            indices = tuple(range(dim - trigger.size, dim))
        if any(not 0 <= i < dim for i in indices):
            raise ConfigurationError(f"trigger features {indices} outside dim {dim}")
        sentinel = VECTOR_SENTINEL if trigger.sentinel is None else trigger.sentinel
        stamped[:, list(indices)] = sentinel
        return stamped
    raise ConfigurationError(f"cannot place a trigger on inputs of rank {stamped.ndim}")


def apply_label_flip(client_dataset: Dataset, spec: AttackSpec, seed: int) -> Dataset:
    """
    Relabel floor(poison_fraction * client size) source-class samples to
    the target class, capped at the number of source samples available.
    """
    if spec.kind != AttackKind.LABEL_FLIP:
        raise UsageError("apply_label_flip needs a label_flip spec")
    candidates = np.flatnonzero(client_dataset.labels == spec.source_class)
    if candidates.size == 0:
        logger.warning(f"no samples of class {spec.source_class}; label flip skipped")
        return client_dataset

    budget = min(poison_budget(len(client_dataset), spec.poison_fraction), candidates.size)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(candidates, size=budget, replace=False))

    labels = client_dataset.labels.copy()
    tags = client_dataset.tags.copy()
    labels[chosen] = spec.target_class
    tags[chosen] = Provenance.LABEL_FLIPPED
    return replace(client_dataset, labels=labels, tags=tags)


def apply_backdoor(client_dataset: Dataset, spec: AttackSpec, seed: int) -> Dataset:
    """Stamp the trigger on floor(poison_fraction * size) seeded samples and relabel them."""
    if spec.kind != AttackKind.BACKDOOR:
        raise UsageError("apply_backdoor needs a backdoor spec")
    budget = poison_budget(len(client_dataset), spec.poison_fraction)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(client_dataset), size=budget, replace=False))

    inputs = client_dataset.inputs.copy()
    stamped = stamp_trigger(inputs[chosen], spec.trigger)
    inputs[chosen] = stamped
    labels = client_dataset.labels.copy()
    tags = client_dataset.tags.copy()
    labels[chosen] = spec.target_class
    tags[chosen] = Provenance.BACKDOORED
    return replace(client_dataset, inputs=inputs, labels=labels, tags=tags)


def make_triggered_testset(clean_testset: Dataset, spec: AttackSpec) -> Dataset:
    """Every test sample triggered and labelled with the target class."""
    if spec.kind != AttackKind.BACKDOOR:
        raise UsageError("a triggered test set needs a backdoor spec")
    n = len(clean_testset)
    return Dataset(
        stamp_trigger(clean_testset.inputs, spec.trigger),
        np.full(n, spec.target_class, dtype=np.int64),
        clean_testset.num_classes,
        np.full(n, Provenance.BACKDOORED, dtype=np.uint8),
    )


def poisoned_subset(dataset: Dataset) -> Dataset:
    """Samples tagged as flipped or triggered."""
    return dataset.subset(np.flatnonzero(dataset.tags != Provenance.CLEAN))


def apply_attack(client_dataset: Dataset, spec: AttackSpec, seed: int) -> Dataset:
    """Dispatch to label flipping or the backdoor by `spec.kind`."""
    if spec.kind == AttackKind.LABEL_FLIP:
        return apply_label_flip(client_dataset, spec, seed)
    return apply_backdoor(client_dataset, spec, seed)
