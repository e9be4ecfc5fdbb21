"""Task sequences and client partitions.

Classes are split evenly into disjoint per-task label sets; within each
task the training samples are spread across clients either evenly
(round-robin per class) or with per-class Dirichlet proportions, which
skews label distributions the way real federated populations do. All
splits are pure functions of (corpus labels, spec, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus
from .rng import stream


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "dirichlet"  # "iid" | "dirichlet"
    alpha: float = 0.5
    clients: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("iid", "dirichlet"):
            raise ValueError(f"partition mode must be iid or dirichlet, got {self.mode!r}")
        if self.alpha <= 0:
            raise ValueError("dirichlet alpha must be > 0")
        if self.clients < 1:
            raise ValueError("client count must be >= 1")


@dataclass
class TaskSequencePlan:
    """Everything downstream phases need to know about who holds what."""

    n_tasks: int
    label_sets: list[list[int]]
    client_shards: list[list[np.ndarray]]  # [task][client] -> train corpus indices
    test_by_class: dict[int, np.ndarray]
    client_test_shards: list[list[np.ndarray]] = field(default_factory=list)

    def all_classes(self) -> list[int]:
        return sorted(c for ys in self.label_sets for c in ys)

    def seen_classes(self, task: int) -> list[int]:
        return sorted(c for ys in self.label_sets[: task + 1] for c in ys)

    def to_jsonable(self) -> dict:
        return {
            "n_tasks": self.n_tasks,
            "label_sets": [[int(c) for c in ys] for ys in self.label_sets],
            "client_shards": [
                [[int(i) for i in shard] for shard in task] for task in self.client_shards
            ],
            "test_by_class": {str(c): [int(i) for i in idx] for c, idx in self.test_by_class.items()},
            "client_test_shards": [
                [[int(i) for i in shard] for shard in task] for task in self.client_test_shards
            ],
        }

    @classmethod
    def from_jsonable(cls, obj: dict) -> "TaskSequencePlan":
        return cls(
            n_tasks=int(obj["n_tasks"]),
            label_sets=[[int(c) for c in ys] for ys in obj["label_sets"]],
            client_shards=[
                [np.asarray(shard, dtype=np.int64) for shard in task] for task in obj["client_shards"]
            ],
            test_by_class={int(c): np.asarray(idx, dtype=np.int64) for c, idx in obj["test_by_class"].items()},
            client_test_shards=[
                [np.asarray(shard, dtype=np.int64) for shard in task]
                for task in obj.get("client_test_shards", [])
            ],
        )


def split_tasks(classes: list[int], n_tasks: int, seed: int) -> list[list[int]]:
    """Even, seeded split of classes into n_tasks disjoint sorted label sets."""
    classes = sorted(int(c) for c in classes)
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    remainder = len(classes) % n_tasks
    if remainder != 0:
        raise ValueError(
            f"{len(classes)} classes cannot be split into {n_tasks} even tasks (remainder {remainder})"
        )
    per_task = len(classes) // n_tasks
    order = stream(seed, "task-split").permutation(len(classes))
    permuted = [classes[i] for i in order]
    return [sorted(permuted[t * per_task : (t + 1) * per_task]) for t in range(n_tasks)]


def holdout_split(corpus: Corpus, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified train/test index split."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    train, test = [], []
    for label in corpus.classes():
        idx = corpus.indices_of(label)
        if idx.size < 2:
            raise ValueError(f"class {label} has {idx.size} samples; need at least 2 to hold out")
        n_test = int(round(test_fraction * idx.size))
        n_test = min(max(n_test, 1), idx.size - 1)
        shuffled = stream(seed, "holdout", label).permutation(idx)
        test.append(np.sort(shuffled[:n_test]))
        train.append(np.sort(shuffled[n_test:]))
    return np.concatenate(train), np.concatenate(test)


def largest_remainder_counts(proportions: np.ndarray, n: int) -> np.ndarray:
    """Integer allocation of n items by proportions; remainders favor largest fraction, then lowest index."""
    raw = proportions * n
    counts = np.floor(raw).astype(np.int64)
    short = n - int(counts.sum())
    if short > 0:
        fractions = raw - counts
        order = np.lexsort((np.arange(len(counts)), -fractions))
        counts[order[:short]] += 1
    return counts


def partition_class(indices: np.ndarray, spec: PartitionSpec, label: int, purpose: str = "train") -> list[np.ndarray]:
    """Assign one class's sample indices to clients."""
    rng = stream(spec.seed, "partition", purpose, label)
    shuffled = rng.permutation(np.asarray(indices, dtype=np.int64))
    if spec.mode == "iid":
        return [np.sort(shuffled[j :: spec.clients]) for j in range(spec.clients)]
    proportions = rng.dirichlet(np.full(spec.clients, spec.alpha))
    counts = largest_remainder_counts(proportions, shuffled.size)
    offsets = np.concatenate(([0], np.cumsum(counts)))
    return [np.sort(shuffled[offsets[j] : offsets[j + 1]]) for j in range(spec.clients)]


def partition_task(
    corpus: Corpus, train_indices: np.ndarray, label_set: list[int], spec: PartitionSpec, purpose: str = "train"
) -> list[np.ndarray]:
    """Per-client shards over all classes of one task."""
    train_labels = corpus.labels[train_indices]
    shards: list[list[np.ndarray]] = [[] for _ in range(spec.clients)]
    for label in label_set:
        class_idx = train_indices[train_labels == label]
        if class_idx.size == 0:
            raise ValueError(f"class {label} has no training samples to partition")
        for j, part in enumerate(partition_class(class_idx, spec, label, purpose)):
            shards[j].append(part)
    return [np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64) for parts in shards]


def build_plan(
    corpus: Corpus, n_tasks: int, spec: PartitionSpec, test_fraction: float, seed: int
) -> TaskSequencePlan:
    train_idx, test_idx = holdout_split(corpus, test_fraction, seed)
    label_sets = split_tasks(corpus.classes(), n_tasks, seed)
    test_labels = corpus.labels[test_idx]
    plan = TaskSequencePlan(
        n_tasks=n_tasks,
        label_sets=label_sets,
        client_shards=[partition_task(corpus, train_idx, ys, spec, "train") for ys in label_sets],
        test_by_class={int(c): np.sort(test_idx[test_labels == c]) for c in corpus.classes()},
        client_test_shards=[partition_task(corpus, test_idx, ys, spec, "test") for ys in label_sets],
    )
    validate_plan(plan, corpus, train_idx)
    return plan


def validate_plan(plan: TaskSequencePlan, corpus: Corpus, train_idx: np.ndarray) -> None:
    """Check disjointness, coverage, and conservation; raises on violation."""
    seen: set[int] = set()
    for ys in plan.label_sets:
        if seen & set(ys):
            raise AssertionError("label sets overlap across tasks")
        seen |= set(ys)
    if seen != set(corpus.classes()):
        raise AssertionError("label sets do not cover all classes")
    train_labels = corpus.labels[train_idx]
    for t, ys in enumerate(plan.label_sets):
        task_train = np.sort(train_idx[np.isin(train_labels, ys)])
        union = np.sort(np.concatenate(plan.client_shards[t])) if plan.client_shards[t] else np.zeros(0)
        if union.shape != task_train.shape or not np.array_equal(union, task_train):
            raise AssertionError(f"task {t}: client shards are not a partition of the task train split")
    test_all = set(int(i) for idx in plan.test_by_class.values() for i in idx)
    train_all = set(int(i) for t in plan.client_shards for shard in t for i in shard)
    if test_all & train_all:
        raise AssertionError("test indices leak into training shards")
