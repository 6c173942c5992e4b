"""Class-incremental task sequence and heterogeneous per-round client partitions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .seeding import substream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Task:
    index: int
    labels: tuple[int, ...]
    train_idx: np.ndarray
    test_idx: np.ndarray


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[Task, ...]

    def __len__(self) -> int:
        return len(self.tasks)

    def __getitem__(self, i: int) -> Task:
        return self.tasks[i]

    def labels_through(self, t: int) -> list[int]:
        """All labels of tasks 0..t inclusive."""
        out: list[int] = []
        for task in self.tasks[: t + 1]:
            out.extend(task.labels)
        return out

    def active_mask(self, t: int, n_classes: int, mode: str = "seen") -> np.ndarray:
        """Classes whose logits stay live in the task-t training loss.

        ``seen``: every class of tasks 0..t; ``current``: task t's classes only.
        """
        if mode not in ("seen", "current"):
            raise ValueError(f"unknown mask mode {mode!r}")
        active = np.zeros(n_classes, dtype=bool)
        labels = self.tasks[t].labels if mode == "current" else self.labels_through(t)
        active[list(labels)] = True
        return active


@dataclass(frozen=True)
class HeterogeneityConfig:
    gamma: float = 0.1  # split ratio
    kappa: float = 0.6  # category ratio
    beta: float = 1.0  # imbalance ratio
    clients: int = 5
    rounds: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("gamma", "kappa", "beta"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.clients < 1:
            raise ValueError(f"clients must be >= 1, got {self.clients}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")


@dataclass
class ClientAssignment:
    client_id: int
    indices: np.ndarray
    counts: dict[int, int]
    categories: tuple[int, ...]
    clamped: dict[int, int] = field(default_factory=dict)  # label -> shortfall


def build_task_sequence(
    labels,
    n_tasks: int,
    seed: int,
    sample_labels: np.ndarray | None = None,
    train_mask: np.ndarray | None = None,
) -> TaskStream:
    """Split ``labels`` into ``n_tasks`` disjoint, equal-size label sets.

    With ``sample_labels`` (per-sample labels of a dataset) and ``train_mask``
    (True for training samples) each task also receives its train/test
    sample indices.
    """
    labels = sorted(set(int(x) for x in labels))
    if n_tasks < 1 or len(labels) % n_tasks != 0:
        raise ValueError(f"{len(labels)} labels cannot be split evenly into {n_tasks} tasks")
    order = substream(seed, "task-order").permutation(len(labels))
    per = len(labels) // n_tasks
    tasks = []
    for t in range(n_tasks):
        chosen = tuple(sorted(labels[i] for i in order[t * per : (t + 1) * per]))
        if sample_labels is None:
            train = test = np.empty(0, dtype=np.int64)
        else:
            in_task = np.isin(sample_labels, chosen)
            mask = np.ones_like(in_task) if train_mask is None else train_mask
            train = np.flatnonzero(in_task & mask)
            test = np.flatnonzero(in_task & ~mask)
        tasks.append(Task(t, chosen, train, test))
    return TaskStream(tuple(tasks))


def longtail_counts(n_max: int, n_classes: int, beta: float) -> list[int]:
    """Exponential long-tail profile: rank j gets round(n_max * beta**(j/(K-1)))."""
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    if n_classes == 1:
        return [int(n_max)]
    return [int(round(n_max * beta ** (j / (n_classes - 1)))) for j in range(n_classes)]


def assign_round(
    task: Task,
    sample_labels: np.ndarray,
    cfg: HeterogeneityConfig,
    round_idx: int,
    seed: int | None = None,
) -> list[ClientAssignment]:
    """Draw ``cfg.clients`` stateless client datasets for one round of ``task``.

    Each client gets ``round(kappa*|K_t|)`` categories chosen uniformly, a private
    class->rank permutation for the long-tail profile, and per-class samples
    drawn without replacement. Samples may repeat across clients.
    """
    seed = cfg.seed if seed is None else seed
    by_label = {y: task.train_idx[sample_labels[task.train_idx] == y] for y in task.labels}
    for y, idx in by_label.items():
        if idx.size == 0:
            raise ValueError(f"task {task.index} has no training samples for label {y}")
    n_cat = max(1, int(round(cfg.kappa * len(task.labels))))
    out = []
    for c in range(cfg.clients):
        rng = substream(seed, "partition", task.index, round_idx, c)
        cats = tuple(sorted(rng.choice(task.labels, size=n_cat, replace=False).tolist()))
        ranks = rng.permutation(n_cat)
        idx_parts = []
        counts: dict[int, int] = {}
        clamped: dict[int, int] = {}
        for y, rank in zip(cats, ranks):
            pool = by_label[y]
            n_max = int(round(cfg.gamma * pool.size))
            want = max(1, longtail_counts(n_max, n_cat, cfg.beta)[rank])
            take = min(want, pool.size)
            if take < want:
                clamped[y] = want - take
                log.debug("label %d clamped from %d to %d samples", y, want, take)
            idx_parts.append(rng.choice(pool, size=take, replace=False))
            counts[y] = take
        out.append(
            ClientAssignment(
                client_id=c,
                indices=np.sort(np.concatenate(idx_parts)),
                counts=counts,
                categories=cats,
                clamped=clamped,
            )
        )
    return out
