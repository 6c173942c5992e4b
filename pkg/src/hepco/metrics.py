"""Accuracy matrix, final average accuracy, forgetting, and parameter accounting."""

from __future__ import annotations

import numpy as np

from .promptmodel import FrozenAttention, PromptState, prompted_forward

# ViT-B/16 encoder parameter count used as the reference model size
VIT_B16_PARAMS = 85_800_000


class AccuracyMatrix:
    """``a[t][j]``: accuracy on task j after finishing task t (j <= t), stored as NaN elsewhere."""

    def __init__(self, n_tasks: int):
        self.values = np.full((n_tasks, n_tasks), np.nan)

    @classmethod
    def from_array(cls, arr) -> "AccuracyMatrix":
        arr = np.asarray(arr, dtype=np.float64)
        m = cls(arr.shape[0])
        m.values[np.tril_indices(arr.shape[0])] = arr[np.tril_indices(arr.shape[0])]
        return m

    @property
    def n_tasks(self) -> int:
        return self.values.shape[0]

    def set_row(self, t: int, row) -> None:
        row = list(row)
        if len(row) != t + 1:
            raise ValueError(f"row {t} needs {t + 1} entries, got {len(row)}")
        if any(not 0.0 <= a <= 1.0 for a in row):
            raise ValueError("accuracies must lie in [0, 1]")
        self.values[t, : t + 1] = row

    def to_list(self) -> list[list[float]]:
        return [[float(x) for x in self.values[t, : t + 1]] for t in range(self.n_tasks)]


def _as_array(matrix) -> np.ndarray:
    return matrix.values if isinstance(matrix, AccuracyMatrix) else np.asarray(matrix, dtype=np.float64)


def predict(model: PromptState, attn: FrozenAttention, tokens, queries, seen_classes, batch: int = 512):
    """Argmax over all classes seen so far; no task identity is used."""
    seen = np.asarray(sorted(seen_classes), dtype=np.int64)
    out = np.empty(len(tokens), dtype=np.int64)
    for s in range(0, len(tokens), batch):
        logits = prompted_forward(tokens[s : s + batch], queries[s : s + batch], model, attn)
        out[s : s + batch] = seen[np.argmax(logits[:, seen], axis=1)]
    return out


def evaluate(model: PromptState, attn: FrozenAttention, test_sets, seen_classes) -> list[float]:
    """Accuracy on each ``(tokens, queries, labels)`` test set, predicting among ``seen_classes``."""
    row = []
    for tokens, queries, labels in test_sets:
        if len(labels) == 0:
            raise ValueError("empty test set")
        row.append(float(np.mean(predict(model, attn, tokens, queries, seen_classes) == labels)))
    return row


def average_accuracy(matrix) -> float:
    a = _as_array(matrix)
    n = a.shape[0]
    return float(np.mean(a[n - 1, :n]))


def forgetting(matrix) -> float:
    """Mean over earlier tasks of (best accuracy ever reached - final accuracy)."""
    a = _as_array(matrix)
    n = a.shape[0]
    if n < 2:
        return 0.0
    drops = [np.max(a[j:n, j]) - a[n - 1, j] for j in range(n - 1)]
    return float(np.mean(drops))


def communication_ratio(payload_params: int, reference_params: int) -> float:
    """Shared parameters as a percentage of the reference model size."""
    if reference_params <= 0:
        raise ValueError("reference parameter count must be positive")
    return 100.0 * payload_params / reference_params


def prompt_payload_params(m: int, length: int, dim: int, n_classes: int, prompt_layers: int = 1) -> int:
    """Keys once, prompts once per prefixed layer, plus the linear head."""
    return m * dim + prompt_layers * m * length * dim + dim * n_classes + n_classes


def reference_scale_ratio(m: int = 100, length: int = 20, dim: int = 768, n_classes: int = 200,
                          prompt_layers: int = 5, backbone_params: int = VIT_B16_PARAMS) -> float:
    """Communication ratio of the prompt payload against backbone + head, counted per prefixed layer."""
    payload = prompt_payload_params(m, length, dim, n_classes, prompt_layers)
    reference = backbone_params + dim * n_classes + n_classes
    return communication_ratio(payload, reference)
