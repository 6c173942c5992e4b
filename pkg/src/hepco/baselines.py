"""Comparison methods: full fine-tuning with FedAvg, centralized prompting, and
L2P-style discrete top-N prompt selection (reference path only)."""

from __future__ import annotations

import numpy as np

from .client import train_local
from .metrics import AccuracyMatrix, evaluate
from .nncore import cosine_matrix
from .promptmodel import FrozenAttention, PromptState
from .server import average_arrays, average_weights


def fedavg_ft_round(state: PromptState, attn: FrozenAttention, client_data, *, epochs: int, lr: float,
                    rngs, batch_size: int = 64, active=None):
    """One FedAvg round where every client trains attention and head.

    ``client_data`` is a list of ``(tokens, queries, labels)``; ``rngs`` one
    generator per client. Returns ``(averaged_state, averaged_attention, reports)``.
    """
    reports = [
        train_local(state, tok, q, y, attn, epochs=epochs, lr=lr, mode="full-ft", batch_size=batch_size,
                    active=active, rng=rng, client_id=i)
        for i, ((tok, q, y), rng) in enumerate(zip(client_data, rngs))
    ]
    new_state = average_weights(reports)
    new_attn = FrozenAttention.from_params(average_arrays([r.attention.params() for r in reports]))
    return new_state, new_attn, reports


def l2p_select(query: np.ndarray, state: PromptState, top_n: int):
    """Indices of the ``top_n`` keys most cosine-similar to ``query`` (ties -> lower index),
    in ascending index order, and their prompts concatenated along the length axis."""
    m = state.keys.shape[0]
    if not 1 <= top_n <= m:
        raise ValueError(f"top_n must be in [1, {m}], got {top_n}")
    scores = cosine_matrix(np.asarray(query, dtype=np.float64)[None], state.keys)[0]
    # stable sort on -score keeps lower indices first among ties
    chosen = np.sort(np.argsort(-scores, kind="stable")[:top_n])
    return chosen, np.concatenate([state.prompts[i] for i in chosen], axis=0), scores[chosen]


def centralized_prompt_train(dataset, stream, state: PromptState, attn: FrozenAttention, *, epochs: int,
                             lr: float, batch_size: int = 64, rng_for=None, ce_mask: str = "seen"):
    """Sequential, non-federated prompt tuning over the task stream.

    ``rng_for(t)`` supplies the shuffling stream of task t. Returns
    ``(AccuracyMatrix, final_state, per-task states)``.
    """
    matrix = AccuracyMatrix(len(stream))
    states = []
    for t, task in enumerate(stream.tasks):
        idx = task.train_idx
        active = stream.active_mask(t, dataset.n_classes, ce_mask)
        rng = rng_for(t) if rng_for is not None else np.random.default_rng(t)
        report = train_local(state, dataset.tokens[idx], dataset.queries[idx], dataset.labels[idx], attn,
                             epochs=epochs, lr=lr, mode="prompt", batch_size=batch_size, active=active, rng=rng)
        state = report.state
        states.append(state)
        tests = [(dataset.tokens[k.test_idx], dataset.queries[k.test_idx], dataset.labels[k.test_idx])
                 for k in stream.tasks[: t + 1]]
        matrix.set_row(t, evaluate(state, attn, tests, stream.labels_through(t)))
    return matrix, state, states

