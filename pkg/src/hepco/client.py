"""Client-side local training: prompt tuning, FedProx-regularised prompt tuning,
and full fine-tuning of a thawed attention copy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nncore import AdamState, adam_step, cross_entropy
from .promptmodel import (
    ATTN_NAMES,
    PARAM_NAMES,
    FrozenAttention,
    PromptState,
    mask_logits,
    prompted_backward,
    prompted_forward,
)

MODES = ("prompt", "fedprox", "full-ft")


@dataclass
class ClientReport:
    client_id: int
    state: PromptState
    counts: dict[int, int]
    attention: FrozenAttention | None = None  # only set by full fine-tuning
    losses: list[float] = field(default_factory=list)


def fedprox_penalty(current: PromptState | dict, anchor: PromptState | dict, mu: float):
    """(mu/2) * sum ||w - w_anchor||^2 over learnable arrays, and its gradient."""
    cur = current.params() if isinstance(current, PromptState) else current
    anc = anchor.params() if isinstance(anchor, PromptState) else anchor
    if cur.keys() != anc.keys():
        raise ValueError("parameter sets differ")
    loss = 0.0
    grads = {}
    for name, w in cur.items():
        a = anc[name]
        if w.shape != a.shape:
            raise ValueError(f"shape mismatch for {name}: {w.shape} vs {a.shape}")
        diff = w - a
        loss += float(np.sum(diff * diff))
        grads[name] = mu * diff
    return 0.5 * mu * loss, grads


def batch_loss(params: dict, tokens, queries, labels, attn: FrozenAttention, active=None,
               train_attention: bool = False, train_prompts: bool = True):
    """Mean masked cross-entropy over a batch plus gradients for learnable arrays."""
    state = PromptState.from_params(params)
    if train_attention:
        attn = FrozenAttention.from_params(params)
    logits, cache = prompted_forward(tokens, queries, state, attn, with_cache=True)
    losses, dlogits = cross_entropy(mask_logits(logits, active), labels)
    n = labels.shape[0]
    grads = prompted_backward(dlogits / n, cache, state, attn,
                              train_attention=train_attention, train_prompts=train_prompts)
    return float(losses.mean()), grads


def train_local(
    init: PromptState,
    tokens: np.ndarray,
    queries: np.ndarray,
    labels: np.ndarray,
    attn: FrozenAttention,
    *,
    epochs: int = 10,
    lr: float = 1e-3,
    mode: str = "prompt",
    mu: float = 0.01,
    batch_size: int = 64,
    active: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    client_id: int = 0,
) -> ClientReport:
    """Mini-batch Adam on a private copy of ``init``; ``init`` and ``attn`` are left untouched.

    ``active`` masks logits of classes outside the current label space.
    """
    if mode not in MODES:
        raise ValueError(f"unknown client mode {mode!r}")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    full_ft = mode == "full-ft"
    if n == 0:
        return ClientReport(client_id, init.copy(), {}, attn if full_ft else None)
    rng = rng if rng is not None else np.random.default_rng(0)
    ys, cs = np.unique(labels, return_counts=True)
    counts = {int(y): int(c) for y, c in zip(ys, cs)}

    params = {k: v.copy() for k, v in init.params().items()}
    if full_ft:
        params.update({k: v.copy() for k, v in attn.params().items()})
        learnable = ("weight", "bias") + ATTN_NAMES
    else:
        learnable = PARAM_NAMES
    anchor = {k: params[k].copy() for k in learnable}
    opt = AdamState(lr=lr)
    bs = min(batch_size, n)
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            loss, grads = batch_loss(params, tokens[idx], queries[idx], labels[idx], attn, active,
                                     train_attention=full_ft, train_prompts=not full_ft)
            if mode == "fedprox":
                prox, pgrads = fedprox_penalty({k: params[k] for k in learnable}, anchor, mu)
                loss += prox
                for k in learnable:
                    grads[k] = grads[k] + pgrads[k]
            params = adam_step(params, {k: grads[k] for k in learnable}, opt)
            history.append(loss)
    state = PromptState.from_params(params)
    trained_attn = FrozenAttention.from_params(params) if full_ft else None
    return ClientReport(client_id, state, counts, trained_attn, history)
