"""Server-side consolidation: uniform averaging followed by latent-space distillation."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .generator import LabelDistribution, LatentGenerator
from .nncore import AdamState, adam_step, cross_entropy
from .promptmodel import (
    PARAM_NAMES,
    PromptState,
    classify_latent,
    classify_latent_backward,
    compose_prompt,
    compose_prompt_backward,
    mask_logits,
)


def average_weights(states, weights=None) -> PromptState:
    """Elementwise mean of client states (reports or PromptStates).

    ``weights`` (e.g. sample counts) switches to a weighted mean; the default is
    the uniform 1/C average.
    """
    states = [getattr(s, "state", s) for s in states]
    if not states:
        raise ValueError("nothing to average")
    shape = states[0].shape
    for s in states[1:]:
        if s.shape != shape:
            raise ValueError(f"shape mismatch: {s.shape} vs {shape}")
    if len(states) == 1:
        return states[0].copy()
    w = np.full(len(states), 1.0 / len(states)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(states),) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("need one non-negative weight per state with a positive total")
    w = w / w.sum()
    return PromptState.from_params({n: _shifted_mean([getattr(s, n) for s in states], w) for n in PARAM_NAMES})


def _shifted_mean(arrays, w):
    # mean taken around the first array, so identical inputs average to themselves bit for bit
    base = arrays[0]
    return base + np.tensordot(w, np.stack([a - base for a in arrays]), axes=1)


def average_arrays(param_dicts) -> dict[str, np.ndarray]:
    """Uniform mean of arbitrary parameter dictionaries with identical keys and shapes."""
    keys = param_dicts[0].keys()
    for d in param_dicts[1:]:
        if d.keys() != keys or any(d[k].shape != param_dicts[0][k].shape for k in keys):
            raise ValueError("parameter dictionaries differ in keys or shapes")
    if len(param_dicts) == 1:
        return {k: v.copy() for k, v in param_dicts[0].items()}
    w = np.full(len(param_dicts), 1.0 / len(param_dicts))
    return {k: _shifted_mean([d[k] for d in param_dicts], w) for k in keys}


def distill_objective(server: PromptState, z, y, alpha, zeta, teachers, prev_server: PromptState | None,
                      active=None, prompt_distill: bool = True, classifier_distill: bool = True,
                      teacher_prompts=None, prev_prompts=None):
    """Batch-mean prompt-matching MSE plus cross-entropy on conditioned labels.

    Prompt term per latent: sum_c alpha_c MSE(rho_server, rho_c) + zeta MSE(rho_server, rho_prev).
    Returns ``(loss, grads)`` w.r.t. the server's keys, prompts and classifier.
    ``teacher_prompts``/``prev_prompts`` optionally supply precomputed teacher rho(z).
    """
    b = z.shape[0]
    grads = {n: np.zeros_like(getattr(server, n)) for n in PARAM_NAMES}
    loss = 0.0
    if prompt_distill:
        p_s, cos_s = compose_prompt(z, server)
        lp = p_s.shape[1] * p_s.shape[2]
        dp = np.zeros_like(p_s)
        for c, teacher in enumerate(teachers):
            w = alpha[:, c]
            if not np.any(w):
                continue
            p_t = teacher_prompts[c] if teacher_prompts is not None else compose_prompt(z, teacher)[0]
            diff = p_s - p_t
            loss += float(w @ (diff * diff).reshape(b, -1).mean(axis=1))
            dp += (2.0 / lp) * w[:, None, None] * diff
        if prev_server is not None and np.any(zeta):
            p_prev = prev_prompts if prev_prompts is not None else compose_prompt(z, prev_server)[0]
            diff = p_s - p_prev
            loss += float(zeta @ (diff * diff).reshape(b, -1).mean(axis=1))
            dp += (2.0 / lp) * zeta[:, None, None] * diff
        _, dk, dP = compose_prompt_backward(dp / b, z, cos_s, server)
        grads["keys"] = dk
        grads["prompts"] = dP
    if classifier_distill:
        ce, dlogits = cross_entropy(mask_logits(classify_latent(z, server), active), y)
        loss += float(ce.sum())
        _, dw, db = classify_latent_backward(dlogits / b, z, server)
        grads["weight"] = dw
        grads["bias"] = db
    return loss / b, grads


def distill(w_avg: PromptState, teachers, gen_cur: LatentGenerator, dist_cur: LabelDistribution,
            prev_server: PromptState | None = None, gen_prev: LatentGenerator | None = None,
            dist_prev: LabelDistribution | None = None, replay_ratio: float = 0.5, epochs: int = 200,
            lr: float = 1e-4, batch_size: int = 64, steps_per_epoch: int = 1,
            rng: np.random.Generator | None = None, active=None, prompt_distill: bool = True,
            classifier_distill: bool = True) -> PromptState:
    """Fine-tune a copy of ``w_avg`` on generated latents.

    Each step draws ``batch_size`` current-round latents and, when a previous
    task exists, ``round(batch_size * replay_ratio)`` previous-task latents
    appended to the same batch. Inputs are model states, generators and label
    statistics only; no sample data is involved.
    """
    if not 0.0 <= replay_ratio <= 1.0:
        raise ValueError("replay_ratio must lie in [0, 1]")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    use_prev = prev_server is not None and replay_ratio > 0
    if use_prev and (gen_prev is None or dist_prev is None):
        raise ValueError("previous-task generator and distribution are required when replaying")
    rng = rng if rng is not None else np.random.default_rng(0)
    n_prev = int(round(batch_size * replay_ratio)) if use_prev else 0
    prev_labels = dist_prev.labels if use_prev else np.empty(0, dtype=np.int64)
    params = {k: v.copy() for k, v in w_avg.params().items()}
    opt = AdamState(lr=lr)
    for _ in range(epochs * steps_per_epoch):
        y = dist_cur.sample(rng, batch_size)
        z = gen_cur.forward(y, rng.standard_normal((batch_size, gen_cur.noise_dim)))
        if n_prev:
            y_prev = dist_prev.sample(rng, n_prev)
            z_prev = gen_prev.forward(y_prev, rng.standard_normal((n_prev, gen_prev.noise_dim)))
            y = np.concatenate([y, y_prev])
            z = np.concatenate([z, z_prev])
        alpha = dist_cur.alpha_for(y)
        zeta = np.isin(y, prev_labels).astype(np.float64)
        server = PromptState.from_params(params)
        _, grads = distill_objective(server, z, y, alpha, zeta, teachers, prev_server if n_prev else None,
                                     active, prompt_distill, classifier_distill)
        params = adam_step(params, grads, opt)
    return PromptState.from_params(params)


@dataclass
class ServerState:
    current: PromptState
    prev: PromptState | None = None
    accumulated: Counter = field(default_factory=Counter)  # completed tasks
    task_counts: Counter = field(default_factory=Counter)  # current task, all rounds so far
    rounds_done: int = 0

    def record_round(self, reports) -> None:
        for r in reports:
            self.task_counts.update(r.counts)
        self.rounds_done += 1

    def previous_distribution(self) -> LabelDistribution | None:
        from .generator import build_distribution

        if not self.accumulated:
            return None
        return build_distribution([dict(self.accumulated)])


def end_of_task(state: ServerState, rounds_per_task: int) -> ServerState:
    """Snapshot the round-R model as the previous-task model and fold counts into the history."""
    if state.rounds_done != rounds_per_task:
        raise RuntimeError(f"end_of_task after {state.rounds_done} of {rounds_per_task} rounds")
    prev = state.current.copy()
    for n in PARAM_NAMES:
        getattr(prev, n).setflags(write=False)
    acc = Counter(state.accumulated)
    acc.update(state.task_counts)
    return ServerState(current=state.current, prev=prev, accumulated=acc)
