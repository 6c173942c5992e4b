"""Conditional latent generator and its data-free training objective.

The generator maps (label embedding ++ Gaussian noise) through a three-layer
feedforward net to a pseudo-latent in the query space. It is trained to make
latents that every teacher classifies as the conditioned label while
maximising the server/teacher disagreement on both classifier outputs (KL) and
composed prompts (MSE).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nncore import AdamState, adam_step, cross_entropy, kl_divergence, kl_divergence_grad
from .promptmodel import (
    PromptState,
    classify_latent,
    compose_prompt,
    compose_prompt_backward,
    mask_logits,
)

EMBED_DIM = 64
NOISE_DIM = 64
HIDDEN = (256, 1024)
LEAK = 0.01


def _leaky(x):
    return np.maximum(x, LEAK * x)


def _leaky_grad(x):
    return np.where(x > 0, 1.0, LEAK)


class LatentGenerator:
    """Label embedding table followed by Linear(128,256)-LReLU-Linear(256,1024)-LReLU-Linear(1024,D)."""

    names = ("embed", "w1", "b1", "w2", "b2", "w3", "b3")

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params

    @classmethod
    def init(cls, n_classes: int, out_dim: int, rng: np.random.Generator, embed_dim: int = EMBED_DIM,
             noise_dim: int = NOISE_DIM, hidden: tuple[int, int] = HIDDEN) -> "LatentGenerator":
        sizes = (embed_dim + noise_dim,) + tuple(hidden) + (out_dim,)
        p = {"embed": rng.normal(0.0, 1.0, size=(n_classes, embed_dim))}
        for i in range(3):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            p[f"w{i + 1}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            p[f"b{i + 1}"] = np.zeros(fan_out)
        return cls(p)

    @property
    def noise_dim(self) -> int:
        return self.params["w1"].shape[0] - self.params["embed"].shape[1]

    @property
    def n_classes(self) -> int:
        return self.params["embed"].shape[0]

    @property
    def out_dim(self) -> int:
        return self.params["w3"].shape[1]

    def copy(self) -> "LatentGenerator":
        return LatentGenerator({k: v.copy() for k, v in self.params.items()})

    def forward(self, y, eps, with_cache: bool = False):
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
        eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
        if np.any(y < 0) or np.any(y >= self.n_classes):
            raise IndexError(f"label outside generator table of {self.n_classes} classes")
        if eps.shape != (y.shape[0], self.noise_dim):
            raise ValueError(f"noise must have shape ({y.shape[0]}, {self.noise_dim})")
        p = self.params
        x0 = np.concatenate([p["embed"][y], eps], axis=1)
        h1 = x0 @ p["w1"] + p["b1"]
        a1 = _leaky(h1)
        h2 = a1 @ p["w2"] + p["b2"]
        a2 = _leaky(h2)
        z = a2 @ p["w3"] + p["b3"]
        if with_cache:
            return z, (y, x0, h1, a1, h2, a2)
        return z

    def backward(self, dz: np.ndarray, cache) -> dict[str, np.ndarray]:
        y, x0, h1, a1, h2, a2 = cache
        p = self.params
        g = {"w3": a2.T @ dz, "b3": dz.sum(axis=0)}
        dh2 = (dz @ p["w3"].T) * _leaky_grad(h2)
        g["w2"] = a1.T @ dh2
        g["b2"] = dh2.sum(axis=0)
        dh1 = (dh2 @ p["w2"].T) * _leaky_grad(h1)
        g["w1"] = x0.T @ dh1
        g["b1"] = dh1.sum(axis=0)
        dx0 = dh1 @ p["w1"].T
        dembed = np.zeros_like(p["embed"])
        np.add.at(dembed, y, dx0[:, : dembed.shape[1]])
        g["embed"] = dembed
        return g


def generate(gen: LatentGenerator, y, eps) -> np.ndarray:
    """Pseudo-latent for label(s) ``y`` and noise ``eps``; a single label gives a (D,) vector."""
    single = np.ndim(y) == 0
    z = gen.forward(y, eps)
    return z[0] if single else z


@dataclass
class LabelDistribution:
    labels: np.ndarray  # (K,)
    prob: np.ndarray  # (K,)
    alpha: np.ndarray  # (n_clients, K); columns sum to 1
    counts: np.ndarray  # (n_clients, K)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Inverse-CDF draw of ``n`` labels."""
        cdf = np.cumsum(self.prob)
        u = rng.random(n) * cdf[-1]
        idx = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
        return self.labels[idx]

    def alpha_for(self, y: np.ndarray) -> np.ndarray:
        """Per-sample client weights (B, n_clients); zero rows for unsupported labels."""
        pos = {int(l): i for i, l in enumerate(self.labels)}
        out = np.zeros((len(y), self.alpha.shape[0]))
        for b, label in enumerate(np.asarray(y)):
            i = pos.get(int(label))
            if i is not None:
                out[b] = self.alpha[:, i]
        return out

    def prob_of(self, label: int) -> float:
        hit = np.flatnonzero(self.labels == label)
        return float(self.prob[hit[0]]) if hit.size else 0.0


def build_distribution(counts_per_client) -> LabelDistribution:
    """Label sampling probabilities and per-client weights from instance counts.

    ``counts_per_client`` is a sequence of ``{label: count}`` mappings (or
    objects with a ``counts`` attribute, e.g. client reports).
    """
    tables = [getattr(c, "counts", c) for c in counts_per_client]
    labels = sorted({int(y) for t in tables for y, n in t.items() if n > 0})
    if not labels:
        raise ValueError("all label counts are zero")
    counts = np.array([[float(t.get(y, 0)) for y in labels] for t in tables])
    totals = counts.sum(axis=0)
    return LabelDistribution(
        labels=np.array(labels, dtype=np.int64),
        prob=totals / totals.sum(),
        alpha=counts / totals[None, :],
        counts=counts,
    )


def generator_objective(gen: LatentGenerator, y, eps, alpha, teachers, server: PromptState,
                        lam_kl: float, lam_mse: float, active=None, with_parts: bool = False):
    """Batch-mean of  sum_c alpha_c (CE_c - lam_kl KL_c - lam_mse MSE_c)  and its generator gradient.

    KL is KL(server || teacher); MSE compares composed prompts of server and teacher.
    """
    z, cache = gen.forward(y, eps, with_cache=True)
    b = z.shape[0]
    s_logits = mask_logits(classify_latent(z, server), active)
    p_s, cos_s = compose_prompt(z, server)
    lp = p_s.shape[1] * p_s.shape[2]
    dz = np.zeros_like(z)
    dp_s = np.zeros_like(p_s)
    tot_cls = tot_kl = tot_mse = 0.0
    for c, teacher in enumerate(teachers):
        w = alpha[:, c]
        if not np.any(w):
            continue
        t_logits = mask_logits(classify_latent(z, teacher), active)
        ce, dce = cross_entropy(t_logits, y)
        tot_cls += float(w @ ce)
        g_t = dce * w[:, None]
        if lam_kl:
            kl = kl_divergence(s_logits, t_logits)
            tot_kl += float(w @ kl)
            d_s, d_t = kl_divergence_grad(s_logits, t_logits)
            dz -= lam_kl * (d_s * w[:, None]) @ server.weight.T
            g_t = g_t - lam_kl * d_t * w[:, None]
        dz += g_t @ teacher.weight.T
        if lam_mse:
            p_t, cos_t = compose_prompt(z, teacher)
            diff = p_s - p_t
            per = (diff * diff).reshape(b, -1).mean(axis=1)
            tot_mse += float(w @ per)
            coef = (-lam_mse * 2.0 / lp) * w[:, None, None]
            dp_s += coef * diff
            dz_t, _, _ = compose_prompt_backward(-coef * diff, z, cos_t, teacher)
            dz += dz_t
    if lam_mse:
        dz_s, _, _ = compose_prompt_backward(dp_s, z, cos_s, server)
        dz += dz_s
    loss = (tot_cls - lam_kl * tot_kl - lam_mse * tot_mse) / b
    grads = gen.backward(dz / b, cache)
    if with_parts:
        return loss, grads, {"cls": tot_cls / b, "kl": tot_kl / b, "mse": tot_mse / b}
    return loss, grads


def train_generator(gen: LatentGenerator, teachers, server: PromptState, dist: LabelDistribution,
                    lam_kl: float = 1.0, lam_mse: float = 0.1, epochs: int = 100, lr: float = 1e-4,
                    batch_size: int = 64, steps_per_epoch: int = 1,
                    rng: np.random.Generator | None = None, active=None) -> LatentGenerator:
    """Optimise a copy of ``gen`` against frozen ``teachers`` and ``server``; returns the copy."""
    if lam_kl < 0 or lam_mse < 0:
        raise ValueError("disagreement weights must be non-negative")
    if not teachers:
        raise ValueError("at least one teacher required")
    if dist.alpha.shape[0] != len(teachers):
        raise ValueError("label distribution has a different number of clients than teachers")
    rng = rng if rng is not None else np.random.default_rng(0)
    gen = gen.copy()
    opt = AdamState(lr=lr)
    for _ in range(epochs * steps_per_epoch):
        y = dist.sample(rng, batch_size)
        eps = rng.standard_normal((batch_size, gen.noise_dim))
        _, grads = generator_objective(gen, y, eps, dist.alpha_for(y), teachers, server,
                                       lam_kl, lam_mse, active)
        gen.params = adam_step(gen.params, grads, opt)
    return gen


def train_previous_task_generator(gen: LatentGenerator, prev_server: PromptState | None,
                                  server: PromptState, dist_prev: LabelDistribution | None,
                                  **kwargs) -> LatentGenerator:
    """Generator for labels of earlier tasks, with the stored previous-task model as sole teacher."""
    if prev_server is None or dist_prev is None:
        raise ValueError("no previous task: the previous-task generator only exists from the second task on")
    single = LabelDistribution(dist_prev.labels, dist_prev.prob,
                               np.ones((1, dist_prev.labels.size)), dist_prev.counts.sum(axis=0, keepdims=True))
    return train_generator(gen, [prev_server], server, single, **kwargs)
