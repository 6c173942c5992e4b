"""Dense numeric core: stable primitives with hand-written gradients, Adam, and
a central-difference gradient checker.

Everything works on float64 numpy arrays. Functions accept either a single
vector or a batch of row vectors (last axis = classes / features).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

ADAM_EPS = 1e-8


def _as_float(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def log_softmax(v: np.ndarray) -> np.ndarray:
    v = _as_float(v)
    if v.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    shifted = v - v.max(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        # -inf entries (masked classes) stay -inf; shifted max is always 0
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


def softmax(v: np.ndarray) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    v = _as_float(v)
    if v.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, label) -> tuple[np.ndarray | float, np.ndarray]:
    """Return ``(-log softmax(logits)[label], softmax(logits) - onehot(label))``.

    For a batch ``logits`` of shape (B, C) and ``label`` of shape (B,), the loss is
    per-sample (shape (B,)) and the gradient has shape (B, C). Entries equal to
    ``-inf`` act as masked classes: zero probability and zero gradient.
    """
    logits = _as_float(logits)
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    y = np.atleast_1d(np.asarray(label))
    n_classes = z.shape[-1]
    if y.shape[0] != z.shape[0]:
        raise ValueError("one label per row of logits required")
    if np.any(y < 0) or np.any(y >= n_classes):
        raise IndexError(f"label out of range for {n_classes} classes")
    logp = log_softmax(z)
    rows = np.arange(z.shape[0])
    loss = -logp[rows, y]
    if not np.all(np.isfinite(loss)):
        raise ValueError("label falls on a masked (-inf) logit")
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def kl_divergence(p_logits: np.ndarray, q_logits: np.ndarray):
    """KL(softmax(p) || softmax(q)) computed in log space, over the last axis."""
    p_logits = _as_float(p_logits)
    q_logits = _as_float(q_logits)
    if p_logits.shape != q_logits.shape:
        raise ValueError(f"length mismatch: {p_logits.shape} vs {q_logits.shape}")
    logp = log_softmax(p_logits)
    logq = log_softmax(q_logits)
    p = np.exp(logp)
    # masked classes have p == 0; avoid 0 * (-inf - -inf)
    with np.errstate(invalid="ignore"):
        diff = np.where(p > 0, logp - logq, 0.0)
    out = (p * diff).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def kl_divergence_grad(p_logits: np.ndarray, q_logits: np.ndarray):
    """Gradients of KL(softmax(p)||softmax(q)) w.r.t. the p and q logits."""
    logp = log_softmax(_as_float(p_logits))
    logq = log_softmax(_as_float(q_logits))
    p = np.exp(logp)
    q = np.exp(logq)
    with np.errstate(invalid="ignore"):
        diff = np.where(p > 0, logp - logq, 0.0)
    kl = (p * diff).sum(axis=-1, keepdims=True)
    dp = p * (diff - kl)
    dq = q - p
    return dp, dq


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean of squared elementwise differences."""
    a = _as_float(a)
    b = _as_float(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    d = a - b
    return float(np.mean(d * d))


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """u.v / (|u||v|); zero when either vector has zero norm."""
    u = _as_float(u)
    v = _as_float(v)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def cosine_matrix(q: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Cosine scores between each row of ``q`` (B, D) and each key (M, D) -> (B, M)."""
    qn = np.linalg.norm(q, axis=-1, keepdims=True)
    kn = np.linalg.norm(keys, axis=-1)
    denom = qn * kn[None, :]
    raw = q @ keys.T
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, raw / np.where(denom > 0, denom, 1.0), 0.0)
    return out


def cosine_matrix_grad(q: np.ndarray, keys: np.ndarray, cos: np.ndarray, dcos: np.ndarray):
    """Backprop ``dcos`` (B, M) through :func:`cosine_matrix`.

    Returns ``(dq, dkeys)``. Zero-norm vectors receive zero gradient.
    """
    qn = np.linalg.norm(q, axis=-1)
    kn = np.linalg.norm(keys, axis=-1)
    inv_q = np.where(qn > 0, 1.0 / np.where(qn > 0, qn, 1.0), 0.0)
    inv_k = np.where(kn > 0, 1.0 / np.where(kn > 0, kn, 1.0), 0.0)
    # d cos / d k_i = q/(|q||k_i|) - cos * k_i/|k_i|^2
    w = dcos * inv_q[:, None] * inv_k[None, :]
    dkeys = w.T @ q - (dcos * cos).sum(axis=0)[:, None] * keys * (inv_k**2)[:, None]
    dq = w @ keys - (dcos * cos).sum(axis=1)[:, None] * q * (inv_q**2)[:, None]
    return dq, dkeys


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = ADAM_EPS
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update. Returns new parameter arrays; ``state`` is advanced in place.

    Parameters without an entry in ``grads`` are passed through untouched.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif state.m[name].shape != p.shape:
            raise ValueError(f"optimizer state shape mismatch for {name}")
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / bc2)
        denom += state.eps
        upd = m / denom
        upd *= state.lr / bc1
        out[name] = p - upd
    return out


def finite_diff_check(
    loss_fn: Callable[[dict[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    analytic_grads: Mapping[str, np.ndarray],
    h: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Max relative error between ``analytic_grads`` and central differences of ``loss_fn``.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps entries whose true gradient is ~0 from dominating.
    """
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    worst = 0.0
    for name, g in analytic_grads.items():
        arr = work[name]
        flat = arr.reshape(-1)
        g_flat = np.asarray(g, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(work)
            flat[i] = orig - h
            down = loss_fn(work)
            flat[i] = orig
            num = (up - down) / (2.0 * h)
            denom = max(abs(g_flat[i]), abs(num), floor)
            worst = max(worst, abs(g_flat[i] - num) / denom)
    return worst
