"""Prompt pool, decomposed prompt composition, prefix attention, and the linear head.

Shapes: B batch, T tokens, D feature dim, M pool size, L prompt length
(first L/2 rows become key prefixes, last L/2 value prefixes), C classes.
All forward functions are batched; backward passes are written out by hand.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .nncore import cosine_matrix, cosine_matrix_grad, softmax

PARAM_NAMES = ("keys", "prompts", "weight", "bias")
ATTN_NAMES = ("wq", "wk", "wv", "wo")

MAGIC = b"HPST"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class CheckpointFormatError(ValueError):
    pass


@dataclass
class PromptState:
    """Learnable payload exchanged between clients and server."""

    keys: np.ndarray  # (M, D)
    prompts: np.ndarray  # (M, L, D)
    weight: np.ndarray  # (D, C)
    bias: np.ndarray  # (C,)

    def __post_init__(self):
        m, d = self.keys.shape
        if self.prompts.ndim != 3 or self.prompts.shape[0] != m or self.prompts.shape[2] != d:
            raise ValueError(f"prompts shape {self.prompts.shape} inconsistent with keys {self.keys.shape}")
        if self.prompts.shape[1] % 2:
            raise ValueError("prompt length must be even (key/value halves)")
        if self.weight.shape[0] != d or self.bias.shape != (self.weight.shape[1],):
            raise ValueError("classifier shape inconsistent with feature dim")

    @classmethod
    def init(cls, m: int, length: int, dim: int, n_classes: int, rng: np.random.Generator,
             prompt_scale: float = 1.0, head_scale: float = 0.01) -> "PromptState":
        return cls(
            keys=rng.normal(0.0, 1.0, size=(m, dim)),
            prompts=rng.normal(0.0, prompt_scale, size=(m, length, dim)),
            weight=rng.normal(0.0, head_scale, size=(dim, n_classes)),
            bias=np.zeros(n_classes),
        )

    @classmethod
    def zeros_like(cls, other: "PromptState") -> "PromptState":
        return cls(*(np.zeros_like(getattr(other, n)) for n in PARAM_NAMES))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        m, length, d = self.prompts.shape
        return m, length, d, self.weight.shape[1]

    @property
    def n_params(self) -> int:
        m, length, d, c = self.shape
        return m * d + m * length * d + d * c + c

    def params(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    @classmethod
    def from_params(cls, params) -> "PromptState":
        return cls(*(np.asarray(params[n], dtype=np.float64) for n in PARAM_NAMES))

    def copy(self) -> "PromptState":
        return PromptState(*(getattr(self, n).copy() for n in PARAM_NAMES))

    def equals(self, other: "PromptState") -> bool:
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in PARAM_NAMES)

    def to_bytes(self) -> bytes:
        m, length, d, c = self.shape
        head = _HEADER.pack(MAGIC, VERSION, m, length, d, c)
        body = b"".join(np.ascontiguousarray(getattr(self, n), dtype="<f8").tobytes() for n in PARAM_NAMES)
        return head + body

    @classmethod
    def from_bytes(cls, buf: bytes) -> "PromptState":
        if len(buf) < _HEADER.size:
            raise CheckpointFormatError("checkpoint shorter than header")
        magic, version, m, length, d, c = _HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported version {version}")
        shapes = [(m, d), (m, length, d), (d, c), (c,)]
        sizes = [int(np.prod(s)) for s in shapes]
        if len(buf) != _HEADER.size + 8 * sum(sizes):
            raise CheckpointFormatError("checkpoint payload size does not match header")
        arrays, off = [], _HEADER.size
        for shp, n in zip(shapes, sizes):
            arrays.append(np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shp).astype(np.float64))
            off += 8 * n
        return cls(*arrays)


@dataclass(frozen=True)
class FrozenAttention:
    """Single-head attention block; prompts are prefixed to its keys and values."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, identity_value: bool = True) -> "FrozenAttention":
        """Random query/key maps. With ``identity_value`` the value and output maps are
        the identity, so the block's output stays in the query/latent space."""
        s = 1.0 / np.sqrt(dim)
        wq = rng.normal(0.0, s, size=(dim, dim))
        wk = rng.normal(0.0, s, size=(dim, dim))
        if identity_value:
            wv, wo = np.eye(dim), np.eye(dim)
        else:
            wv = rng.normal(0.0, s, size=(dim, dim))
            wo = rng.normal(0.0, s, size=(dim, dim))
        out = cls(wq, wk, wv, wo)
        for a in out.params().values():
            a.setflags(write=False)
        return out

    def params(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in ATTN_NAMES}

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.params().values())

    @classmethod
    def from_params(cls, params) -> "FrozenAttention":
        return cls(*(np.asarray(params[n], dtype=np.float64) for n in ATTN_NAMES))


# ---------------------------------------------------------------------------
# prompt composition


def compose_prompt(query: np.ndarray, state: PromptState):
    """Cosine-weighted sum of pool prompts.

    Returns ``(p, cos)``: p is (L, D) for a single query or (B, L, D) for a batch;
    cos holds the raw (possibly negative) scores.
    """
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    q2 = q[None] if single else q
    cos = cosine_matrix(q2, state.keys)
    p = np.einsum("bm,mld->bld", cos, state.prompts)
    return (p[0], cos[0]) if single else (p, cos)


def rho(z: np.ndarray, state: PromptState):
    """Prompting mechanism evaluated on (pseudo-)latents; same as :func:`compose_prompt`."""
    return compose_prompt(z, state)[0]


def compose_prompt_backward(dp: np.ndarray, query: np.ndarray, cos: np.ndarray, state: PromptState):
    """Backprop dL/dp (B, L, D). Returns ``(dquery, dkeys, dprompts)``."""
    dprompts = np.einsum("bm,bld->mld", cos, dp)
    dcos = np.einsum("bld,mld->bm", dp, state.prompts)
    dquery, dkeys = cosine_matrix_grad(query, state.keys, cos, dcos)
    return dquery, dkeys, dprompts


# ---------------------------------------------------------------------------
# classifier on latents


def classify_latent(z: np.ndarray, state: PromptState) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) @ state.weight + state.bias


def classify_latent_backward(dlogits: np.ndarray, z: np.ndarray, state: PromptState):
    """Returns ``(dz, dweight, dbias)`` for batched ``dlogits`` (B, C)."""
    return dlogits @ state.weight.T, z.T @ dlogits, dlogits.sum(axis=0)


def mask_logits(logits: np.ndarray, active: np.ndarray | None) -> np.ndarray:
    """Set logits of inactive classes to -inf."""
    if active is None:
        return logits
    return np.where(active, logits, -np.inf)


# ---------------------------------------------------------------------------
# prefix attention forward / backward


@dataclass
class ForwardCache:
    tokens: np.ndarray
    queries: np.ndarray
    cos: np.ndarray
    keys_all: np.ndarray
    values_all: np.ndarray
    inputs_k: np.ndarray
    inputs_v: np.ndarray
    qrow: np.ndarray
    attn: np.ndarray
    ctx: np.ndarray
    out: np.ndarray


def prompted_forward(tokens, queries, state: PromptState, attn: FrozenAttention, with_cache: bool = False):
    """Logits for a batch of samples (tokens (B,T,D), queries (B,D)).

    Single samples (tokens (T,D), query (D,)) are accepted and return (C,) logits.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    single = tokens.ndim == 2
    if single:
        tokens, queries = tokens[None], queries[None]
    b, _, d = tokens.shape
    m, length, pd, _ = state.shape
    if pd != d or attn.wq.shape != (d, d) or queries.shape != (b, d):
        raise ValueError("feature dimension mismatch between sample, prompts and attention")
    half = length // 2
    p, cos = compose_prompt(queries, state)
    inputs_k = np.concatenate([p[:, :half], tokens], axis=1)
    inputs_v = np.concatenate([p[:, half:], tokens], axis=1)
    keys_all = inputs_k @ attn.wk
    values_all = inputs_v @ attn.wv
    qrow = queries @ attn.wq
    scores = np.einsum("bnd,bd->bn", keys_all, qrow) / np.sqrt(d)
    a = softmax(scores)
    ctx = np.einsum("bn,bnd->bd", a, values_all)
    out = ctx @ attn.wo
    logits = out @ state.weight + state.bias
    if single:
        logits = logits[0]
    if not with_cache:
        return logits
    cache = ForwardCache(tokens, queries, cos, keys_all, values_all, inputs_k, inputs_v, qrow, a, ctx, out)
    return logits, cache


def prompted_backward(dlogits, cache: ForwardCache, state: PromptState, attn: FrozenAttention,
                      train_attention: bool = False, train_prompts: bool = True) -> dict[str, np.ndarray]:
    """Gradients of a loss with upstream ``dlogits`` (B, C).

    The attention block is frozen unless ``train_attention`` (full fine-tuning
    baseline); tokens and queries never receive gradients.
    """
    dlogits = np.atleast_2d(dlogits)
    d = cache.queries.shape[1]
    half = state.prompts.shape[1] // 2
    scale = 1.0 / np.sqrt(d)
    grads = {"weight": cache.out.T @ dlogits, "bias": dlogits.sum(axis=0)}
    dout = dlogits @ state.weight.T
    dctx = dout @ attn.wo.T
    da = np.einsum("bnd,bd->bn", cache.values_all, dctx)
    dvalues = cache.attn[:, :, None] * dctx[:, None, :]
    ds = cache.attn * (da - (cache.attn * da).sum(axis=1, keepdims=True))
    dkeys_all = ds[:, :, None] * cache.qrow[:, None, :] * scale
    if train_attention:
        dqrow = np.einsum("bn,bnd->bd", ds, cache.keys_all) * scale
        grads["wo"] = cache.ctx.T @ dout
        grads["wq"] = cache.queries.T @ dqrow
        grads["wk"] = np.einsum("bnd,bne->de", cache.inputs_k, dkeys_all)
        grads["wv"] = np.einsum("bnd,bne->de", cache.inputs_v, dvalues)
    if train_prompts:
        dp = np.concatenate([dkeys_all[:, :half] @ attn.wk.T, dvalues[:, :half] @ attn.wv.T], axis=1)
        _, dk, dP = compose_prompt_backward(dp, cache.queries, cache.cos, state)
        grads["keys"] = dk
        grads["prompts"] = dP
    return grads


def attention_weights(tokens, queries, state: PromptState, attn: FrozenAttention) -> np.ndarray:
    """Attention distribution over prefix + token positions, (B, L/2 + T)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if tokens.ndim == 2:
        tokens, queries = tokens[None], queries[None]
    return prompted_forward(tokens, queries, state, attn, with_cache=True)[1].attn
