"""Named random substreams derived by keyed hashing of (master seed, name)."""

from __future__ import annotations

import hashlib

import numpy as np


def stream_seed(master: int, *name) -> int:
    key = repr((int(master),) + tuple(name)).encode()
    digest = hashlib.blake2b(key, digest_size=16, person=b"hepco-seeds").digest()
    return int.from_bytes(digest, "little")


def substream(master: int, *name) -> np.random.Generator:
    """Independent generator for ``name`` under ``master``; identical inputs give identical streams."""
    return np.random.default_rng(stream_seed(master, *name))


def seed_streams(master: int, names=("partition", "client", "generator", "distill", "eval")) -> dict:
    """Map each top-level stream name to its own generator."""
    return {n: substream(master, n) for n in names}
