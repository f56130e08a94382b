"""Deterministic counter-based random streams.

Every source of randomness in the pipeline (weight init, shuffling,
augmentation, gate noise) draws from its own Philox generator keyed by a
stable hash of (purpose, seed, coordinates...).  Streams are therefore
independent of evaluation order and bitwise reproducible across runs.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _philox_key(parts: tuple) -> np.ndarray:
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()
    return np.frombuffer(digest, dtype=np.uint64)


def stream(*parts) -> np.random.Generator:
    """Independent generator for the given key tuple."""
    return np.random.Generator(np.random.Philox(key=_philox_key(parts)))


def gate_noise(seed, layer_id: str, epoch: int, batch_index: int, channels: int,
               sample: int = 0, dtype=np.float32) -> np.ndarray:
    """Standard-normal gate noise, one value per channel.

    Keyed by (seed, layer, epoch, batch, sample); the channel's value is its
    position in the draw, so the same coordinates always yield the same noise
    regardless of evaluation order.
    """
    gen = stream("gate-noise", seed, layer_id, epoch, batch_index, sample)
    return gen.standard_normal(channels).astype(dtype)
