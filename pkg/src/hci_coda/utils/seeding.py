"""Deterministic random streams keyed by seed and names.

Every random number in the package is drawn from a stream derived here,
so the same seed and the same keys always give the same numbers no
matter which worker or process draws them.
"""

from __future__ import annotations

import hashlib
from typing import Any

import numpy as np
import torch

__all__ = ["derive_seed", "rng_state", "stream", "torch_generator"]


def _key_entropy(key: str | int) -> int:
    """Stable 64-bit integer for a key (Python's ``hash`` is salted)."""
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(seed: int, *keys: str | int) -> int:
    """Fold *keys* into *seed* and return a 63-bit integer seed."""
    seq = np.random.SeedSequence([int(seed), *(_key_entropy(k) for k in keys)])
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def stream(seed: int, *keys: str | int) -> np.random.Generator:
    """Return an independent numpy Generator for ``(seed, *keys)``.

    Example:
        ```python
        rng = stream(7, "views", 3, 12)  # epoch 3, sample 12
        rng.uniform()
        ```
    """
    return np.random.default_rng(derive_seed(seed, *keys))


def torch_generator(seed: int, *keys: str | int) -> torch.Generator:
    """Return a CPU torch Generator for ``(seed, *keys)``."""
    gen = torch.Generator(device="cpu")
    gen.manual_seed(derive_seed(seed, *keys))
    return gen


def rng_state(seed: int, *keys: str | int, next_epoch: int = 0) -> dict[str, Any]:
    """JSON-ready description of the streams a phase draws from.

    Every per-epoch stream is ``(seed, *keys, epoch, ...)``, so the root
    seed, the keys and the next epoch are enough to resume the sequence.
    """
    return {
        "seed": int(seed),
        "keys": [str(k) for k in keys],
        "derived_seed": derive_seed(seed, *keys),
        "next_epoch": int(next_epoch),
    }
