"""Counter-based deterministic random streams.

Every stochastic choice in the package (parameter init, synthesis, batch
sampling) draws from a Philox generator keyed by a hash of its purpose, so
results never depend on call order and are identical across runs.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(*key_parts) -> np.random.Generator:
    """A generator keyed by the given parts (ints/strings), order-sensitive."""
    tag = "/".join(str(p) for p in key_parts)
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
