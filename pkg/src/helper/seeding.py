import hashlib
from typing import Any

import numpy as np


def derive_seed(master: int, *path_components: Any) -> int:
    """
    Derive a child seed from a master seed and a path.

    The derivation is a stable hash, so the stream for ("local", "F03", 7)
    does not move when other facilities or rounds are added.

    Args:
        master: Master seed of the run
        *path_components: Purpose string, facility id, round, ...

    Returns:
        A non-negative 63-bit integer seed
    """
    path_str = "/".join(str(c) for c in path_components)
    combined = f"{int(master)}/{path_str}"
    digest = hashlib.sha256(combined.encode("utf-8")).hexdigest()[:16]
    return int(digest, 16) & 0x7FFFFFFFFFFFFFFF


def make_rng(master: int, *path_components: Any) -> np.random.Generator:
    """Numpy generator seeded from derive_seed(master, *path_components)."""
    return np.random.default_rng(derive_seed(master, *path_components))
