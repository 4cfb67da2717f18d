"""Hash utilities for parameter blobs and seed derivation.

This module provides functions to fingerprint parameter arrays with SHA-256
and to derive independent child seeds from a base seed, so every random
draw in the detector flows from an explicit seed.
"""

import hashlib

import numpy as np


def digest_arrays(arrays) -> str:
    """Hash a sequence of arrays as little-endian float64 bytes.

    Args:
        arrays (Iterable[np.ndarray]): Arrays in a fixed order.

    Returns:
        str: A hexadecimal SHA-256 digest.
    """
    sha = hashlib.sha256()
    for array in arrays:
        sha.update(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return sha.hexdigest()


def text_tag(text: str) -> int:
    """Stable 32-bit integer for a string (class names, role tags)."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:4], "little")


def derive_seed(*parts) -> int:
    """Derive a 32-bit child seed from integer or string parts.

    Args:
        *parts (int | str): Base seed followed by any stream identifiers
            (step index, episode index, role tag). Strings are mapped
            through ``text_tag``.

    Returns:
        int: A deterministic seed in [0, 2**32).

    Raises:
        ValueError: If any part is negative.
    """
    values = [text_tag(p) if isinstance(p, str) else int(p) for p in parts]
    if any(v < 0 for v in values):
        raise ValueError("Seed parts must be non-negative integers.")

    sequence = np.random.SeedSequence(values)
    return int(sequence.generate_state(1, dtype=np.uint32)[0])
