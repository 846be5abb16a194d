"""Seed derivation so every subsystem draws from one root seed."""

import hashlib


def derive_seed(root_seed: int, *path) -> int:
    """Derive a 63-bit child seed from a root seed and a label path.

    The same (root_seed, path) always yields the same child, and distinct
    paths yield independent streams, so corpus generation, model init,
    training and sampling can all be keyed off a single user-facing seed.
    """
    label = ":".join(str(p) for p in (root_seed,) + path)
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF
