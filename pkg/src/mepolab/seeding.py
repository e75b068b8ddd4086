"""Deterministic seed derivation.

A single master seed fans out to named per-stage random streams: the master
and a label path are hashed together, so every stage (and every meta-epoch
inside a stage) gets an independent, reproducible seed without any global
RNG state.
"""

from __future__ import annotations

import hashlib


def derive_seed(master: int, *labels: object) -> int:
    """Derive a 64-bit seed from ``master`` and a sequence of labels.

    Uses SHA-256 over ``"<master>/<label>/<label>..."`` and keeps the first
    eight bytes, so the mapping is stable across runs and platforms.
    """
    h = hashlib.sha256()
    h.update(str(int(master)).encode("ascii"))
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big")
