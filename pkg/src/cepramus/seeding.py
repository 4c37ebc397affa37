"""Deterministic seed derivation.

All randomized stages (noise realizations, decomposition sampling) draw
their seeds through :func:`derive_seed` so that a single master seed fixes
the whole experiment regardless of execution order or worker count.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    # splitmix64 finalizer
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, *indices: int) -> int:
    """Derive a 64-bit child seed from a master seed and index path.

    Successive indices are folded in splitmix64 style, so
    ``derive_seed(s, i, j)`` for distinct ``(i, j)`` pairs yields
    statistically independent streams while staying reproducible.
    """
    z = master_seed & _MASK64
    for idx in indices:
        z = _mix((z + _GOLDEN * ((idx & _MASK64) + 1)) & _MASK64)
    return _mix(z)
