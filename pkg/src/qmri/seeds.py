"""Deterministic derivation of per-stage RNG seeds from one master seed.

Every randomised stage of the pipeline (sampling pattern, measurement noise,
training-set augmentation, weight init, ...) gets its own 64-bit seed derived
from the master seed and a short stage label.  Stages can therefore be re-run
in isolation and still reproduce the exact stream they saw inside a full run.
"""

MASK64 = (1 << 64) - 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & MASK64
    return h


def splitmix64(x: int) -> int:
    """One step of the splitmix64 mixer; a bijection on 64-bit integers."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def stage_seed(master_seed: int, label: str) -> int:
    """Derive the RNG seed for one named stage from the master seed."""
    if master_seed < 0:
        raise ValueError("master seed must be nonnegative")
    return splitmix64((master_seed + _fnv1a64(label.encode("utf-8"))) & MASK64)
