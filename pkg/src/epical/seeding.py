"""Deterministic seed derivation for parallel chains.

Chain seeds are derived from a master seed with splitmix64 so that results
do not depend on worker scheduling: chain k always gets the same seed no
matter which process runs it.
"""

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix(z):
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK
    return z ^ (z >> 31)


def derive_seed(master, index):
    """Return the 64-bit seed for stream `index` under `master`."""
    if index < 0:
        raise ValueError("stream index must be nonnegative")
    return _mix((int(master) + (index + 1) * _GAMMA) & _MASK)
