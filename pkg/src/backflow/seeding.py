"""Counter-style seed derivation.

Every random stream in the harness (batch plans, augmentation draws,
bootstrap resamples, ...) is keyed by an explicit tuple such as
``(seed, repeat_id, "plan")`` so that repeats are independent, replayable,
and safe to execute in any order or in parallel.
"""

import hashlib

_MASK63 = (1 << 63) - 1


def derive_seed(*parts) -> int:
    """Map an arbitrary key tuple to a deterministic 63-bit integer seed."""
    key = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & _MASK63
