"""
Seed derivation. A root seed fans out into independent streams so that toggling
one feature (for example WIN views) never perturbs the randomness of another.
"""

from __future__ import annotations

import numpy as np

STREAM_SHUFFLE = 0
STREAM_VIEWS = 1
STREAM_NEGATIVES = 2
STREAM_INIT = 3
STREAM_BANK = 4
STREAM_PROBE = 5
STREAM_SYNTH = 6
STREAM_EVAL = 7

def derive_seed(*keys: int) -> int:
    """
    Derives a 32-bit seed from a tuple of non-negative integer keys.
    """
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])
