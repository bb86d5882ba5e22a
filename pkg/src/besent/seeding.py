"""Derived random streams: every seed in a run descends from one global seed."""

import numpy as np


def derive_seed(seed: int, *keys) -> int:
    """Deterministic 63-bit child seed for ``(seed, *keys)``.

    String keys are folded in through their UTF-8 bytes so that stage names
    can label streams.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            words.extend(k.encode("utf-8"))
            words.append(0x100)
        else:
            words.append(int(k) & 0xFFFFFFFFFFFFFFFF)
    state = np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0]
    return int(state) >> 1
