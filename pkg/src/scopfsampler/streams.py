"""Counter-based random streams.

Every random draw in the package comes from a Philox generator whose key is
derived from the run seed and whose counter is positioned by
``(stream, step, chain)``.  A chain's noise therefore depends only on its
own coordinates, never on how chains are scheduled across workers.
"""
from enum import IntEnum
from typing import Union

import numpy as np

class Stream(IntEnum):
    MALA = 0
    DISPATCH_INIT = 1
    CONTINGENCY_INIT = 2
    STRESS = 3
    PREDICTION_INIT = 4
    PREDICTED_SET = 5

def philox_key(seed: int) -> np.ndarray:
    """Two-word Philox key for a seed"""
    return np.random.SeedSequence(int(seed)).generate_state(2, dtype=np.uint64)

def derive_seed(seed: int, *labels: Union[int, str]) -> int:
    """Child seed for a labelled sub-computation (e.g. one SMC round and phase)"""
    words = [int(seed)]
    for label in labels:
        if isinstance(label, str):
            words.extend(label.encode("utf-8"))
        else:
            words.append(int(label))
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0])

def stream_rng(seed: int, chain: int = 0, step: int = 0, stream: int = Stream.MALA) -> np.random.Generator:
    # word 0 is the draw counter; the upper words address the stream
    counter = np.array([0, int(stream), int(step), int(chain)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=philox_key(seed), counter=counter))
