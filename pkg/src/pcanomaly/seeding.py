"""Counter-based fan-out of a single run seed.

Every random stream is ``default_rng(SeedSequence([seed, stream, *counters]))``
with ``stream`` one of the integer tags below, so each draw is a pure
function of the run seed and its position (epoch, sample index, ...).
"""
import numpy as np

INIT = 1
SHUFFLE = 2
TRAIN_NOISE = 3
SPLIT = 4
SYNTH = 5
SAMPLE = 6
SCORE_NOISE = 7
SWEEP = 8


def rng_for(seed: int, stream: int, *counters: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), *map(int, counters)]))


def seed_for(seed: int, stream: int, *counters: int) -> int:
    """A 63-bit integer seed derived like :func:`rng_for`."""
    ss = np.random.SeedSequence([int(seed), int(stream), *map(int, counters)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
