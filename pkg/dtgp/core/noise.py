"""
Counter-based standard normal noise.

Every draw is a pure function of (seed, step, layer, stream, block), so
evaluating the objective twice at the same step reuses the same realization
(common random numbers) no matter what was drawn in between. ``block`` tells
apart the row chunks of one prediction.
"""

from typing import Sequence

import numpy as np

# Stream ids within one (step, layer).
LAYER_SAMPLES = 0
FLOW_WEIGHTS = 1
PRIOR_DRAW = 2


class NoiseSource:
    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("noise seed must be nonnegative")
        self.seed = int(seed)

    def generator(self, step: int, layer: int, stream: int = LAYER_SAMPLES, block: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, int(step), int(layer), int(stream), int(block)])

    def normal(self, step: int, layer: int, stream: int, shape: Sequence[int], block: int = 0) -> np.ndarray:
        """Standard normals; row r of a [S*B x H] request belongs to sample r // B."""
        return self.generator(step, layer, stream, block).standard_normal(tuple(shape))

    def __repr__(self) -> str:
        return f"NoiseSource(seed={self.seed})"
