"""Random network distillation: novelty as a predictor's error on a frozen random net."""
from __future__ import annotations

import numpy as np

from ..approximator import ApproximatorSpec, Network, Optimizer, apply_step


class RndPair:
    def __init__(self, obs_dim: int, k: int = 16, hidden: int = 64, lr: float = 1e-3, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        spec = ApproximatorSpec(obs_dim, ((hidden, "relu"), (k, "identity")))
        self.target = Network(spec, rng=rng)
        self.predictor = Network(spec, rng=rng)
        self.opt = Optimizer("adam", lr=lr)

    def intrinsic_reward(self, obs) -> np.ndarray:
        """||f~(x) - f(x)||^2 per row (scalar for a single observation)."""
        d = self.predictor(obs) - self.target(obs)
        return np.sum(d * d, axis=-1)

    def update(self, obs) -> float:
        """One predictor step on the mean squared distillation error."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        y, cache = self.predictor.forward(obs)
        d = y - self.target(obs)
        loss = float(np.mean(np.sum(d * d, axis=1)))
        grad, _ = self.predictor.backward(cache, 2.0 * d / obs.shape[0])
        apply_step(self.opt, self.predictor, grad)
        return loss


def combined_reward(e, i, eta: float = 1.0):
    """Extrinsic plus scaled intrinsic reward."""
    return e + eta * i
