"""Ring-buffer experience replay with episode bookkeeping for history windows."""
from __future__ import annotations

import numpy as np


class ReplayBuffer:
    """Stores joint transitions (S, u_safe, R', S', m_c, b, h_c).

    Observations are kept as float32 to bound memory; everything handed to a
    learner is float64. ``episode``/``step`` let AVFT rebuild the last K
    steps of any stored transition.
    """

    def __init__(self, capacity: int, n_agents: int, obs_dim: int, window: int, rng=None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.rng = rng if rng is not None else np.random.default_rng(0)
        k, n = n_agents, window
        self.obs = np.zeros((capacity, k, obs_dim), dtype=np.float32)
        self.next_obs = np.zeros((capacity, k, obs_dim), dtype=np.float32)
        self.actions = np.zeros((capacity, k), dtype=np.int64)
        self.rewards = np.zeros((capacity, k))
        self.terminal = np.zeros(capacity, dtype=bool)
        self.m_c = np.zeros((capacity, k, n, n), dtype=np.int8)
        self.b = np.zeros((capacity, k, n, n), dtype=np.int32)
        self.h_c = np.zeros((capacity, k), dtype=np.int32)
        self.rtg = np.zeros((capacity, k))  # return-to-go before this step's reward
        self.episode = np.full(capacity, -1, dtype=np.int64)
        self.step = np.zeros(capacity, dtype=np.int64)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, obs, action, reward, next_obs, terminal, m_c, b, h_c, episode, step, rtg) -> int:
        i = self.cursor
        self.obs[i] = obs
        self.next_obs[i] = next_obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.terminal[i] = terminal
        self.m_c[i] = m_c
        self.b[i] = b
        self.h_c[i] = h_c
        self.episode[i] = episode
        self.step[i] = step
        self.rtg[i] = rtg
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return i

    def sample_indices(self, batch: int) -> np.ndarray:
        """Uniform, without replacement within the batch."""
        if self.size == 0:
            raise ValueError("buffer is empty")
        return self.rng.choice(self.size, size=min(batch, self.size), replace=False)

    def sample(self, batch: int) -> dict:
        idx = self.sample_indices(batch)
        return self.gather(idx)

    def gather(self, idx) -> dict:
        idx = np.asarray(idx)
        return {
            "idx": idx,
            "obs": self.obs[idx].astype(np.float64),
            "actions": self.actions[idx],
            "rewards": self.rewards[idx],
            "next_obs": self.next_obs[idx].astype(np.float64),
            "terminal": self.terminal[idx],
            "m_c": self.m_c[idx],
            "b": self.b[idx],
            "h_c": self.h_c[idx],
            "rtg": self.rtg[idx],
        }

    def history(self, idx, length: int):
        """Indices of the ``length`` steps ending at each idx, oldest first.

        Entries before the episode start (or already evicted) are -1.
        """
        idx = np.asarray(idx)
        out = np.full((length, idx.size), -1, dtype=np.int64)
        for lag in range(length):
            j = (idx - lag) % self.capacity
            ok = (
                (self.episode[j] == self.episode[idx])
                & (self.step[j] == self.step[idx] - lag)
                & (lag < self.size)
            )
            out[length - 1 - lag] = np.where(ok, j, -1)
        return out
