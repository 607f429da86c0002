"""Ring-buffer replay with priority-proportional sampling of sub-trajectories."""
from __future__ import annotations

import numpy as np

MIN_PRIORITY = 1.0
PRIORITY_ALPHA = 0.4
REWARD_WINDOW = 100_000
REWARD_SCALE_FLOOR = 1e-8


class ReplayBuffer:
    """Stores transitions and samples windows of ``horizon`` consecutive steps.

    A window start is sampleable once all ``horizon`` transitions exist and no
    truncation occurs before its last step. Terminal transitions may appear
    inside a window; the agent masks everything after them.
    """

    def __init__(self, obs_dim: int, act_dim: int, capacity: int = 1_000_000, horizon: int = 5,
                 alpha: float = PRIORITY_ALPHA, dtype=np.float64):
        self.capacity = capacity
        self.horizon = horizon
        self.alpha = alpha
        self.state = np.zeros((capacity, obs_dim), dtype=dtype)
        self.action = np.zeros((capacity, act_dim), dtype=dtype)
        self.reward = np.zeros(capacity, dtype=np.float64)
        self.next_state = np.zeros((capacity, obs_dim), dtype=dtype)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.truncated = np.zeros(capacity, dtype=bool)
        self.priority = np.zeros(capacity, dtype=np.float64)
        self.valid = np.zeros(capacity, dtype=bool)
        self.ptr = 0
        self.size = 0
        self.max_priority = MIN_PRIORITY

    def __len__(self):
        return self.size

    def add(self, state, action, reward: float, next_state, terminal: bool, truncated: bool) -> None:
        j = self.ptr
        self.state[j] = state
        self.action[j] = action
        self.reward[j] = reward
        self.next_state[j] = next_state
        self.terminal[j] = terminal
        self.truncated[j] = truncated
        self.priority[j] = self.max_priority
        self.ptr = (j + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        h = self.horizon
        # windows that now contain the newest transition but are incomplete
        for d in range(h - 1):
            self.valid[(j - d) % self.capacity] = False
        if self.size >= h:
            s = (j - h + 1) % self.capacity
            window = (s + np.arange(h - 1)) % self.capacity
            self.valid[s] = not self.truncated[window].any()

    def sample_prioritized(self, batch: int, rng: np.random.Generator):
        """Window starts drawn with probability proportional to stored priority."""
        if self.size < batch:
            raise ValueError(f"buffer holds {self.size} transitions, fewer than batch {batch}")
        weights = self.priority[:self.size] * self.valid[:self.size]
        cum = np.cumsum(weights)
        total = cum[-1]
        if total <= 0:
            raise ValueError("no complete sub-trajectories to sample yet")
        idx = np.searchsorted(cum, rng.random(batch) * total, side="right")
        idx = np.minimum(idx, self.size - 1)
        return idx, weights[idx] / total

    def windows(self, idx: np.ndarray) -> dict:
        """Gather [batch x horizon] arrays for the given window starts."""
        steps = (idx[:, None] + np.arange(self.horizon)[None, :]) % self.capacity
        term = self.terminal[steps]
        alive = np.ones(term.shape, dtype=np.float64)
        alive[:, 1:] = np.cumprod(1.0 - term[:, :-1], axis=1)
        return {
            "state": self.state[steps],
            "action": self.action[steps],
            "reward": self.reward[steps],
            "next_state": self.next_state[steps],
            "terminal": term.astype(np.float64),
            "alive": alive,
            "index": idx,
        }

    def update_priorities(self, idx: np.ndarray, td_abs: np.ndarray) -> np.ndarray:
        prio = np.maximum(np.power(np.abs(td_abs), self.alpha), MIN_PRIORITY)
        self.priority[idx] = prio
        self.max_priority = max(self.max_priority, float(prio.max()))
        return prio

    def reward_scale(self, window: int = REWARD_WINDOW) -> float:
        n = min(self.size, window)
        if n == 0:
            raise ValueError("reward scale needs a non-empty buffer")
        idx = (self.ptr - n + np.arange(n)) % self.capacity
        return max(float(np.abs(self.reward[idx]).mean()), REWARD_SCALE_FLOOR)

    # checkpoint support
    ARRAYS = ("state", "action", "reward", "next_state", "terminal", "truncated", "priority", "valid")

    def state_dict(self) -> dict:
        return {"ptr": self.ptr, "size": self.size, "max_priority": self.max_priority}

    def load_state_dict(self, d: dict) -> None:
        self.ptr, self.size, self.max_priority = int(d["ptr"]), int(d["size"]), float(d["max_priority"])


def update_reward_scale(buffer: ReplayBuffer) -> float:
    return buffer.reward_scale()
