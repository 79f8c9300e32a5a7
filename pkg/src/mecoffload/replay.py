"""Experience buffer with reward/TD-error composite priorities and
probability-proportional sampling.

The priority of a stored transition is a convex blend of its absolute reward
and absolute TD error, each floored by a small epsilon so nothing ever
becomes unsampleable.  New experiences enter at the current maximum priority
so they get replayed at least once before their TD error exists.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class NotReadyError(RuntimeError):
    """Raised when sampling is requested before the buffer holds a batch."""


@dataclass
class Experience:
    """One slot's transition for all users (roster ids consistent across fields)."""

    states: np.ndarray        # (N, state_dim)
    actions: np.ndarray       # (N, 3) raw actor outputs
    approvals: np.ndarray     # (N,) final binary offload decisions
    rewards: np.ndarray       # (N,)
    next_states: np.ndarray   # (N, state_dim)
    assignment: np.ndarray    # (N,) server index, -1 when unassigned
    terminal: bool = False


def priority(reward_value: float, td_error: float, reward_weight: float,
             td_weight: float, floor: float) -> float:
    """Composite priority: blend of floored |reward| and floored |TD error|."""
    if abs(reward_weight + td_weight - 1.0) > 1e-12:
        raise ValueError("reward_weight + td_weight must equal 1")
    if floor <= 0.0:
        raise ValueError("priority floor must be positive")
    return (reward_weight * (abs(reward_value) + floor)
            + td_weight * (abs(td_error) + floor))


class PriorityBuffer:
    """Ring buffer with priority-proportional sampling (with replacement)."""

    def __init__(self, capacity: int, reward_weight: float = 0.5,
                 td_weight: float = 0.5, floor: float = 1e-6):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        if abs(reward_weight + td_weight - 1.0) > 1e-12:
            raise ValueError("reward_weight + td_weight must equal 1")
        if floor <= 0.0:
            raise ValueError("priority floor must be positive")
        self.capacity = capacity
        self.reward_weight = reward_weight
        self.td_weight = td_weight
        self.floor = floor
        self._data: list[Experience | None] = [None] * capacity
        self._priorities = np.zeros(capacity)
        self._pushed = 0          # total pushes ever; also the next absolute id
        self.stale_updates = 0    # priority updates that referenced evicted ids

    def __len__(self) -> int:
        return min(self._pushed, self.capacity)

    def _slot(self, absolute_id: int) -> int:
        return absolute_id % self.capacity

    def _contains(self, absolute_id: int) -> bool:
        return self._pushed - len(self) <= absolute_id < self._pushed

    def max_priority(self) -> float:
        if len(self) == 0:
            return self.floor
        if self._pushed <= self.capacity:
            return float(np.max(self._priorities[:self._pushed]))
        return float(np.max(self._priorities))

    def push(self, exp: Experience) -> int:
        """Store an experience at the current max priority; returns its id."""
        priority_value = self.max_priority()
        absolute_id = self._pushed
        slot = self._slot(absolute_id)
        self._data[slot] = exp
        self._priorities[slot] = priority_value
        self._pushed += 1
        return absolute_id

    def priorities(self) -> np.ndarray:
        """Copy of the currently stored priorities (physical order)."""
        size = len(self)
        if self._pushed > self.capacity:
            return self._priorities.copy()
        return self._priorities[:size].copy()

    def total_priority(self) -> float:
        size = len(self)
        if self._pushed > self.capacity:
            return float(self._priorities.sum())
        return float(self._priorities[:size].sum())

    def probabilities(self) -> np.ndarray:
        """Current sampling distribution over stored experiences."""
        size = len(self)
        if size == 0:
            return np.zeros(0)
        pri = self._priorities if self._pushed > self.capacity \
            else self._priorities[:size]
        return pri / pri.sum()

    def sample(self, batch_size: int, rng: np.random.Generator
               ) -> tuple[list[Experience], np.ndarray, np.ndarray]:
        """Draw batch_size experiences i.i.d. proportional to priority.

        Returns (experiences, absolute ids, priorities at sampling time).
        """
        size = len(self)
        if size < batch_size:
            raise NotReadyError(f"buffer holds {size} < batch {batch_size}")
        probs = self.probabilities()
        slots = rng.choice(size, size=batch_size, replace=True, p=probs)
        base = self._pushed - size
        ids = np.empty(batch_size, dtype=np.int64)
        batch: list[Experience] = []
        pris = np.empty(batch_size)
        for k, slot in enumerate(slots):
            # slot indexes the physical ring directly once the ring has wrapped
            if self._pushed <= self.capacity:
                absolute_id = int(slot)
            else:
                oldest_slot = self._slot(base)
                absolute_id = base + (int(slot) - oldest_slot) % self.capacity
            ids[k] = absolute_id
            batch.append(self._data[self._slot(absolute_id)])
            pris[k] = self._priorities[self._slot(absolute_id)]
        return batch, ids, pris

    def update_priorities(self, ids: Sequence[int], rewards: Sequence[float],
                          td_errors: Sequence[float]) -> None:
        """Recompute priorities for sampled ids with fresh TD errors.

        Ids that have been evicted since sampling are skipped and counted.
        """
        for absolute_id, r, d in zip(ids, rewards, td_errors):
            if not self._contains(int(absolute_id)):
                self.stale_updates += 1
                continue
            self._priorities[self._slot(int(absolute_id))] = priority(
                float(r), float(d), self.reward_weight, self.td_weight,
                self.floor)
