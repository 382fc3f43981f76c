"""Proportional prioritized replay over compact routing transitions."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .env import NO_NODE, RoutingState, StateBatch
from .instances import Instance


@dataclass(frozen=True)
class Transition:
    instance: Instance
    state: RoutingState
    action: int
    reward: float  # discounted sum over the n-step window
    next_state: Optional[RoutingState]  # None when the episode ended in the window
    n_used: int = 1

    @property
    def terminal(self) -> bool:
        return self.next_state is None


class SumTree:
    """Binary tree of non-negative leaf values with O(log n) update and prefix search."""

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        size = 1
        while size < self.capacity:
            size *= 2
        self._leaves = size
        self.tree = np.zeros(2 * size)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def __getitem__(self, idx):
        return self.tree[self._leaves + np.asarray(idx)]

    def update(self, idx: np.ndarray, values: np.ndarray):
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        values = np.atleast_1d(np.asarray(values, dtype=np.float64))
        for i, v in zip(idx, values):
            pos = self._leaves + int(i)
            self.tree[pos] = v
            pos //= 2
            while pos >= 1:
                self.tree[pos] = self.tree[2 * pos] + self.tree[2 * pos + 1]
                pos //= 2

    def find(self, mass: np.ndarray) -> np.ndarray:
        """Leaf index whose cumulative range contains each value of ``mass``."""
        mass = np.array(mass, dtype=np.float64)
        node = np.ones(len(mass), dtype=np.int64)
        while node[0] < self._leaves:
            left = 2 * node
            go_right = mass >= self.tree[left]
            mass = np.where(go_right, mass - self.tree[left], mass)
            node = np.where(go_right, left + 1, left)
        return node - self._leaves


class ReplayBuffer:
    """Ring buffer of transitions sampled with probability p_i^alpha / sum p^alpha.

    States are stored compactly (visited mask and a few integers) next to the
    static instance arrays; features are rebuilt when a batch is drawn.
    Thread-safe for concurrent producers.
    """

    def __init__(self, capacity: int, alpha: float = 0.6, prio_eps: float = 1e-6):
        self.capacity = int(capacity)
        self.alpha = alpha
        self.prio_eps = prio_eps
        self.tree = SumTree(self.capacity)
        self.priorities = np.zeros(self.capacity)
        self.max_priority = 1.0
        self.size = 0
        self._next = 0
        self._arrays = None
        self._lock = threading.Lock()

    def __len__(self):
        return self.size

    def _allocate(self, inst: Instance):
        C, n, N = self.capacity, inst.n, inst.n_nodes
        self._m = inst.m
        a = dict(
            coords=np.zeros((C, N, 2)),
            demands=np.zeros((C, n), dtype=np.int64),
            capacity=np.zeros(C, dtype=np.int64),
            action=np.zeros(C, dtype=np.int64),
            reward=np.zeros(C),
            n_used=np.zeros(C, dtype=np.int64),
            terminal=np.zeros(C, dtype=bool),
        )
        for pre in ("s_", "ns_"):
            a[pre + "visited"] = np.zeros((C, n), dtype=bool)
            for key in ("remaining", "position", "active", "step"):
                a[pre + key] = np.zeros(C, dtype=np.int64)
        self._arrays = a

    def _write_state(self, slot: int, pre: str, s: RoutingState):
        a = self._arrays
        a[pre + "visited"][slot] = s.visited
        a[pre + "remaining"][slot] = s.remaining_capacity
        a[pre + "position"][slot] = s.position
        a[pre + "active"][slot] = NO_NODE if s.active_depot is None else s.active_depot
        a[pre + "step"][slot] = s.step

    def push(self, t: Transition):
        with self._lock:
            if self._arrays is None:
                self._allocate(t.instance)
            a = self._arrays
            if a["coords"].shape[1:] != (t.instance.n_nodes, 2) or t.instance.m != self._m:
                raise ValueError("all transitions in a buffer must come from equally sized instances")
            slot = self._next
            a["coords"][slot] = t.instance.coords
            a["demands"][slot] = t.instance.demands
            a["capacity"][slot] = t.instance.capacity
            a["action"][slot] = t.action
            a["reward"][slot] = t.reward
            a["n_used"][slot] = t.n_used
            a["terminal"][slot] = t.terminal
            self._write_state(slot, "s_", t.state)
            if not t.terminal:
                self._write_state(slot, "ns_", t.next_state)
            self.priorities[slot] = self.max_priority
            self.tree.update([slot], [self.max_priority**self.alpha])
            self._next = (slot + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def states(self, idx: np.ndarray, next_: bool = False) -> StateBatch:
        a, pre = self._arrays, ("ns_" if next_ else "s_")
        return StateBatch(
            coords=a["coords"][idx],
            demands=a["demands"][idx],
            capacity=a["capacity"][idx],
            visited=a[pre + "visited"][idx],
            remaining=a[pre + "remaining"][idx],
            position=a[pre + "position"][idx],
            active=a[pre + "active"][idx],
            step=a[pre + "step"][idx],
            done=np.zeros(len(idx), dtype=bool),
            m=self._m,
        )

    def field(self, name: str, idx: np.ndarray) -> np.ndarray:
        return self._arrays[name][idx]

    def probabilities(self) -> np.ndarray:
        p = self.tree[np.arange(self.size)]
        return p / p.sum()

    def sample(self, batch_size: int, beta: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Stratified proportional draw; returns (indices, normalized importance weights)."""
        with self._lock:
            if self.size < batch_size:
                raise ValueError(f"buffer holds {self.size} transitions, batch needs {batch_size}")
            total = self.tree.total
            seg = total / batch_size
            mass = (np.arange(batch_size) + rng.random(batch_size)) * seg
            idx = np.minimum(self.tree.find(np.minimum(mass, total * (1 - 1e-12))), self.size - 1)
            probs = self.tree[idx] / total
            w = (self.size * probs) ** (-beta)
            return idx, w / w.max()

    def update_priorities(self, idx: np.ndarray, td_abs: np.ndarray):
        """Priorities become |TD| + prio_eps."""
        with self._lock:
            pr = np.abs(np.asarray(td_abs, dtype=np.float64)) + self.prio_eps
            self.priorities[idx] = pr
            self.tree.update(idx, pr**self.alpha)
            self.max_priority = max(self.max_priority, float(pr.max()))


def n_step_transitions(instance: Instance, steps: Sequence[Tuple[RoutingState, int, float]],
                       final_state: RoutingState, n: int, gamma: float) -> List[Transition]:
    """All n-step transitions of a (possibly unfinished) episode.

    ``steps`` is the list of ``(state, action, reward)`` in order and
    ``final_state`` the state after the last step. Windows that do not reach the
    end of an unfinished episode are only emitted once they are complete.
    """
    out = []
    T = len(steps)
    states = [s for s, _, _ in steps] + [final_state]
    for t in range(T):
        k = min(n, T - t)
        terminal_in_window = final_state.done and t + k == T
        if k < n and not terminal_in_window:
            break
        ret = sum(gamma**i * steps[t + i][2] for i in range(k))
        nxt = None if terminal_in_window else states[t + k]
        out.append(Transition(instance, steps[t][0], steps[t][1], ret, nxt, k))
    return out


class NStepAccumulator:
    """Incremental form of `n_step_transitions` for one running episode."""

    def __init__(self, instance: Instance, n: int, gamma: float):
        self.instance, self.n, self.gamma = instance, n, gamma
        self._window: List[Tuple[RoutingState, int, float]] = []

    def append(self, state: RoutingState, action: int, reward: float, next_state: RoutingState) -> List[Transition]:
        self._window.append((state, action, reward))
        out = []
        if len(self._window) == self.n and not next_state.done:
            out.append(self._emit(next_state))
            self._window.pop(0)
        if next_state.done:
            while self._window:
                out.append(self._emit(None))
                self._window.pop(0)
        return out

    def _emit(self, nxt: Optional[RoutingState]) -> Transition:
        ret = sum(self.gamma**i * r for i, (_, _, r) in enumerate(self._window))
        s, a, _ = self._window[0]
        return Transition(self.instance, s, a, ret, nxt, len(self._window))
