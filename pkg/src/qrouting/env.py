"""Routing MDP for CVRP and MDVRP.

The single-state functions (`reset`, `feasible_actions`, `step`,
`dynamic_features`) are the reference semantics. `StateBatch` carries the same
state as stacked arrays and is what the network and the learner consume; the
batch functions must agree with the single-state ones row by row.

State conventions (node indices: customers ``0..n-1``, depots ``n..n+m-1``):

* ``position == -1`` only before the first MDVRP action.
* ``active_depot`` is the depot of the open route; ``None`` (``-1`` in batches)
  when no MDVRP route is open. CVRP keeps its single depot active throughout.
* Returning to the active depot closes an MDVRP route; the next action must
  open a new route at some depot, which costs nothing.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .instances import Instance

NO_NODE = -1

FEATURES_CVRP = ("x", "y", "demand", "visited", "over_capacity", "current")
FEATURES_MDVRP = FEATURES_CVRP + ("active_depot",)


class InfeasibleAction(ValueError):
    pass


class EpisodeDone(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class RoutingState:
    visited: np.ndarray  # (n,) bool
    remaining_capacity: int
    position: int
    active_depot: Optional[int]
    step: int = 0
    done: bool = False

    def __eq__(self, other):
        if not isinstance(other, RoutingState):
            return NotImplemented
        return (
            np.array_equal(self.visited, other.visited)
            and (self.remaining_capacity, self.position, self.active_depot, self.step, self.done)
            == (other.remaining_capacity, other.position, other.active_depot, other.step, other.done)
        )

    __hash__ = None


def n_features(multi_depot: bool) -> int:
    return len(FEATURES_MDVRP if multi_depot else FEATURES_CVRP)


def reset(instance: Instance) -> RoutingState:
    visited = np.zeros(instance.n, dtype=bool)
    visited.flags.writeable = False
    if instance.is_multi_depot:
        return RoutingState(visited, instance.capacity, NO_NODE, None)
    return RoutingState(visited, instance.capacity, instance.n, instance.n)


def feasible_actions(state: RoutingState, instance: Instance) -> np.ndarray:
    if state.done:
        raise EpisodeDone("no actions in a terminal state")
    n = instance.n
    mask = np.zeros(instance.n_nodes, dtype=bool)
    if state.active_depot is None:
        # MDVRP: no open route, so a depot must be chosen
        mask[n:] = True
        return mask
    mask[:n] = (~state.visited) & (instance.demands <= state.remaining_capacity)
    if state.position != state.active_depot:
        mask[state.active_depot] = True
    return mask


def step(state: RoutingState, action: int, instance: Instance) -> Tuple[RoutingState, float, bool]:
    mask = feasible_actions(state, instance)
    action = int(action)
    if not 0 <= action < instance.n_nodes or not mask[action]:
        raise InfeasibleAction(f"action {action} is infeasible at step {state.step}")
    n = instance.n
    if state.active_depot is None:
        # opening a route: the vehicle starts here, nothing is traversed
        nxt = replace(state, position=action, active_depot=action, step=state.step + 1)
        return nxt, 0.0, False
    reward = -float(instance.dist[state.position, action])
    if action < n:
        visited = state.visited.copy()
        visited[action] = True
        visited.flags.writeable = False
        nxt = replace(
            state,
            visited=visited,
            remaining_capacity=state.remaining_capacity - int(instance.demands[action]),
            position=action,
            step=state.step + 1,
        )
        return nxt, reward, False
    done = bool(state.visited.all())
    active = action if not instance.is_multi_depot else None
    nxt = replace(
        state,
        remaining_capacity=instance.capacity,
        position=action,
        active_depot=active,
        step=state.step + 1,
        done=done,
    )
    return nxt, reward, done


def dynamic_features(state: RoutingState, instance: Instance) -> np.ndarray:
    """Per-node rows ``[x, y, d, visited, over_capacity, current(, active_depot)]``."""
    n = instance.n
    rows = np.zeros((instance.n_nodes, n_features(instance.is_multi_depot)))
    rows[:, :2] = instance.coords
    demand = np.where(state.visited, 0, instance.demands)
    rows[:n, 2] = demand
    rows[:n, 3] = state.visited
    rows[:n, 4] = demand > state.remaining_capacity
    if state.position != NO_NODE:
        rows[state.position, 5] = 1.0
    if instance.is_multi_depot and state.active_depot is not None:
        rows[state.active_depot, 6] = 1.0
    return rows


# --- solutions ---------------------------------------------------------------


class ViolationKind(enum.Enum):
    DUPLICATE_CUSTOMER = "duplicate customer"
    MISSING_CUSTOMER = "missing customer"
    CAPACITY_EXCEEDED = "capacity exceeded"
    DEPOT_MISMATCH = "depot mismatch"
    BAD_ROUTE = "bad route"


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    detail: str

    def __str__(self):
        return f"{self.kind.value}: {self.detail}"


def tour_cost(instance: Instance, routes: Sequence[Sequence[int]]) -> float:
    d = instance.dist
    total = 0.0
    for route in routes:
        for a, b in zip(route[:-1], route[1:]):
            total += d[a, b]
    return float(total)


def validate_solution(instance: Instance, routes: Sequence[Sequence[int]]) -> Optional[Violation]:
    """Return the first violation found, or ``None`` when the solution is valid."""
    n = instance.n
    seen = np.zeros(n, dtype=bool)
    for k, route in enumerate(routes):
        route = [int(v) for v in route]
        if len(route) < 3 or any(not 0 <= v < instance.n_nodes for v in route):
            return Violation(ViolationKind.BAD_ROUTE, f"route {k} is malformed: {route}")
        start, end, inner = route[0], route[-1], route[1:-1]
        if start < n or end < n:
            return Violation(ViolationKind.DEPOT_MISMATCH, f"route {k} does not start and end at a depot")
        if start != end:
            return Violation(ViolationKind.DEPOT_MISMATCH, f"route {k} starts at {start} but ends at {end}")
        if any(v >= n for v in inner):
            return Violation(ViolationKind.BAD_ROUTE, f"route {k} passes through a depot")
        for v in inner:
            if seen[v]:
                return Violation(ViolationKind.DUPLICATE_CUSTOMER, f"customer {v} served twice")
            seen[v] = True
        load = int(instance.demands[inner].sum())
        if load > instance.capacity:
            return Violation(ViolationKind.CAPACITY_EXCEEDED, f"route {k} carries {load} > {instance.capacity}")
    if not seen.all():
        return Violation(ViolationKind.MISSING_CUSTOMER, f"customer {int(np.argmin(seen))} not served")
    return None


def routes_from_actions(instance: Instance, actions: Sequence[int]) -> List[List[int]]:
    """Decode an action sequence into depot-to-depot routes."""
    n = instance.n
    routes: List[List[int]] = []
    if instance.is_multi_depot:
        current: List[int] = []
        for a in actions:
            a = int(a)
            if a >= n and not current:
                current = [a]
            elif a >= n:
                current.append(a)
                routes.append(current)
                current = []
            else:
                current.append(a)
        return routes
    current = [n]
    for a in actions:
        current.append(int(a))
        if a >= n:
            routes.append(current)
            current = [n]
    return routes


def rollout(instance: Instance, policy, rng=None) -> Tuple[List[int], float]:
    """Run ``policy(state, mask, rng) -> action`` to the end; returns (actions, return)."""
    state = reset(instance)
    actions, ret = [], 0.0
    while not state.done:
        mask = feasible_actions(state, instance)
        a = policy(state, mask, rng)
        state, r, _ = step(state, a, instance)
        actions.append(int(a))
        ret += r
    return actions, ret


# --- batched state ------------------------------------------------------------


@dataclass
class StateBatch:
    """A stack of states of equally sized instances (same n and m)."""

    coords: np.ndarray  # (B, N, 2)
    demands: np.ndarray  # (B, n) int
    capacity: np.ndarray  # (B,) int
    visited: np.ndarray  # (B, n) bool
    remaining: np.ndarray  # (B,) int
    position: np.ndarray  # (B,) int, -1 before the first MDVRP action
    active: np.ndarray  # (B,) int, -1 when no route is open
    step: np.ndarray  # (B,) int
    done: np.ndarray  # (B,) bool
    m: int

    @property
    def size(self) -> int:
        return len(self.capacity)

    @property
    def n(self) -> int:
        return self.demands.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[1]

    @property
    def multi_depot(self) -> bool:
        return self.m > 1

    @classmethod
    def from_states(cls, instances: Sequence[Instance], states: Sequence[RoutingState]) -> "StateBatch":
        if len({(i.n, i.m) for i in instances}) > 1:
            raise ValueError("a state batch needs instances of one size")
        return cls(
            coords=np.stack([i.coords for i in instances]),
            demands=np.stack([i.demands for i in instances]),
            capacity=np.array([i.capacity for i in instances], dtype=np.int64),
            visited=np.stack([s.visited for s in states]).astype(bool),
            remaining=np.array([s.remaining_capacity for s in states], dtype=np.int64),
            position=np.array([s.position for s in states], dtype=np.int64),
            active=np.array([NO_NODE if s.active_depot is None else s.active_depot for s in states],
                            dtype=np.int64),
            step=np.array([s.step for s in states], dtype=np.int64),
            done=np.array([s.done for s in states], dtype=bool),
            m=instances[0].m,
        )

    @classmethod
    def reset(cls, instances: Sequence[Instance]) -> "StateBatch":
        return cls.from_states(instances, [reset(i) for i in instances])

    def state(self, b: int) -> RoutingState:
        visited = self.visited[b].copy()
        visited.flags.writeable = False
        active = int(self.active[b])
        return RoutingState(visited, int(self.remaining[b]), int(self.position[b]),
                            None if active == NO_NODE else active, int(self.step[b]), bool(self.done[b]))

    def take(self, idx) -> "StateBatch":
        idx = np.asarray(idx)
        return StateBatch(
            self.coords[idx], self.demands[idx], self.capacity[idx], self.visited[idx],
            self.remaining[idx], self.position[idx], self.active[idx], self.step[idx],
            self.done[idx], self.m,
        )

    def copy(self) -> "StateBatch":
        return self.take(np.arange(self.size))


def batch_features(sb: StateBatch) -> np.ndarray:
    B, N, n = sb.size, sb.n_nodes, sb.n
    rows = np.zeros((B, N, n_features(sb.multi_depot)))
    rows[:, :, :2] = sb.coords
    demand = np.where(sb.visited, 0, sb.demands)
    rows[:, :n, 2] = demand
    rows[:, :n, 3] = sb.visited
    rows[:, :n, 4] = demand > sb.remaining[:, None]
    has_pos = sb.position != NO_NODE
    rows[np.nonzero(has_pos)[0], sb.position[has_pos], 5] = 1.0
    if sb.multi_depot:
        open_ = sb.active != NO_NODE
        rows[np.nonzero(open_)[0], sb.active[open_], 6] = 1.0
    return rows


def batch_mask(sb: StateBatch) -> np.ndarray:
    """Feasible actions per row; rows of finished episodes are all False."""
    B, n = sb.size, sb.n
    mask = np.zeros((B, sb.n_nodes), dtype=bool)
    open_ = sb.active != NO_NODE
    mask[:, :n] = (~sb.visited) & (sb.demands <= sb.remaining[:, None]) & open_[:, None]
    can_close = open_ & (sb.position != sb.active)
    rows = np.nonzero(can_close)[0]
    mask[rows, sb.active[rows]] = True
    closed = ~open_
    mask[closed, n:] = True
    mask[sb.done] = False
    return mask


def batch_step(sb: StateBatch, actions: np.ndarray) -> Tuple[StateBatch, np.ndarray]:
    """Apply one action per unfinished row; finished rows are left untouched.

    Returns the new batch and per-row rewards (0 for finished rows).
    """
    actions = np.asarray(actions, dtype=np.int64)
    live = ~sb.done
    mask = batch_mask(sb)
    rows = np.nonzero(live)[0]
    if not mask[rows, actions[rows]].all():
        bad = rows[~mask[rows, actions[rows]]][0]
        raise InfeasibleAction(f"row {bad}: action {actions[bad]} is infeasible")
    n = sb.n
    out = sb.copy()
    rewards = np.zeros(sb.size)

    opening = live & (sb.active == NO_NODE)
    moving = live & ~opening
    if moving.any():
        r = np.nonzero(moving)[0]
        src = sb.coords[r, sb.position[r]]
        dst = sb.coords[r, actions[r]]
        rewards[r] = -np.sqrt(((src - dst) ** 2).sum(-1))

    to_cust = moving & (actions < n)
    r = np.nonzero(to_cust)[0]
    out.visited[r, actions[r]] = True
    out.remaining[r] -= sb.demands[r, actions[r]]

    to_depot = moving & (actions >= n)
    out.remaining[to_depot] = sb.capacity[to_depot]
    out.done = sb.done | (to_depot & sb.visited.all(axis=1))
    if sb.multi_depot:
        out.active[to_depot] = NO_NODE
    out.active[opening] = actions[opening]
    out.position[live] = actions[live]
    out.step[live] += 1
    return out, rewards
