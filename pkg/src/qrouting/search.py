"""Decoding with a trained Q-network: greedy and best-of-S sampling."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .diffcore import MASK_SENTINEL
from .env import StateBatch, batch_step, routes_from_actions, tour_cost
from .instances import Instance
from .qnet import QNetwork

# Rollouts are decoded in fixed groups so rollout i is always computed in the
# same batch, whatever the total sample count. This keeps sample streams nested.
CHUNK = 64


@dataclass
class Solution:
    routes: List[List[int]]
    cost: float
    decode_mode: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    instance_id: str = ""

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "routes": [[int(v) for v in r] for r in self.routes],
            "cost": self.cost,
            "decode": self.decode_mode,
            "wall_clock_s": self.wall_clock,
        }


def _solution(instance: Instance, actions, mode: dict, t0: float) -> Solution:
    routes = routes_from_actions(instance, actions)
    return Solution(routes, tour_cost(instance, routes), mode, time.perf_counter() - t0, instance.id)


def _max_steps(instance: Instance) -> int:
    # every customer can cost an opening, a visit and a return
    return 3 * instance.n + 2


def greedy_actions(net: QNetwork, instances: Sequence[Instance]) -> List[List[int]]:
    """Greedy decoding of equally sized instances in one batch."""
    sb = StateBatch.reset(instances)
    actions: List[List[int]] = [[] for _ in instances]
    while not sb.done.all():
        live = np.flatnonzero(~sb.done)
        q, _ = net.predict(sb.take(live))
        full = np.zeros(sb.size, dtype=np.int64)
        # argmax returns the lowest index among ties
        full[live] = q.argmax(axis=1)
        sb, _ = batch_step(sb, full)
        for b, a in zip(live, full[live]):
            actions[b].append(int(a))
    return actions


def solve_greedy(net: QNetwork, instance: Instance) -> Solution:
    t0 = time.perf_counter()
    return _solution(instance, greedy_actions(net, [instance])[0], {"mode": "greedy"}, t0)


def solve_greedy_batch(net: QNetwork, instances: Sequence[Instance]) -> List[Solution]:
    """Greedy solutions for many instances at once (no per-instance timing)."""
    by_shape = {}
    for k, inst in enumerate(instances):
        by_shape.setdefault((inst.n, inst.m), []).append(k)
    sols: List[Optional[Solution]] = [None] * len(instances)
    for idx in by_shape.values():
        group = [instances[k] for k in idx]
        for k, inst, acts in zip(idx, group, greedy_actions(net, group)):
            sols[k] = _solution(inst, acts, {"mode": "greedy"}, time.perf_counter())
    return sols


def _rollout_uniforms(seed: int, start: int, stop: int, steps: int) -> np.ndarray:
    return np.stack([np.random.default_rng((seed, i)).random(steps) for i in range(start, stop)])


def _predict_distinct(net: QNetwork, sb: StateBatch):
    """Q-values for rollouts of one instance, evaluating each distinct state once."""
    key = np.column_stack([sb.visited, sb.position, sb.remaining, sb.active]).astype(np.int64)
    uniq, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    if len(uniq) == sb.size:
        return net.predict(sb)
    q, mask = net.predict(sb.take(first))
    inverse = inverse.reshape(-1)
    return q[inverse], mask[inverse]


def sample_actions(net: QNetwork, instance: Instance, start: int, stop: int, temperature: float,
                   seed: int) -> List[List[int]]:
    """Boltzmann rollouts ``start..stop-1``; rollout i draws from its own stream (seed, i)."""
    k = stop - start
    steps = _max_steps(instance)
    u = _rollout_uniforms(seed, start, stop, steps)
    sb = StateBatch.reset([instance] * k)
    actions: List[List[int]] = [[] for _ in range(k)]
    t = np.zeros(k, dtype=np.int64)
    while not sb.done.all():
        live = np.flatnonzero(~sb.done)
        q, mask = _predict_distinct(net, sb.take(live))
        z = np.where(mask, q / temperature, MASK_SENTINEL)
        z -= z.max(axis=1, keepdims=True)
        p = np.where(mask, np.exp(z), 0.0)
        cdf = np.cumsum(p, axis=1)
        draw = u[live, t[live]] * cdf[:, -1]
        chosen = np.argmax(cdf > draw[:, None], axis=1)
        full = np.zeros(k, dtype=np.int64)
        full[live] = chosen
        sb, _ = batch_step(sb, full)
        t[live] += 1
        for b, a in zip(live, chosen):
            actions[b].append(int(a))
    return actions


def solve_sampling(net: QNetwork, instance: Instance, samples: int, temperature: float = 1.0,
                   seed: int = 0) -> Solution:
    """Best of ``samples`` Boltzmann rollouts plus the greedy rollout.

    The greedy rollout is always in the pool, so the result never costs more
    than greedy; rollout i depends only on (seed, i), so a larger sample count
    never does worse than a smaller one.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    t0 = time.perf_counter()
    pool = [greedy_actions(net, [instance])[0]]
    for start in range(0, samples, CHUNK):
        batch = sample_actions(net, instance, start, start + CHUNK, temperature, seed)
        pool.extend(batch[: samples - start])
    costs = [tour_cost(instance, routes_from_actions(instance, a)) for a in pool]
    best = int(np.argmin(costs))
    mode = {"mode": "sample", "samples": samples, "temperature": temperature, "seed": seed}
    return _solution(instance, pool[best], mode, t0)
