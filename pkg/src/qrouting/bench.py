"""Baselines, exact oracles and the evaluation harness."""

from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .env import tour_cost, validate_solution
from .instances import Instance, default_capacity, generate_dataset
from .qnet import QNetwork
from .search import Solution, solve_greedy, solve_sampling

ORACLE_MAX_N = 9

Solver = Callable[[Instance, int], Solution]


# --- constructive baseline ---------------------------------------------------------


def nearest_neighbor_baseline(instance: Instance) -> Solution:
    """Greedy nearest feasible customer; back to the route's depot when nothing fits.

    Multi-depot: every route starts at the depot closest to the unvisited
    customer that is closest to any depot.
    """
    t0 = time.perf_counter()
    n, d = instance.n, instance.dist
    depots = np.arange(n, n + instance.m)
    unvisited = np.ones(n, dtype=bool)
    routes = []
    while unvisited.any():
        cand = np.flatnonzero(unvisited)
        sub = d[np.ix_(depots, cand)]
        k, _ = np.unravel_index(np.argmin(sub), sub.shape)
        depot = int(depots[k])
        route, pos, load = [depot], depot, 0
        while True:
            fits = np.flatnonzero(unvisited & (instance.demands + load <= instance.capacity))
            if fits.size == 0:
                break
            nxt = int(fits[np.argmin(d[pos, fits])])
            route.append(nxt)
            unvisited[nxt] = False
            load += int(instance.demands[nxt])
            pos = nxt
        route.append(depot)
        routes.append(route)
    return Solution(routes, tour_cost(instance, routes), {"mode": "nearest_neighbor"},
                    time.perf_counter() - t0, instance.id)


# --- exact oracles -----------------------------------------------------------------------


def brute_force_optimal(instance: Instance) -> Solution:
    """Exact optimum by enumerating giant tours and splitting each one optimally.

    For every customer permutation a dynamic program over cut points finds the
    cheapest capacity-feasible split into routes; each route uses the depot
    that minimizes its two connecting legs. All permutations are processed
    together as arrays.
    """
    n = instance.n
    if n > ORACLE_MAX_N:
        raise ValueError(f"instance too large for oracle (n={n} > {ORACLE_MAX_N})")
    t0 = time.perf_counter()
    d = instance.dist
    depots = np.arange(n, n + instance.m)
    # legs[a, b]: cheapest depot->a plus b->depot over depots, and which depot
    legs_all = d[depots][:, :n, None] + d[depots][:, None, :n]
    legs, legs_depot = legs_all.min(axis=0), depots[legs_all.argmin(axis=0)]

    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    P = len(perms)
    cum_dem = np.zeros((P, n + 1), dtype=np.int64)
    cum_dem[:, 1:] = np.cumsum(instance.demands[perms], axis=1)
    path = np.zeros((P, n))
    if n > 1:
        path[:, 1:] = np.cumsum(d[perms[:, :-1], perms[:, 1:]], axis=1)

    best = np.full((P, n + 1), np.inf)
    best[:, 0] = 0.0
    back = np.zeros((P, n + 1), dtype=np.int64)
    for j in range(1, n + 1):
        for i in range(j):
            ok = cum_dem[:, j] - cum_dem[:, i] <= instance.capacity
            seg = legs[perms[:, i], perms[:, j - 1]] + path[:, j - 1] - path[:, i]
            cand = np.where(ok, best[:, i] + seg, np.inf)
            better = cand < best[:, j]
            best[:, j] = np.where(better, cand, best[:, j])
            back[:, j] = np.where(better, i, back[:, j])
    p = int(np.argmin(best[:, n]))
    perm, cuts, j = perms[p], [], n
    while j > 0:
        cuts.append((int(back[p, j]), j))
        j = int(back[p, j])
    routes = []
    for i, j in reversed(cuts):
        seq = [int(c) for c in perm[i:j]]
        depot = int(legs_depot[seq[0], seq[-1]])
        routes.append([depot, *seq, depot])
    return Solution(routes, tour_cost(instance, routes), {"mode": "brute_force"},
                    time.perf_counter() - t0, instance.id)


def _set_partitions(items: List[int]):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        for k in range(len(part)):
            yield part[:k] + [[first] + part[k]] + part[k + 1:]
        yield [[first]] + part


def partition_oracle(instance: Instance) -> float:
    """Exact optimum by set partitions, each block routed by exhaustive permutation."""
    n = instance.n
    if n > 7:
        raise ValueError("partition oracle is limited to n <= 7")
    d = instance.dist
    depots = list(instance.depot_nodes())

    @lru_cache(maxsize=None)
    def block_cost(block: tuple) -> float:
        best = math.inf
        for perm in itertools.permutations(block):
            inner = sum(d[a, b] for a, b in zip(perm[:-1], perm[1:]))
            for k in depots:
                best = min(best, d[k, perm[0]] + inner + d[perm[-1], k])
        return best

    best = math.inf
    for part in _set_partitions(list(range(n))):
        if any(instance.demands[b].sum() > instance.capacity for b in part):
            continue
        best = min(best, sum(block_cost(tuple(sorted(b))) for b in part))
    return best


# --- evaluation harness ------------------------------------------------------------------


@dataclass
class EvalReport:
    method: str
    problem_size: int
    rows: List[dict] = field(default_factory=list)
    tag: str = ""

    @property
    def costs(self) -> np.ndarray:
        return np.array([r["cost"] for r in self.rows])

    @property
    def mean_cost(self) -> float:
        return float(self.costs.mean()) if self.rows else math.nan

    @property
    def std_cost(self) -> float:
        return float(self.costs.std()) if self.rows else math.nan

    @property
    def total_time(self) -> float:
        return float(sum(r["wall_clock_s"] for r in self.rows))

    @property
    def mean_time(self) -> float:
        return self.total_time / len(self.rows) if self.rows else math.nan

    @property
    def passed(self) -> bool:
        return all(r["valid"] for r in self.rows)

    def summary(self) -> dict:
        return {
            "method": self.method,
            "problem_size": self.problem_size,
            "tag": self.tag,
            "instances": len(self.rows),
            "mean_cost": self.mean_cost,
            "std_cost": self.std_cost,
            "mean_time_s": self.mean_time,
            "total_time_s": self.total_time,
            "passed": self.passed,
        }

    def to_dict(self) -> dict:
        return {**self.summary(), "rows": self.rows}


def evaluate(solver: Solver, dataset: Sequence[Instance], method: str = "", cross_size_tag: str = "") -> EvalReport:
    """Solve instances one at a time, timing and validating each solution."""
    report = EvalReport(method, dataset[0].n if dataset else 0, tag=cross_size_tag)
    for k, inst in enumerate(dataset):
        t0 = time.perf_counter()
        sol = solver(inst, k)
        elapsed = time.perf_counter() - t0
        violation = validate_solution(inst, sol.routes)
        report.rows.append({
            "id": inst.id,
            "cost": sol.cost,
            "wall_clock_s": elapsed,
            "valid": violation is None,
            **({"violation": str(violation)} if violation else {}),
        })
    return report


def instance_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def greedy_solver(net: QNetwork) -> Solver:
    return lambda inst, k: solve_greedy(net, inst)


def sampling_solver(net: QNetwork, samples: int, temperature: float = 1.0, seed: int = 0) -> Solver:
    return lambda inst, k: solve_sampling(net, inst, samples, temperature, instance_seed(seed, k))


def nn_solver() -> Solver:
    return lambda inst, k: nearest_neighbor_baseline(inst)


def oracle_solver() -> Solver:
    return lambda inst, k: brute_force_optimal(inst)


def gap_percent(mean: float, best_mean: float) -> float:
    if not best_mean > 0:
        raise ValueError("best_mean must be positive")
    return 100.0 * (mean / best_mean - 1.0)


def gaps_to_best(reports: Sequence[EvalReport]) -> Dict[str, float]:
    best = min(r.mean_cost for r in reports)
    return {r.method: gap_percent(r.mean_cost, best) for r in reports}


# --- studies ------------------------------------------------------------------------------

TRADEOFF_HEADER = ["samples", "mean_cost", "improvement_percent"]


def tradeoff_curve(net: QNetwork, dataset: Sequence[Instance], sample_counts: Sequence[int],
                   temperature: float = 1.0, seed: int = 0) -> List[dict]:
    """Greedy row (samples=0) followed by one row per sample count."""
    greedy = evaluate(greedy_solver(net), dataset, "greedy")
    rows = [{"samples": 0, "mean_cost": greedy.mean_cost, "improvement_percent": 0.0}]
    for S in sample_counts:
        rep = evaluate(sampling_solver(net, S, temperature, seed), dataset, f"sample{S}")
        rows.append({
            "samples": S,
            "mean_cost": rep.mean_cost,
            "improvement_percent": 100.0 * (greedy.mean_cost - rep.mean_cost) / greedy.mean_cost,
        })
    return rows


GENERALIZATION_HEADER = ["checkpoint", "eval_size", "mean_cost", "gap_percent"]


def generalization_matrix(checkpoints: Mapping[str, QNetwork], eval_sizes: Sequence[int], mode: str = "greedy",
                          count: int = 100, seed: int = 0, depots: int = 2, samples: int = 64,
                          temperature: float = 1.0) -> List[dict]:
    """Evaluate every checkpoint at every size; gap is to the best checkpoint at that size."""
    kinds = {net.config.multi_depot for net in checkpoints.values()}
    if len(kinds) != 1:
        raise ValueError("checkpoints mix CVRP and MDVRP models")
    m = depots if kinds.pop() else 1
    rows = []
    for size in eval_sizes:
        data = generate_dataset(count, size, m, default_capacity(size), seed)
        means = {}
        for label, net in checkpoints.items():
            solver = greedy_solver(net) if mode == "greedy" else sampling_solver(net, samples, temperature, seed)
            means[label] = evaluate(solver, data, label, f"size{size}").mean_cost
        best = min(means.values())
        for label, mean in means.items():
            rows.append({"checkpoint": label, "eval_size": size, "mean_cost": mean,
                         "gap_percent": gap_percent(mean, best)})
    return rows


def write_csv(path, rows: Sequence[dict], header: Sequence[str]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header))
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in header})
