"""Problem instances: random generation, distances and JSON-lines datasets.

Node indexing is global: customers occupy ``0..n-1`` and depots ``n..n+m-1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np

MIN_DEMAND = 1
MAX_DEMAND = 9


class DatasetError(ValueError):
    """Raised when a dataset file cannot be parsed or violates the schema."""


@dataclass(frozen=True, eq=False)
class Instance:
    customers: np.ndarray  # (n, 2) float64
    demands: np.ndarray  # (n,) int64
    depots: np.ndarray  # (m, 2) float64
    capacity: int
    id: str = ""
    _dist: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        customers = np.asarray(self.customers, dtype=np.float64).reshape(-1, 2)
        depots = np.asarray(self.depots, dtype=np.float64).reshape(-1, 2)
        demands = np.asarray(self.demands, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "customers", customers)
        object.__setattr__(self, "depots", depots)
        object.__setattr__(self, "demands", demands)
        object.__setattr__(self, "capacity", int(self.capacity))
        validate_instance(self)
        object.__setattr__(self, "_dist", _euclidean(self.coords))
        for arr in (customers, depots, demands, self._dist):
            arr.flags.writeable = False

    @property
    def n(self) -> int:
        return len(self.demands)

    @property
    def m(self) -> int:
        return len(self.depots)

    @property
    def n_nodes(self) -> int:
        return self.n + self.m

    @property
    def is_multi_depot(self) -> bool:
        return self.m > 1

    @property
    def coords(self) -> np.ndarray:
        return np.concatenate([self.customers, self.depots], axis=0)

    @property
    def dist(self) -> np.ndarray:
        return self._dist

    def depot_nodes(self) -> range:
        return range(self.n, self.n + self.m)

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (
            self.id == other.id
            and self.capacity == other.capacity
            and np.array_equal(self.customers, other.customers)
            and np.array_equal(self.depots, other.depots)
            and np.array_equal(self.demands, other.demands)
        )

    __hash__ = object.__hash__


def validate_instance(inst: Instance) -> None:
    if inst.m < 1:
        raise DatasetError("depots: at least one depot is required")
    if inst.capacity < 1:
        raise DatasetError("capacity: must be a positive integer")
    if len(inst.demands) != len(inst.customers):
        raise DatasetError("demands: length differs from customers")
    if inst.n and (inst.demands.min() < 1 or inst.demands.max() > inst.capacity):
        raise DatasetError("demand out of range")
    for name, arr in (("customers", inst.customers), ("depots", inst.depots)):
        if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0):
            raise DatasetError(f"{name}: coordinate outside the unit square")


def _euclidean(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff**2).sum(-1))


def default_capacity(n: int) -> int:
    """Vehicle capacity used for ``n`` customers (30 / 40 / 50 by size band)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n <= 20:
        return 30
    if n <= 50:
        return 40
    return 50


def generate_instance(n: int, m: int = 1, capacity: int | None = None, seed: int = 0,
                      id: str | None = None) -> Instance:
    """Uniform coordinates in the unit square and uniform integer demands in 1..9."""
    if n < 1 or m < 1:
        raise ValueError("need n >= 1 customers and m >= 1 depots")
    if capacity is None:
        capacity = default_capacity(n)
    if capacity < MAX_DEMAND:
        raise ValueError(f"capacity {capacity} < {MAX_DEMAND}: a customer could be unservable")
    rng = np.random.default_rng(seed)
    customers = rng.random((n, 2))
    depots = rng.random((m, 2))
    demands = rng.integers(MIN_DEMAND, MAX_DEMAND + 1, size=n)
    return Instance(customers, demands, depots, capacity, id if id is not None else f"n{n}-m{m}-s{seed}")


def generate_dataset(count: int, n: int, m: int = 1, capacity: int | None = None,
                     seed: int = 0) -> List[Instance]:
    # one child seed per instance keeps instance k independent of count
    seeds = np.random.SeedSequence(seed).spawn(count)
    return [
        generate_instance(n, m, capacity, int(s.generate_state(1, np.uint64)[0]), id=f"n{n}-m{m}-s{seed}-{k}")
        for k, s in enumerate(seeds)
    ]


def distance_matrix(instance: Instance) -> np.ndarray:
    return instance.dist


# --- JSON lines -----------------------------------------------------------


def instance_to_dict(inst: Instance) -> dict:
    return {
        "id": inst.id,
        "capacity": inst.capacity,
        "depots": inst.depots.tolist(),
        "customers": [
            {"xy": xy.tolist(), "demand": int(d)} for xy, d in zip(inst.customers, inst.demands)
        ],
    }


def _require(obj: dict, key: str, kind, lineno: int):
    if key not in obj:
        raise DatasetError(f"line {lineno}: missing field '{key}'")
    val = obj[key]
    if kind is int and (isinstance(val, bool) or not isinstance(val, int)):
        raise DatasetError(f"line {lineno}: field '{key}' must be an integer")
    if kind is not int and not isinstance(val, kind):
        raise DatasetError(f"line {lineno}: field '{key}' has wrong type")
    return val


def _point(val, field_name: str, lineno: int) -> list:
    if (
        not isinstance(val, (list, tuple))
        or len(val) != 2
        or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in val)
    ):
        raise DatasetError(f"line {lineno}: field '{field_name}' must be an [x, y] pair")
    return [float(v) for v in val]


def instance_from_dict(obj: dict, lineno: int = 1) -> Instance:
    if not isinstance(obj, dict):
        raise DatasetError(f"line {lineno}: expected a JSON object")
    iid = _require(obj, "id", str, lineno)
    capacity = _require(obj, "capacity", int, lineno)
    depots = [_point(p, "depots", lineno) for p in _require(obj, "depots", list, lineno)]
    customers, demands = [], []
    for c in _require(obj, "customers", list, lineno):
        if not isinstance(c, dict):
            raise DatasetError(f"line {lineno}: field 'customers' entries must be objects")
        customers.append(_point(_require(c, "xy", list, lineno), "customers.xy", lineno))
        d = _require(c, "demand", int, lineno)
        if not 1 <= d <= capacity:
            raise DatasetError(f"line {lineno}: field 'customers.demand': demand out of range ({d})")
        demands.append(d)
    try:
        return Instance(np.array(customers).reshape(-1, 2), np.array(demands, dtype=np.int64),
                        np.array(depots).reshape(-1, 2), capacity, iid)
    except DatasetError as exc:
        raise DatasetError(f"line {lineno}: {exc}") from None


def save_dataset(path: str | Path, instances: Iterable[Instance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            # repr-exact floats make the round trip lossless
            fh.write(json.dumps(instance_to_dict(inst), separators=(",", ":")))
            fh.write("\n")


def load_dataset(path: str | Path) -> List[Instance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            out.append(instance_from_dict(obj, lineno))
    return out


def same_shape(instances: Sequence[Instance]) -> bool:
    return len({(i.n, i.m) for i in instances}) <= 1
