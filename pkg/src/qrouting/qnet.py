"""Attention Q-network: encoder over dynamic node features, one Q-value per node.

The encoder is re-run at every decoding step because the node features change
as the tour grows. The decoder builds a context from the graph embedding,
the normalized remaining capacity, the current node and (multi-depot) the
active depot, lets it attend to all nodes, and scores every node with a
single-head compatibility. Scores are returned raw as Q-values; infeasible
nodes get the mask sentinel.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, RunningStats, Tensor
from .env import NO_NODE, RoutingState, StateBatch, batch_features, batch_mask, n_features
from .instances import Instance


@dataclass(frozen=True)
class ModelConfig:
    h_dim: int = 128
    n_blocks: int = 3
    n_heads: int = 8
    ff_dim: int = 512
    multi_depot: bool = False

    def __post_init__(self):
        if self.h_dim % self.n_heads:
            raise ValueError(f"h_dim {self.h_dim} is not divisible by n_heads {self.n_heads}")
        if min(self.h_dim, self.n_heads, self.ff_dim) < 1 or self.n_blocks < 0:
            raise ValueError("model dimensions must be positive")

    @property
    def n_node_features(self) -> int:
        return n_features(self.multi_depot)

    @property
    def problem_kind(self) -> str:
        return "mdvrp" if self.multi_depot else "cvrp"

    @property
    def context_dim(self) -> int:
        return (3 if self.multi_depot else 2) * self.h_dim + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def init_params(config: ModelConfig, seed: int = 0) -> ParamStore:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; BN at identity."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    h, F = config.h_dim, config.n_node_features

    def dense(name, fan_in, fan_out, bias=True):
        bound = 1.0 / math.sqrt(fan_in)
        store[f"{name}.W"] = rng.uniform(-bound, bound, (fan_in, fan_out))
        if bias:
            store[f"{name}.b"] = rng.uniform(-bound, bound, (fan_out,))

    def attention(name, q_dim):
        for key, fan_in in (("Wq", q_dim), ("Wk", h), ("Wv", h), ("Wo", h)):
            bound = 1.0 / math.sqrt(fan_in)
            store[f"{name}.{key}"] = rng.uniform(-bound, bound, (fan_in, h))

    # customers and depots get their own input projections
    dense("encoder.init_customer", F, h)
    dense("encoder.init_depot", F, h)
    for l in range(config.n_blocks):
        pre = f"encoder.block{l}"
        attention(f"{pre}.mha", h)
        store[f"{pre}.bn1.gamma"] = np.ones(h)
        store[f"{pre}.bn1.beta"] = np.zeros(h)
        dense(f"{pre}.ff1", h, config.ff_dim)
        dense(f"{pre}.ff2", config.ff_dim, h)
        store[f"{pre}.bn2.gamma"] = np.ones(h)
        store[f"{pre}.bn2.beta"] = np.zeros(h)
    attention("decoder.mha", config.context_dim)
    dense("decoder.score_query", h, h, bias=False)
    dense("decoder.score_key", h, h, bias=False)
    if config.multi_depot:
        bound = 1.0 / math.sqrt(h)
        store["decoder.placeholder_last"] = rng.uniform(-bound, bound, (h,))
        store["decoder.placeholder_depot"] = rng.uniform(-bound, bound, (h,))
    return store


def init_bn_stats(config: ModelConfig) -> Dict[str, RunningStats]:
    return {
        f"encoder.block{l}.{bn}": RunningStats.fresh(config.h_dim)
        for l in range(config.n_blocks)
        for bn in ("bn1", "bn2")
    }


class QNetwork:
    def __init__(self, config: ModelConfig, params: ParamStore, bn_stats: Dict[str, RunningStats]):
        self.config = config
        self.params = params
        self.bn_stats = bn_stats

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "QNetwork":
        return cls(config, init_params(config, seed), init_bn_stats(config))

    def clone(self) -> "QNetwork":
        return QNetwork(self.config, self.params.clone(), {k: s.copy() for k, s in self.bn_stats.items()})

    # --- model pieces ---

    def encode(self, features: np.ndarray, n_customers: int, training: bool = False) -> Tuple[Tensor, Tensor]:
        """Node embeddings ``H`` (B, N, h) and graph embedding (B, h)."""
        cfg, p = self.config, self.params
        if features.ndim != 3 or features.shape[-1] != cfg.n_node_features:
            raise dc.ShapeError(
                f"feature rows have shape {features.shape}, expected (B, N, {cfg.n_node_features})"
            )
        x = Tensor(features)
        n = n_customers
        H = dc.concat(
            [
                dc.linear(x[:, :n], p["encoder.init_customer.W"], p["encoder.init_customer.b"]),
                dc.linear(x[:, n:], p["encoder.init_depot.W"], p["encoder.init_depot.b"]),
            ],
            axis=1,
        )
        for l in range(cfg.n_blocks):
            pre = f"encoder.block{l}"
            H = H + dc.multi_head_attention(H, H, H, cfg.n_heads, p.sub(f"{pre}.mha"))
            H = self._bn(H, f"{pre}.bn1", training)
            ff = dc.relu(dc.linear(H, p[f"{pre}.ff1.W"], p[f"{pre}.ff1.b"]))
            H = H + dc.linear(ff, p[f"{pre}.ff2.W"], p[f"{pre}.ff2.b"])
            H = self._bn(H, f"{pre}.bn2", training)
        return H, dc.mean_over_nodes(H)

    def _bn(self, x: Tensor, name: str, training: bool) -> Tensor:
        p = self.params
        return dc.batch_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"], training, self.bn_stats[name])

    def build_context(self, H: Tensor, graph: Tensor, sb: StateBatch) -> Tensor:
        """``[graph; remaining/Q; h_current(; h_active_depot)]`` per row."""
        B, N = sb.size, sb.n_nodes
        cap = Tensor((sb.remaining / sb.capacity)[:, None])
        rows = np.arange(B)
        if not self.config.multi_depot:
            return dc.concat([graph, cap, H[rows, sb.position]], axis=-1)
        p = self.params
        slots = dc.concat(
            [
                H,
                dc.broadcast_to(dc.reshape(p["decoder.placeholder_last"], (1, 1, -1)), (B, 1, H.shape[-1])),
                dc.broadcast_to(dc.reshape(p["decoder.placeholder_depot"], (1, 1, -1)), (B, 1, H.shape[-1])),
            ],
            axis=1,
        )
        last = np.where(sb.position == NO_NODE, N, sb.position)
        depot = np.where(sb.active == NO_NODE, N + 1, sb.active)
        return dc.concat([graph, cap, slots[rows, last], slots[rows, depot]], axis=-1)

    def q_values(self, H: Tensor, context: Tensor, mask: np.ndarray) -> Tensor:
        """Raw compatibility scores (B, N); infeasible entries hold the sentinel."""
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("q_values: a state has no feasible action")
        p = self.params
        B, N, h = H.shape
        query = dc.reshape(context, (B, 1, -1))
        # the glimpse attends to every node: no inner mask
        glimpse = dc.multi_head_attention(query, H, H, self.config.n_heads, p.sub("decoder.mha"))
        q = dc.linear(glimpse, p["decoder.score_query.W"])
        k = dc.linear(H, p["decoder.score_key.W"])
        u = dc.reshape(dc.matmul(q, dc.transpose(k, (0, 2, 1))), (B, N)) * (1.0 / math.sqrt(h))
        return dc.masked_fill(u, ~mask, dc.MASK_SENTINEL)

    def forward(self, sb: StateBatch, training: bool = False) -> Tuple[Tensor, np.ndarray]:
        """Q-values and feasibility mask for a batch of non-terminal states."""
        if sb.multi_depot != self.config.multi_depot:
            raise ValueError(f"model is for {self.config.problem_kind}, states are not")
        mask = batch_mask(sb)
        H, graph = self.encode(network_input(sb), sb.n, training)
        ctx = self.build_context(H, graph, sb)
        return self.q_values(H, ctx, mask), mask

    def predict(self, sb: StateBatch) -> Tuple[np.ndarray, np.ndarray]:
        """Eval-mode Q-values as plain arrays, no graph recorded."""
        with dc.no_grad():
            q, mask = self.forward(sb, training=False)
        return q.data, mask

    # --- persistence ---

    def load_state_from(self, other: "QNetwork"):
        if other.config != self.config:
            raise ValueError("cannot copy between networks with different configs")
        self.params.copy_from(other.params)
        for k, s in other.bn_stats.items():
            self.bn_stats[k] = s.copy()

    def checkpoint_sections(self) -> Dict[str, Dict[str, np.ndarray]]:
        return {
            "params": self.params.arrays(),
            "bn_mean": {k: s.mean for k, s in self.bn_stats.items()},
            "bn_var": {k: s.var for k, s in self.bn_stats.items()},
        }

    def save(self, path, extra_sections: Optional[dict] = None, meta: Optional[dict] = None):
        """Write the binary checkpoint plus a ``.json`` sidecar holding the config."""
        path = Path(path)
        sections = self.checkpoint_sections()
        sections.update(extra_sections or {})
        dc.save_checkpoint(path, sections, {"model": self.config.to_dict(), **(meta or {})})
        path.with_suffix(".json").write_text(json.dumps(self.config.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "QNetwork":
        path = Path(path)
        sections, meta = dc.load_checkpoint(path)
        sidecar = path.with_suffix(".json")
        cfg_dict = json.loads(sidecar.read_text()) if sidecar.exists() else meta["model"]
        config = ModelConfig.from_dict(cfg_dict)
        net = cls.create(config)
        expected = set(net.params)
        if set(sections["params"]) != expected:
            raise ValueError(f"{path}: parameter names do not match the model config")
        for k, arr in sections["params"].items():
            if arr.shape != net.params[k].shape:
                raise ValueError(f"{path}: {k} has shape {arr.shape}, expected {net.params[k].shape}")
            net.params[k].data = arr.copy()
        for k in net.bn_stats:
            net.bn_stats[k].mean = sections["bn_mean"][k].copy()
            net.bn_stats[k].var = sections["bn_var"][k].copy()
        return net


def network_input(sb: StateBatch) -> np.ndarray:
    """Dynamic feature rows with demand expressed as a fraction of capacity."""
    rows = batch_features(sb)
    rows[:, :, 2] /= sb.capacity[:, None]
    return rows


def forward(net: QNetwork, instance: Instance, state: RoutingState) -> Tuple[np.ndarray, np.ndarray]:
    """Eval-mode Q-values and mask for one state."""
    q, mask = net.predict(StateBatch.from_states([instance], [state]))
    return q[0], mask[0]
