"""Double DQN with n-step returns, prioritized replay and a target network."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import diffcore as dc
from .env import StateBatch, batch_step
from .instances import default_capacity, generate_dataset, generate_instance
from .qnet import ModelConfig, QNetwork
from .replay import NStepAccumulator, ReplayBuffer
from .search import solve_greedy_batch

log = logging.getLogger(__name__)

CURVE_HEADER = ["episode", "samples", "wall_clock_s", "loss", "mean_eval_cost", "epsilon"]
STEP_HEADER = ["step", "episode", "samples", "loss", "mean_abs_td", "grad_norm", "epsilon"]


@dataclass
class TrainConfig:
    # problem
    n: int = 20
    m: int = 1
    capacity: Optional[int] = None
    # model
    h_dim: int = 128
    n_blocks: int = 3
    n_heads: int = 8
    ff_dim: int = 512
    # learning
    total_episodes: int = 10000
    buffer_capacity: int = 100_000
    batch_size: int = 128
    lr: float = 1e-4
    gamma: float = 1.0
    n_step: int = 1
    huber_delta: float = 1.0
    grad_clip: float = 10.0
    target_sync: int = 1000
    warmup: int = 1000
    train_every: int = 1
    alpha: float = 0.6
    beta_start: float = 0.4
    beta_end: float = 1.0
    prio_eps: float = 1e-6
    # exploration
    exploration: str = "eps_greedy"
    eps_start: float = 1.0
    eps_end: float = 0.05
    temp_start: float = 1.0
    temp_end: float = 0.01
    # bookkeeping
    n_envs: int = 1
    eval_every: int = 500
    eval_size: int = 200
    eval_seed: int = 12345
    seed: int = 0

    def __post_init__(self):
        if self.exploration not in ("eps_greedy", "boltzmann"):
            raise ValueError(f"unknown exploration mode {self.exploration!r}")
        if self.n_step < 1 or self.batch_size < 2:
            raise ValueError("n_step must be >= 1 and batch_size >= 2")

    @property
    def vehicle_capacity(self) -> int:
        return self.capacity if self.capacity is not None else default_capacity(self.n)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.h_dim, self.n_blocks, self.n_heads, self.ff_dim, self.m > 1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def with_overrides(self, pairs: List[str]) -> "TrainConfig":
        """Apply ``key=value`` strings, parsing values as JSON where possible."""
        d = self.to_dict()
        for pair in pairs:
            key, sep, raw = pair.partition("=")
            if not sep or key not in d:
                raise ValueError(f"bad override {pair!r}")
            try:
                d[key] = json.loads(raw)
            except json.JSONDecodeError:
                d[key] = raw
        return TrainConfig.from_dict(d)


def load_config(path) -> TrainConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".toml":
        import tomli

        return TrainConfig.from_dict(tomli.loads(text))
    return TrainConfig.from_dict(json.loads(text))


# --- schedules and action selection ----------------------------------------------


def epsilon(episode: int, config: TrainConfig) -> float:
    """Linear decay from eps_start to eps_end over the first half of training."""
    half = config.total_episodes / 2
    if episode >= half:
        return config.eps_end
    f = episode / half
    return (1 - f) * config.eps_start + f * config.eps_end


def temperature(episode: int, config: TrainConfig) -> float:
    """Exponential decay from temp_start to temp_end over the first half of training."""
    f = min(1.0, episode / (config.total_episodes / 2))
    return config.temp_start * (config.temp_end / config.temp_start) ** f


def beta(episode: int, config: TrainConfig) -> float:
    f = min(1.0, episode / config.total_episodes)
    return (1 - f) * config.beta_start + f * config.beta_end


def select_action(q: np.ndarray, mask: np.ndarray, rng: np.random.Generator, *, eps: Optional[float] = None,
                  temp: Optional[float] = None) -> int:
    """epsilon-greedy (``eps``) or Boltzmann (``temp``) choice among feasible nodes."""
    feasible = np.flatnonzero(mask)
    if feasible.size == 0:
        raise ValueError("select_action: no feasible action")
    if temp is not None:
        z = q[feasible] / temp
        p = np.exp(z - z.max())
        return int(feasible[rng.choice(feasible.size, p=p / p.sum())])
    if eps is not None and eps > 0 and rng.random() < eps:
        return int(rng.choice(feasible))
    return int(feasible[np.argmax(q[feasible])])


# --- learning ------------------------------------------------------------------------


def sync_target(online: QNetwork, target: QNetwork):
    """Hard copy of parameters and BN running statistics."""
    target.load_state_from(online)


def td_target(rewards: np.ndarray, n_used: np.ndarray, terminal: np.ndarray, next_states: Optional[StateBatch],
              online: QNetwork, target: QNetwork, gamma: float) -> np.ndarray:
    """Double DQN target: online net picks a* among feasible next actions, target net scores it.

    ``next_states`` holds only the non-terminal rows, in order.
    """
    y = np.array(rewards, dtype=np.float64)
    live = np.flatnonzero(~terminal)
    if live.size:
        q_online, mask = online.predict(next_states)
        q_target, _ = target.predict(next_states)
        a_star = np.where(mask, q_online, -np.inf).argmax(axis=1)
        y[live] += gamma ** n_used[live] * q_target[np.arange(live.size), a_star]
    return y


@dataclass
class StepMetrics:
    loss: float
    mean_abs_td: float
    grad_norm: float


class Learner:
    """Owns the online/target networks, the optimizer and the replay buffer."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.online = QNetwork.create(config.model_config(), config.seed)
        self.target = self.online.clone()
        self.opt = dc.AdamState.for_store(self.online.params)
        self.buffer = ReplayBuffer(config.buffer_capacity, config.alpha, config.prio_eps)
        self.rng = np.random.default_rng([config.seed, 1])
        self.steps = 0

    def train_step(self, beta_now: float) -> StepMetrics:
        cfg, buf = self.config, self.buffer
        idx, weights = buf.sample(cfg.batch_size, beta_now, self.rng)
        terminal = buf.field("terminal", idx)
        live = idx[~terminal]
        y = td_target(
            buf.field("reward", idx), buf.field("n_used", idx), terminal,
            buf.states(live, next_=True) if live.size else None,
            self.online, self.target, cfg.gamma,
        )
        params = self.online.params
        params.zero_grads()
        q, _ = self.online.forward(buf.states(idx), training=True)
        q_sa = q[np.arange(len(idx)), buf.field("action", idx)]
        td = q_sa - y
        loss = dc.tmean(dc.mul(dc.huber(td, cfg.huber_delta), weights))
        if not math.isfinite(loss.item()):
            raise FloatingPointError(
                f"non-finite loss at step {self.steps}: max|y|={np.abs(y).max():.3g}, "
                f"max|Q|={np.abs(q_sa.data).max():.3g}"
            )
        loss.backward()
        norm = dc.clip_grad_norm(params, cfg.grad_clip)
        dc.adam_step(params, self.opt, cfg.lr)
        td_abs = np.abs(td.data)
        buf.update_priorities(idx, td_abs)
        self.steps += 1
        if self.steps % cfg.target_sync == 0:
            sync_target(self.online, self.target)
        return StepMetrics(loss.item(), float(td_abs.mean()), norm)

    def save(self, path, meta: Optional[dict] = None):
        extra = {"adam_m": self.opt.m, "adam_v": self.opt.v}
        self.online.save(path, extra, {"adam_t": self.opt.t, "train_steps": self.steps, **(meta or {})})


@dataclass
class TrainResult:
    net: QNetwork
    best_net: QNetwork
    best_eval: float
    curve: List[dict]
    steps: List[dict]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class _CsvLog:
    def __init__(self, path: Optional[Path], header: List[str]):
        self.rows: List[dict] = []
        self.header = header
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(header)

    def add(self, row: dict):
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow([_fmt(row[k]) for k in self.header])
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()


def train(config: TrainConfig, out_dir=None, eval_instances=None) -> TrainResult:
    """Train from fresh random instances (each used for exactly one episode).

    Writes into ``out_dir`` (when given): ``curve.csv`` with one row per
    evaluation, ``steps.csv`` with one row per gradient step (no timing
    columns, so identical seeds give identical files), ``best.ckpt`` and
    ``last.ckpt`` with their ``.json`` config sidecars, and ``config.json``.
    """
    cfg = config
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    curve = _CsvLog(out / "curve.csv" if out else None, CURVE_HEADER)
    steplog = _CsvLog(out / "steps.csv" if out else None, STEP_HEADER)

    learner = Learner(cfg)
    if eval_instances is None:
        eval_instances = generate_dataset(cfg.eval_size, cfg.n, cfg.m, cfg.vehicle_capacity, cfg.eval_seed)
    act_rng = np.random.default_rng([cfg.seed, 2])
    instance_seeds = np.random.SeedSequence([cfg.seed, 3])
    best_eval, best_net = math.inf, learner.online.clone()
    samples, episode, losses = 0, 0, []
    t0 = time.perf_counter()

    while episode < cfg.total_episodes:
        k = min(cfg.n_envs, cfg.total_episodes - episode)
        insts = [
            generate_instance(cfg.n, cfg.m, cfg.vehicle_capacity, int(s.generate_state(1, np.uint64)[0]),
                              id=f"train-{episode + j}")
            for j, s in enumerate(instance_seeds.spawn(k))
        ]
        eps = [epsilon(episode + j, cfg) for j in range(k)]
        temps = [temperature(episode + j, cfg) for j in range(k)]
        accs = [NStepAccumulator(inst, cfg.n_step, cfg.gamma) for inst in insts]
        b_now = beta(episode, cfg)
        sb = StateBatch.reset(insts)
        while not sb.done.all():
            live = np.flatnonzero(~sb.done)
            q, mask = learner.online.predict(sb.take(live))
            actions = np.zeros(k, dtype=np.int64)
            for row, j in enumerate(live):
                if cfg.exploration == "boltzmann":
                    actions[j] = select_action(q[row], mask[row], act_rng, temp=temps[j])
                else:
                    actions[j] = select_action(q[row], mask[row], act_rng, eps=eps[j])
            nxt, rewards = batch_step(sb, actions)
            for j in live:
                for tr in accs[j].append(sb.state(j), int(actions[j]), float(rewards[j]), nxt.state(j)):
                    learner.buffer.push(tr)
                samples += 1
                if len(learner.buffer) >= max(cfg.warmup, cfg.batch_size) and samples % cfg.train_every == 0:
                    m = learner.train_step(b_now)
                    losses.append(m.loss)
                    steplog.add(dict(step=learner.steps, episode=episode, samples=samples, loss=m.loss,
                                     mean_abs_td=m.mean_abs_td, grad_norm=m.grad_norm, epsilon=eps[j]))
            sb = nxt
        prev, episode = episode, episode + k
        if episode // cfg.eval_every > prev // cfg.eval_every:
            sols = solve_greedy_batch(learner.online, eval_instances)
            mean_cost = float(np.mean([s.cost for s in sols]))
            row = dict(episode=episode, samples=samples, wall_clock_s=round(time.perf_counter() - t0, 3),
                       loss=float(np.mean(losses)) if losses else float("nan"),
                       mean_eval_cost=mean_cost, epsilon=epsilon(episode, cfg))
            curve.add(row)
            losses = []
            log.info("episode %d samples %d eval %.4f loss %.4g", episode, samples, mean_cost, row["loss"])
            if mean_cost < best_eval:
                best_eval, best_net = mean_cost, learner.online.clone()
                if out is not None:
                    best_net.save(out / "best.ckpt", meta={"episode": episode, "mean_eval_cost": mean_cost})
    if out is not None:
        learner.save(out / "last.ckpt", {"episode": episode})
    curve.close()
    steplog.close()
    return TrainResult(learner.online, best_net, best_eval, curve.rows, steplog.rows)
