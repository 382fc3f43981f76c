import numpy as np
import pytest

from qrouting.env import feasible_actions, reset, step
from qrouting.instances import Instance
from qrouting.qnet import ModelConfig, QNetwork


def random_policy(state, mask, rng):
    return int(rng.choice(np.flatnonzero(mask)))


def random_episode(instance, rng):
    """Random feasible rollout; returns (actions, rewards, states)."""
    state = reset(instance)
    actions, rewards, states = [], [], [state]
    while not state.done:
        a = random_policy(state, feasible_actions(state, instance), rng)
        state, r, _ = step(state, a, instance)
        actions.append(a)
        rewards.append(r)
        states.append(state)
    return actions, rewards, states


def make_instance(customers, demands, depots, capacity=30, id="t"):
    return Instance(np.array(customers, float), np.array(demands), np.array(depots, float), capacity, id)


@pytest.fixture
def tiny_net():
    def build(multi_depot=False, seed=0, h_dim=8, n_blocks=1, n_heads=2, ff_dim=16):
        return QNetwork.create(ModelConfig(h_dim, n_blocks, n_heads, ff_dim, multi_depot), seed)

    return build


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
