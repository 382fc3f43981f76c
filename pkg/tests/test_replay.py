import threading

import numpy as np
import pytest
from scipy import stats

from qrouting.env import reset, step
from qrouting.instances import generate_instance
from qrouting.replay import NStepAccumulator, ReplayBuffer, SumTree, Transition, n_step_transitions

from conftest import random_episode


def transitions(count, seed=0, n=4):
    inst = generate_instance(n, 1, 30, seed=seed)
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        actions, rewards, states = random_episode(inst, rng)
        for t, a in enumerate(actions):
            nxt = None if states[t + 1].done else states[t + 1]
            out.append(Transition(inst, states[t], a, rewards[t], nxt))
    return out[:count]


def filled(priorities, alpha=1.0):
    buf = ReplayBuffer(len(priorities), alpha=alpha, prio_eps=0.0)
    for t in transitions(len(priorities)):
        buf.push(t)
    buf.update_priorities(np.arange(len(priorities)), np.asarray(priorities, float))
    return buf


def test_push_into_empty_buffer():
    buf = ReplayBuffer(8)
    buf.push(transitions(1)[0])
    assert len(buf) == 1 and buf.priorities[0] == 1.0


def test_eviction_of_oldest():
    ts = transitions(5)
    buf = ReplayBuffer(4)
    for t in ts:
        buf.push(t)
    assert len(buf) == 4
    assert buf.field("action", np.array([0]))[0] == ts[4].action
    assert buf.field("action", np.arange(1, 4)).tolist() == [t.action for t in ts[1:4]]


def test_new_transitions_get_max_priority():
    buf = ReplayBuffer(8)
    for t in transitions(3):
        buf.push(t)
    buf.update_priorities(np.array([1]), np.array([5.0]))
    buf.push(transitions(4)[3])
    assert buf.priorities[3] == pytest.approx(5.0 + 1e-6)


def test_sum_tree_root_matches_linear_scan():
    rng = np.random.default_rng(0)
    for cap in (1, 3, 8, 13):
        tree = SumTree(cap)
        vals = np.zeros(cap)
        for _ in range(40):
            i = int(rng.integers(cap))
            vals[i] = rng.random()
            tree.update([i], [vals[i]])
            assert tree.total == pytest.approx(vals.sum(), abs=1e-12)


def test_sum_tree_find_matches_cumsum():
    rng = np.random.default_rng(1)
    vals = rng.random(11)
    tree = SumTree(11)
    tree.update(np.arange(11), vals)
    mass = rng.random(500) * vals.sum()
    expected = np.searchsorted(np.cumsum(vals), mass, side="right")
    assert np.array_equal(tree.find(mass), expected)


def test_equal_priorities_give_unit_weights():
    buf = filled([2.0] * 16)
    _, w = buf.sample(8, 0.7, np.random.default_rng(0))
    assert np.allclose(w, 1.0)


def test_beta_zero_gives_unit_weights():
    buf = filled(np.arange(1, 17))
    _, w = buf.sample(8, 0.0, np.random.default_rng(0))
    assert np.all(w == 1.0)


def test_weights_follow_inverse_probability():
    buf = filled([1.0, 3.0, 1.0, 3.0])
    idx, w = buf.sample(4, 1.0, np.random.default_rng(2))
    p = buf.probabilities()[idx]
    assert np.allclose(w, (1 / p) / (1 / p).max())


def test_dominant_priority_dominates_samples():
    buf = filled([1000.0] + [1.0] * 15)
    rng = np.random.default_rng(3)
    hits = sum(int(buf.sample(1, 0.4, rng)[0][0] == 0) for _ in range(10_000))
    assert hits / 10_000 > 0.9


def test_sampling_distribution_chi_square():
    rng = np.random.default_rng(4)
    pr = rng.uniform(0.1, 5.0, size=64)
    buf = filled(pr, alpha=0.6)
    draws = np.array([buf.sample(1, 0.4, rng)[0][0] for _ in range(100_000)])
    expected = pr**0.6 / (pr**0.6).sum() * len(draws)
    assert stats.chisquare(np.bincount(draws, minlength=64), expected).pvalue > 0.01


def test_underfull_buffer_raises():
    buf = ReplayBuffer(8)
    buf.push(transitions(1)[0])
    with pytest.raises(ValueError):
        buf.sample(2, 0.4, np.random.default_rng(0))


def test_rejects_mixed_instance_sizes():
    buf = ReplayBuffer(8)
    buf.push(transitions(1, n=4)[0])
    with pytest.raises(ValueError):
        buf.push(transitions(1, n=5)[0])


def test_states_round_trip_through_storage():
    ts = transitions(20, seed=5)
    buf = ReplayBuffer(32)
    for t in ts:
        buf.push(t)
    idx = np.arange(20)
    sb = buf.states(idx)
    for i, t in enumerate(ts):
        assert sb.state(i) == t.state
    live = idx[~buf.field("terminal", idx)]
    nsb = buf.states(live, next_=True)
    for row, i in enumerate(live):
        assert nsb.state(row) == ts[i].next_state


def test_concurrent_pushes():
    ts = transitions(400, seed=6)
    buf = ReplayBuffer(1000)
    chunks = [ts[i::4] for i in range(4)]
    threads = [threading.Thread(target=lambda c=c: [buf.push(t) for t in c]) for c in chunks]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert len(buf) == 400 and buf.tree.total == pytest.approx(400.0)


# --- n-step returns -------------------------------------------------------------------


def _fake_steps(rewards, inst):
    s = reset(inst)
    return [(s, 0, r) for r in rewards]


def test_one_step_reward_is_raw():
    inst = generate_instance(3, 1, 30, seed=0)
    rng = np.random.default_rng(0)
    actions, rewards, states = random_episode(inst, rng)
    steps = list(zip(states[:-1], actions, rewards))
    out = n_step_transitions(inst, steps, states[-1], 1, 1.0)
    assert [t.reward for t in out] == rewards
    assert out[-1].terminal and not out[0].terminal


def test_three_step_sum():
    inst = generate_instance(3, 1, 30, seed=0)
    s = reset(inst)
    unfinished = s  # not done
    out = n_step_transitions(inst, _fake_steps([-1.0, -2.0, -5.0], inst), unfinished, 3, 1.0)
    assert len(out) == 1 and out[0].reward == -8.0 and out[0].n_used == 3


def test_terminal_inside_window_shortens_sum():
    inst = generate_instance(2, 1, 30, seed=0)
    s = reset(inst)
    traj = []
    for a in (0, 1, 2):
        nxt, r, _ = step(s, a, inst)
        traj.append((s, a, r))
        s = nxt
    out = n_step_transitions(inst, traj, s, 3, 0.9)
    rs = [r for _, _, r in traj]
    assert [t.n_used for t in out] == [3, 2, 1]
    assert all(t.terminal for t in out)
    assert out[1].reward == pytest.approx(rs[1] + 0.9 * rs[2])


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_accumulator_matches_batch_form(n):
    rng = np.random.default_rng(n)
    for k in range(20):
        inst = generate_instance(5, 1 + k % 2, 30, seed=k)
        actions, rewards, states = random_episode(inst, rng)
        acc = NStepAccumulator(inst, n, 0.95)
        inc = []
        for t, a in enumerate(actions):
            inc += acc.append(states[t], a, rewards[t], states[t + 1])
        ref = n_step_transitions(inst, list(zip(states[:-1], actions, rewards)), states[-1], n, 0.95)
        assert len(inc) == len(ref) == len(actions)
        for x, y in zip(inc, ref):
            assert x.state == y.state and x.action == y.action and x.n_used == y.n_used
            assert x.reward == pytest.approx(y.reward, abs=1e-12)
            assert x.next_state == y.next_state
