import numpy as np
import pytest

from qrouting import diffcore as dc
from qrouting.diffcore import Tensor, grad_check
from qrouting.env import RoutingState, StateBatch, feasible_actions, reset, step
from qrouting.instances import Instance, generate_instance
from qrouting.qnet import ModelConfig, QNetwork, forward, init_params, network_input

from conftest import make_instance


def randomize_bn(net, rng):
    for s in net.bn_stats.values():
        s.mean = rng.normal(size=s.mean.shape) * 0.3
        s.var = rng.uniform(0.5, 2.0, size=s.var.shape)
    for name, t in net.params.items():
        if ".bn" in name:
            t.data = t.data + rng.normal(size=t.shape) * 0.2


def walk(instance, k, rng):
    """State after up to ``k`` random feasible steps."""
    s = reset(instance)
    for _ in range(k):
        mask = feasible_actions(s, instance)
        nxt, _, done = step(s, int(rng.choice(np.flatnonzero(mask))), instance)
        if done:
            break
        s = nxt
    return s


def test_config_widths():
    assert ModelConfig().n_node_features == 6
    assert ModelConfig(multi_depot=True).n_node_features == 7
    assert ModelConfig(h_dim=16, n_heads=4).context_dim == 33
    assert ModelConfig(h_dim=16, n_heads=4, multi_depot=True).context_dim == 49
    with pytest.raises(ValueError):
        ModelConfig(h_dim=10, n_heads=4)


def test_init_shapes_and_determinism():
    p = init_params(ModelConfig(), 0)
    assert p["encoder.init_customer.W"].shape == (6, 128)
    assert p["encoder.init_depot.W"].shape == (6, 128)
    assert init_params(ModelConfig(multi_depot=True), 0)["encoder.init_depot.W"].shape == (7, 128)
    q = init_params(ModelConfig(), 0)
    assert all(np.array_equal(p[k].data, q[k].data) for k in p)
    assert not np.array_equal(init_params(ModelConfig(), 1)["encoder.init_customer.W"].data,
                              p["encoder.init_customer.W"].data)


def test_init_within_fan_in_bound():
    p = init_params(ModelConfig(h_dim=16, n_heads=4, ff_dim=32), 3)
    assert np.abs(p["encoder.block0.ff2.W"].data).max() <= 1 / np.sqrt(32)
    assert np.abs(p["encoder.init_customer.W"].data).max() <= 1 / np.sqrt(6)


def test_zero_blocks_is_initial_projection(tiny_net):
    net = tiny_net(n_blocks=0)
    inst = generate_instance(5, 1, 30, seed=0)
    sb = StateBatch.reset([inst])
    x = network_input(sb)
    H, graph = net.encode(x, inst.n)
    p = net.params
    ref = np.concatenate([x[0, :5] @ p["encoder.init_customer.W"].data + p["encoder.init_customer.b"].data,
                          x[0, 5:] @ p["encoder.init_depot.W"].data + p["encoder.init_depot.b"].data])
    assert np.allclose(H.data[0], ref, atol=1e-14)
    assert np.max(np.abs(graph.data[0] - H.data[0].mean(axis=0))) < 1e-12


def test_encoder_width_mismatch(tiny_net):
    net = tiny_net()
    with pytest.raises(dc.ShapeError):
        net.encode(np.zeros((1, 4, 7)), 3)


def test_encode_is_pure_in_eval(tiny_net):
    net = tiny_net()
    inst = generate_instance(6, 1, 30, seed=1)
    x = network_input(StateBatch.reset([inst]))
    a, _ = net.encode(x, 6)
    b, _ = net.encode(x, 6)
    assert np.array_equal(a.data, b.data)


@pytest.mark.parametrize("multi", [False, True])
def test_context_width_and_capacity_slot(tiny_net, multi):
    net = tiny_net(multi_depot=multi)
    inst = generate_instance(4, 2 if multi else 1, 30, seed=2)
    sb = StateBatch.reset([inst])
    H, graph = net.encode(network_input(sb), 4)
    ctx = net.build_context(H, graph, sb)
    assert ctx.shape == (1, net.config.context_dim)
    assert ctx.data[0, 8] == 1.0
    if multi:
        ph = net.params["decoder.placeholder_last"].data
        assert np.array_equal(ctx.data[0, 9:17], ph)


@pytest.mark.parametrize("multi", [False, True])
def test_permutation_equivariance(tiny_net, multi):
    rng = np.random.default_rng(5)
    worst = 0.0
    for case in range(50):
        net = tiny_net(multi_depot=multi, seed=case, h_dim=16, n_heads=4, ff_dim=32, n_blocks=2)
        randomize_bn(net, rng)
        n, m = int(rng.integers(3, 9)), (int(rng.integers(2, 4)) if multi else 1)
        inst = generate_instance(n, m, 30, seed=1000 + case)
        s = walk(inst, int(rng.integers(0, n)), rng)
        perm = rng.permutation(n)  # new customer j is old customer perm[j]
        node_map = np.concatenate([perm, np.arange(n, n + m)])
        inv = np.argsort(node_map)
        pinst = Instance(inst.customers[perm], inst.demands[perm], inst.depots, inst.capacity, "p")
        remap = lambda v: -1 if v == -1 else int(inv[v])  # noqa: E731
        ps = RoutingState(s.visited[perm], s.remaining_capacity, remap(s.position), s.active_depot, s.step)
        q, mask = forward(net, inst, s)
        pq, pmask = forward(net, pinst, ps)
        assert np.array_equal(pmask, mask[node_map])
        worst = max(worst, np.max(np.abs(pq - q[node_map])))
    assert worst < 1e-8


def test_duplicate_node_gets_identical_q(tiny_net):
    rng = np.random.default_rng(6)
    net = tiny_net(h_dim=16, n_heads=4, ff_dim=32, n_blocks=2)
    randomize_bn(net, rng)
    inst = make_instance([[0.2, 0.3], [0.7, 0.1], [0.2, 0.3], [0.9, 0.9]], [4, 5, 4, 2], [[0.5, 0.5]])
    q, mask = forward(net, inst, reset(inst))
    assert mask[:4].all()
    assert q[0] == pytest.approx(q[2], abs=1e-12)


def test_visited_customer_gets_sentinel(tiny_net):
    net = tiny_net()
    inst = generate_instance(5, 1, 30, seed=3)
    s, _, _ = step(reset(inst), 2, inst)
    q, mask = forward(net, inst, s)
    assert q[2] == dc.MASK_SENTINEL and not mask[2]
    assert int(np.argmax(q)) != 2
    assert np.all(q[mask] > dc.MASK_SENTINEL / 2)


def test_all_feasible_means_no_sentinel(tiny_net):
    net = tiny_net()
    inst = generate_instance(5, 1, 30, seed=3)
    s, _, _ = step(reset(inst), 2, inst)
    H, graph = net.encode(network_input(StateBatch.from_states([inst], [s])), 5)
    ctx = net.build_context(H, graph, StateBatch.from_states([inst], [s]))
    q = net.q_values(H, ctx, np.ones((1, 6), bool))
    assert np.all(q.data > dc.MASK_SENTINEL / 2)
    with pytest.raises(ValueError):
        net.q_values(H, ctx, np.zeros((1, 6), bool))


def test_last_customer_state(tiny_net):
    net = tiny_net()
    inst = generate_instance(3, 1, 30, seed=4)
    s = RoutingState(np.array([True, False, True]), 20, 0, 3, 2)
    _, mask = forward(net, inst, s)
    assert mask.tolist() == [False, True, False, True]


def test_visited_flag_changes_embeddings_and_q(tiny_net):
    rng = np.random.default_rng(7)
    for case in range(30):
        net = tiny_net(seed=case)
        n = int(rng.integers(3, 8))
        inst = generate_instance(n, 1, 30, seed=case)
        base = RoutingState(np.zeros(n, bool), 30, n, n, 0)
        i = int(rng.integers(n))
        vis = np.zeros(n, bool)
        vis[i] = True
        flipped = RoutingState(vis, 30, n, n, 1)
        sb0 = StateBatch.from_states([inst], [base])
        sb1 = StateBatch.from_states([inst], [flipped])
        H0, _ = net.encode(network_input(sb0), n)
        H1, _ = net.encode(network_input(sb1), n)
        assert np.linalg.norm(H0.data - H1.data) > 0
        q0, m0 = net.predict(sb0)
        q1, m1 = net.predict(sb1)
        both = m0[0] & m1[0]
        assert np.any(q0[0][both] != q1[0][both])


@pytest.mark.parametrize("multi", [False, True])
def test_batched_forward_matches_single(tiny_net, multi):
    rng = np.random.default_rng(8)
    net = tiny_net(multi_depot=multi, h_dim=16, n_heads=4, ff_dim=32, n_blocks=2)
    randomize_bn(net, rng)
    insts = [generate_instance(7, 2 if multi else 1, 30, seed=k) for k in range(6)]
    states = [walk(i, int(rng.integers(0, 7)), rng) for i in insts]
    qb, mb = net.predict(StateBatch.from_states(insts, states))
    for k, (inst, s) in enumerate(zip(insts, states)):
        q, mask = forward(net, inst, s)
        assert np.array_equal(mask, mb[k])
        assert np.max(np.abs(q - qb[k])) < 1e-9


def test_argmax_invariant_to_constant_shift(tiny_net):
    rng = np.random.default_rng(9)
    net = tiny_net()
    for k in range(20):
        inst = generate_instance(6, 1, 30, seed=k)
        q, mask = forward(net, inst, walk(inst, int(rng.integers(0, 5)), rng))
        shifted = np.where(mask, q + rng.normal() * 100, q)
        assert int(np.argmax(q)) == int(np.argmax(shifted))


def test_forward_rejects_wrong_problem_kind(tiny_net):
    net = tiny_net()
    inst = generate_instance(4, 2, 30, seed=0)
    with pytest.raises(ValueError):
        forward(net, inst, reset(inst))


@pytest.mark.parametrize("multi", [False, True])
def test_end_to_end_grad_check(tiny_net, multi):
    rng = np.random.default_rng(10 + multi)
    worst = 0.0
    for seed in range(3):
        net = tiny_net(multi_depot=multi, seed=seed)
        insts = [generate_instance(4, 2 if multi else 1, 30, seed=seed * 10 + k) for k in range(3)]
        states = [walk(i, k, rng) for k, i in enumerate(insts)]
        sb = StateBatch.from_states(insts, states)

        def loss():
            q, mask = net.forward(sb, training=True)
            return dc.tsum(q * Tensor(mask.astype(float)))

        res = grad_check(loss, net.params, eps=1e-4, max_entries=12, seed=seed)
        worst = max(worst, res.max_rel_error)
    assert worst < 1e-4


def test_save_load_round_trip(tmp_path, tiny_net):
    rng = np.random.default_rng(11)
    net = tiny_net(multi_depot=True)
    randomize_bn(net, rng)
    path = tmp_path / "m.ckpt"
    net.save(path)
    assert path.with_suffix(".json").exists()
    back = QNetwork.load(path)
    assert back.config == net.config
    inst = generate_instance(5, 2, 30, seed=1)
    s = walk(inst, 3, rng)
    assert np.array_equal(forward(back, inst, s)[0], forward(net, inst, s)[0])


def test_clone_is_independent(tiny_net):
    net = tiny_net()
    twin = net.clone()
    twin.params["decoder.score_key.W"].data += 1.0
    assert not np.array_equal(twin.params["decoder.score_key.W"].data, net.params["decoder.score_key.W"].data)
