import numpy as np
import pytest

from drnet.backbone import (BackboneConfig, Network, build_topology, count_candidate_architectures,
                            drnet_config, forward, param_count, plan_cells)
from drnet.branches import BranchKind
from drnet.errors import ConfigError, RoutingShapeError
from drnet.nn import Linear
from drnet.resource import precompute_costs
from drnet.router import CellRouting, FixedRouting
from drnet.tensor import Tensor

from conftest import small_config


def _x(n=2, size=8, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 3, size, size)).astype(np.float32)


def test_connections_per_cell():
    cfg = BackboneConfig(N=4, n=2)
    assert cfg.C == 8 and len(build_topology(cfg).connections) == 8


def test_default_topology_shape():
    t = build_topology(BackboneConfig(topology_seed=3))
    assert t.preds[0] == (1, 0)
    for i, (a, b) in enumerate(t.preds[1:], start=3):
        assert a == i - 1 and b in (0, 1)


def test_single_fan_in_is_a_chain():
    t = build_topology(BackboneConfig(n=1, N=4))
    assert t.preds == ((1,), (2,), (3,), (4,))


def test_topology_deterministic_and_seed_dependent():
    a = [build_topology(BackboneConfig(N=12, topology_seed=s)).preds for s in (5, 5, 6)]
    assert a[0] == a[1]
    assert a[0] != a[2]


def test_config_errors():
    with pytest.raises(ConfigError):
        BackboneConfig(n=3)
    with pytest.raises(ConfigError):
        BackboneConfig(N=0)
    with pytest.raises(ConfigError):
        BackboneConfig(aux_weight=0)
    with pytest.raises(ConfigError):
        BackboneConfig(B_plus_1=4)
    with pytest.raises(ConfigError):
        BackboneConfig.from_dict({"L": 2, "depth": 3})


def test_default_reduction_and_aux_cells():
    cfg = BackboneConfig(L=10)
    assert cfg.reduction_cells == (3, 6) and cfg.aux_cell == 6
    cfg = BackboneConfig(L=5)
    assert cfg.reduction_cells == (1, 3) and cfg.aux_cell == 3


def test_config_dict_round_trip():
    cfg = drnet_config("M")
    assert BackboneConfig.from_dict(cfg.to_dict()) == cfg


def test_spatial_and_channel_bookkeeping():
    plans = plan_cells(drnet_config("S"))
    assert [p.node_extent for p in plans] == [32, 16, 16, 8, 8]
    assert [p.channels for p in plans] == [15, 30, 30, 60, 60]
    assert all(p.out_channels == 4 * p.channels for p in plans)
    for p in plans:
        topo = build_topology(drnet_config("S"))
        for (src, _), s in zip(topo.connections, p.strides):
            assert s == (2 if p.reduction and src < 2 else 1)


def test_drnet_s_builds_and_emits_ten_logits():
    net = Network(drnet_config("S"), seed=0)
    logits, aux = net.forward(_x(1, 32), FixedRouting([np.full((8, 5), 0.2, np.float32)] * 5), training=False)
    assert logits.shape == (1, 10) and aux is None


def test_aux_logits_only_in_training():
    net = Network(small_config(), seed=0)
    w = [np.full((8, 5), 0.2, np.float32)] * 2
    _, aux = forward(net, _x(), w, "train")
    assert aux is not None and aux.shape == (2, 3)
    _, aux = forward(net, _x(), w, "eval")
    assert aux is None


def test_weight_row_mismatch():
    net = Network(small_config(), seed=0)
    with pytest.raises(RoutingShapeError):
        forward(net, _x(), [np.full((7, 5), 0.2, np.float32)] * 2, "eval")


def test_param_count_linear():
    assert Linear(10, 5, np.random.default_rng(0)).num_params() == 55


def test_skip_only_network_has_no_branch_parameters():
    cfg = small_config(B_plus_1=1, catalog=("skip_connect",), reduction_cells=())
    net = Network(cfg, seed=0)
    assert "branches" not in net.param_breakdown()
    assert param_count(net) == sum(net.param_breakdown().values())
    m = precompute_costs(net)
    assert not m.cost.any() and m.full_cost == m.fixed_cost


def test_candidate_architecture_counts():
    assert count_candidate_architectures(BackboneConfig(L=10)) == 31 ** 80
    assert 2e119 <= 31 ** 80 < 2.1e119
    assert count_candidate_architectures(BackboneConfig(L=3, B_plus_1=1, catalog=("skip_connect",))) == 1
    cfg = BackboneConfig(L=1, N=1, n=1, B_plus_1=2, catalog=("skip_connect", "max_pool_3x3"), reduction_cells=())
    assert count_candidate_architectures(cfg) == 3


def _cell_inputs(net, x):
    s = net.stem_bn(net.stem_conv(Tensor(x)), False)
    return net.cells[0].preprocess(s, s, False)


def test_skip_one_hot_accumulates_predecessors():
    cfg = small_config(reduction_cells=())
    net = Network(cfg, seed=0)
    cell = net.cells[0]
    x0, x1 = _cell_inputs(net, _x())
    skip = cfg.kinds.index(BranchKind.SKIP_CONNECT)
    w = np.zeros((2, cfg.C, 5), np.float32)
    w[:, :, skip] = 1.0
    out = cell(x0, x1, CellRouting(Tensor(w)), False).data
    nodes = [x0.data, x1.data]
    for preds in net.topology.preds:
        nodes.append(sum(nodes[j] for j in preds))
    np.testing.assert_array_equal(out, np.concatenate(nodes[2:], axis=1))


def test_node_is_linear_in_branch_outputs():
    cfg = small_config(reduction_cells=())
    net = Network(cfg, seed=0)
    cell = net.cells[0]
    x0, x1 = _cell_inputs(net, _x())
    w = np.random.default_rng(0).dirichlet(np.ones(5), (2, cfg.C)).astype(np.float32)
    w2 = w.copy()
    w2[:, :2] *= 2  # both connections entering node 2
    c = cfg.init_channels
    a = cell(x0, x1, CellRouting(Tensor(w)), False).data[:, :c]
    b = cell(x0, x1, CellRouting(Tensor(w2)), False).data[:, :c]
    np.testing.assert_array_equal(b, 2 * a)


def reference_forward_uniform(net, x):
    """Independent evaluation with every connection averaging its five branch outputs."""
    s = net.stem_bn(net.stem_conv(Tensor(x)), False).data
    s0 = s1 = s
    for cell in net.cells:
        a, b = cell.preprocess(Tensor(s0), Tensor(s1), False)
        nodes = [a.data, b.data]
        k = 0
        for preds in net.topology.preds:
            total = 0.0
            for j in preds:
                outs = [br(Tensor(nodes[j]), False).data for br in cell.branches[k].items]
                total = total + np.mean(np.stack(outs), axis=0, dtype=np.float64)
                k += 1
            nodes.append(total)
        s0, s1 = s1, np.concatenate(nodes[2:], axis=1)
    return s1.mean(axis=(2, 3)) @ net.classifier.weight.data.T.astype(np.float64) + net.classifier.bias.data


def test_uniform_weights_match_reference_averaging():
    net = Network(small_config(), seed=1, dtype=np.float64)
    x = _x().astype(np.float64)
    logits, _ = forward(net, x, [np.full((8, 5), 0.2)] * 2, "eval")
    np.testing.assert_allclose(logits.data, reference_forward_uniform(net, x), rtol=1e-9, atol=1e-10)


def test_cell_inputs_are_previous_outputs():
    net = Network(small_config(L=4, reduction_cells=(1,)), seed=0)
    net.forward(_x(), FixedRouting([np.full((8, 5), 0.2, np.float32)] * 4), trace=True)
    tr = net.trace
    for l in range(2, 4):
        np.testing.assert_array_equal(tr["inputs"][l][0], tr["outputs"][l - 2])
        np.testing.assert_array_equal(tr["inputs"][l][1], tr["outputs"][l - 1])


def test_fixed_seeds_give_bitwise_identical_logits():
    outs = []
    for _ in range(2):
        net = Network(small_config(), seed=7)
        outs.append(forward(net, _x(), [np.full((8, 5), 0.2, np.float32)] * 2, "eval")[0].data)
    np.testing.assert_array_equal(outs[0], outs[1])


@pytest.mark.parametrize("size", ["S", "M", "L"])
def test_router_flops_under_two_percent(size):
    net = Network(drnet_config(size), seed=0)
    m = precompute_costs(net)
    assert m.fixed_parts["routers"] / m.full_cost < 0.02


def test_parameter_names_unique():
    net = Network(small_config(), seed=0)
    names = [n for n, _ in net.named_parameters()]
    assert len(names) == len(set(names))
    assert all(p.name == n for n, p in net.named_parameters())
