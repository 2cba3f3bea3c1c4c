import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drnet.backbone import Network
from drnet.branches import BranchKind, branch_flops
from drnet.errors import DimensionError
from drnet.resource import ResourceModel, cost_report, expected_resource, precompute_costs, realized_resource
from drnet.router import route_threshold
from drnet.tensor import Tape, Tensor, check_gradients, ops

from conftest import small_config


@pytest.fixture(scope="module")
def two_conn_model():
    return precompute_costs(Network(small_config(N=1, n=2, L=2), seed=0))


@pytest.fixture(scope="module")
def toy_model():
    return precompute_costs(Network(small_config(), seed=0))


def oracle_expected(weights, model):
    total = 0.0
    L, C, K = model.cost.shape
    for l in range(L):
        for c in range(C):
            for b in range(K):
                total += float(weights[l][c][b]) * int(model.cost[l, c, b])
    return total


def test_costs_match_branch_formula_per_site():
    net = Network(small_config(), seed=0)
    m = precompute_costs(net)
    for l, plan in enumerate(net.plans):
        for c, site in enumerate(m.sites[l]):
            for b, kind in enumerate(net.config.kinds):
                ch = plan.channels
                assert m.cost[l, c, b] == branch_flops(kind, (ch, site["extent"], site["extent"]), site["stride"])


def test_sep3_at_16_channel_8x8_site():
    # toy with 8 init channels: a reduction cell at 16 channels and 8x8 node extent
    net = Network(small_config(init_channels=8, input_size=16, reduction_cells=(1,)), seed=0)
    m = precompute_costs(net)
    sep3 = net.config.kinds.index(BranchKind.SEP_CONV_3X3)
    row = [c for c, s in enumerate(m.sites[1]) if s["stride"] == 1 and s["extent"] == 8]
    assert row and all(m.cost[1, c, sep3] == 25_600 for c in row)


def test_stride_one_skip_is_free(toy_model):
    skip = list(toy_model.labels).index("skip_connect")
    for l in range(toy_model.cost.shape[0]):
        for c, site in enumerate(toy_model.sites[l]):
            if site["stride"] == 1:
                assert toy_model.cost[l, c, skip] == 0


def test_costs_are_read_only_integers(toy_model):
    assert toy_model.cost.dtype == np.int64
    with pytest.raises(ValueError):
        toy_model.cost[0, 0, 0] = 1


@pytest.mark.parametrize("seed", range(10))
def test_expected_resource_equals_brute_force(two_conn_model, seed):
    r = np.random.default_rng(seed)
    w = [r.dirichlet(np.ones(5), 2) for _ in range(2)]
    assert expected_resource(w, two_conn_model) == oracle_expected(w, two_conn_model)
    exact = sum(Fraction(float(w[l][c][b])) * int(two_conn_model.cost[l, c, b])
                for l, c, b in itertools.product(range(2), range(2), range(5)))
    assert abs(expected_resource(w, two_conn_model) - float(exact)) <= 1e-9 * float(exact)


def test_expected_resource_one_hot_and_uniform(toy_model):
    L, C, K = toy_model.cost.shape
    for b in range(K):
        w = [np.eye(K)[np.full(C, b)] for _ in range(L)]
        assert expected_resource(w, toy_model) == toy_model.cost[:, :, b].sum()
    w = [np.full((C, K), 1.0 / K) for _ in range(L)]
    assert expected_resource(w, toy_model) == pytest.approx(toy_model.cost.mean(axis=2).sum(), rel=1e-12)


def test_one_hot_expected_equals_realized_minus_fixed(toy_model):
    L, C, K = toy_model.cost.shape
    r = np.random.default_rng(0)
    picks = r.integers(0, K, (L, C))
    w = [np.eye(K)[picks[l]] for l in range(L)]
    decisions = [route_threshold(wl, 0.5) for wl in w]
    assert realized_resource(decisions, toy_model) - toy_model.fixed_cost == expected_resource(w, toy_model)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0, 1))
def test_expected_resource_is_linear(seed, alpha):
    model = precompute_costs(Network(small_config(N=1, L=2), seed=0))
    r = np.random.default_rng(seed)
    w1 = [r.dirichlet(np.ones(5), 2) for _ in range(2)]
    w2 = [r.dirichlet(np.ones(5), 2) for _ in range(2)]
    mix = [alpha * a + (1 - alpha) * b for a, b in zip(w1, w2)]
    lhs = expected_resource(mix, model)
    rhs = alpha * expected_resource(w1, model) + (1 - alpha) * expected_resource(w2, model)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-6)


def test_realized_top2_matches_enumeration(toy_model):
    L, C, K = toy_model.cost.shape
    r = np.random.default_rng(1)
    w = [r.dirichlet(np.ones(K), C) for _ in range(L)]
    masks = []
    for l in range(L):
        m = np.zeros((C, K), bool)
        for c in range(C):
            m[c, np.argsort(-w[l][c], kind="stable")[:2]] = True
        masks.append(m)
    total = toy_model.fixed_cost + sum(int(toy_model.cost[l, c, b]) for l in range(L) for c in range(C)
                                       for b in range(K) if masks[l][c, b])
    assert realized_resource(masks, toy_model) == total


def test_realized_all_and_skip_only(toy_model):
    L, C, K = toy_model.cost.shape
    assert realized_resource([np.ones((C, K), bool)] * L, toy_model) == toy_model.full_cost
    skip_model = precompute_costs(Network(small_config(B_plus_1=1, catalog=("skip_connect",), reduction_cells=()), seed=0))
    assert realized_resource([np.ones((8, 1), bool)] * 2, skip_model) == skip_model.fixed_cost


def test_realized_monotone_in_threshold(toy_model):
    L, C, K = toy_model.cost.shape
    r = np.random.default_rng(2)
    w = [r.dirichlet(np.ones(K), (16, C)) for _ in range(L)]
    prev = None
    for T in np.linspace(0.1, 1.0, 10):
        cur = realized_resource([route_threshold(wl, T) for wl in w], toy_model)
        if prev is not None:
            assert np.all(cur >= prev)
        prev = cur


def test_gradient_of_expected_resource_is_cost(toy_model):
    L, C, K = toy_model.cost.shape
    w = [Tensor(np.random.default_rng(l).dirichlet(np.ones(K), (1, C)), requires_grad=True) for l in range(L)]
    with Tape() as tape:
        total = ops.sum(expected_resource(w, toy_model))
    tape.backward(total)
    for l in range(L):
        np.testing.assert_array_equal(w[l].grad[0], toy_model.cost[l])
    scale = 1.0 / toy_model.full_cost
    err = check_gradients(lambda: ops.scalar_mul(ops.sum(expected_resource(w, toy_model)), scale), w, epsilon=1e-3)
    assert err < 1e-8


def test_tensor_and_array_paths_agree(toy_model):
    r = np.random.default_rng(3)
    w = [r.dirichlet(np.ones(5), (4, 8)) for _ in range(2)]
    t = expected_resource([Tensor(x) for x in w], toy_model).data
    np.testing.assert_allclose(t, expected_resource(w, toy_model), rtol=1e-12)


def test_shape_mismatch(toy_model):
    with pytest.raises(DimensionError):
        expected_resource([np.ones((8, 4))] * 2, toy_model)
    with pytest.raises(DimensionError):
        expected_resource([np.ones((8, 5))], toy_model)


def test_fixed_cost_covers_components(toy_model):
    assert set(toy_model.fixed_parts) == {"stem", "adapters", "routers", "classifier"}
    assert toy_model.fixed_cost == sum(toy_model.fixed_parts.values())


def test_cost_report_is_flat_and_complete(toy_model):
    rows = cost_report(toy_model)
    branch_rows = [r for r in rows if r["kind"] == "branch"]
    assert len(branch_rows) == toy_model.cost.size
    assert sum(r["flops"] for r in rows) == toy_model.full_cost
    assert len({tuple(sorted(r)) for r in rows}) == 1


def test_negative_costs_rejected():
    with pytest.raises(ValueError):
        ResourceModel(np.full((1, 1, 1), -1, np.int64), 0)
