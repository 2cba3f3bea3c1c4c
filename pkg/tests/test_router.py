import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drnet.errors import DomainError, RoutingError, RoutingShapeError
from drnet.router import (InferenceRouting, RouterNet, TrainRouting, gumbel_sample, recalibrate,
                          route_threshold, router_forward)
from drnet.tensor import Tensor, check_gradients, ops


def _router(in_ch=6, c=8, k=5, seed=0, dtype=np.float32):
    return RouterNet(in_ch, c, k, np.random.default_rng(seed), dtype=dtype)


# -- RouterNet -----------------------------------------------------------------

def test_router_emits_c_by_k_logits():
    r = _router()
    x = Tensor(np.random.default_rng(0).standard_normal((3, 3, 8, 8)).astype(np.float32))
    out = router_forward(r, x, x)
    assert out.shape == (3, 8, 5) and out.data[0].size == 40


def test_zero_head_gives_zero_logits_and_uniform_weights():
    r = _router()
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 8, 8)).astype(np.float32))
    logits = router_forward(r, x, x)
    np.testing.assert_array_equal(logits.data, 0.0)
    np.testing.assert_allclose(recalibrate(logits, 1.0).data, 0.2, rtol=1e-6)


def test_identical_rows_identical_logits():
    r = _router(seed=3)
    r.head.weight.data[...] = np.random.default_rng(1).standard_normal(r.head.weight.shape)
    row = np.random.default_rng(0).standard_normal((1, 3, 8, 8)).astype(np.float32)
    x = Tensor(np.repeat(row, 4, axis=0))
    out = router_forward(r, x, x).data
    for i in range(1, 4):
        np.testing.assert_array_equal(out[i], out[0])


def test_router_output_independent_of_spatial_extent():
    r = _router()
    for h in (4, 7, 16):
        x = Tensor(np.zeros((1, 3, h, h), np.float32))
        assert router_forward(r, x, x).shape == (1, 8, 5)


def test_router_channel_mismatch():
    r = _router(in_ch=6)
    x = Tensor(np.zeros((1, 4, 8, 8), np.float32))
    with pytest.raises(RoutingShapeError):
        router_forward(r, x, x)


# -- Gumbel noise ------------------------------------------------------------------

def test_gumbel_at_half():
    assert -math.log(math.log(2.0)) == pytest.approx(0.36651292, abs=1e-8)


class _FixedIntegers:
    """Stands in for a Generator so gumbel_sample sees chosen grid points."""

    def __init__(self, ks):
        self.ks = np.asarray(ks, dtype=np.int64)

    def integers(self, lo, hi, size, dtype):
        return self.ks.reshape(size)


def test_gumbel_grid_midpoint_and_monotone():
    half = 2 ** 51
    ks = [0, 1000, half - 1, half, 2 ** 52 - 2, 2 ** 52 - 1]
    g, u = gumbel_sample((6,), _FixedIntegers(ks), return_uniform=True)
    assert np.all((u > 0) & (u < 1)) and np.all(np.isfinite(g))
    assert np.all(np.diff(g) > 0)
    assert g[3] == pytest.approx(-math.log(-math.log(u[3])), abs=1e-12)
    assert u[3] == pytest.approx(0.5, abs=1e-15)


def test_gumbel_mean_is_euler_mascheroni():
    g = gumbel_sample((100_000,), np.random.default_rng(0))
    assert abs(g.mean() - 0.5772156649) < 0.01


# -- recalibration -----------------------------------------------------------------

@pytest.mark.parametrize("tau", [0.05, 1.0, 7.0])
def test_equal_logits_uniform(tau):
    np.testing.assert_allclose(recalibrate(np.full((3, 5), 2.0), tau).data, 0.2, atol=1e-15)


def test_high_temperature_is_uniform():
    logits = np.random.default_rng(0).uniform(-50, 50, (100, 5))
    w = recalibrate(logits, 1e6).data
    assert np.abs(w - 0.2).max() < 1e-3


def test_low_temperature_argmax_frequency_two_branches():
    rng = np.random.default_rng(0)
    logits = np.tile([1.0, 0.0], (10_000, 1))
    w = recalibrate(logits, 0.01, gumbel_sample(logits.shape, rng)).data
    freq = np.mean(w.argmax(axis=1) == 0)
    assert abs(freq - math.e / (math.e + 1)) < 0.02


def test_nonpositive_temperature():
    with pytest.raises(DomainError):
        recalibrate(np.zeros((1, 5)), 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_recalibrate_pathwise_gradient(seed):
    r = np.random.default_rng(seed)
    logits = Tensor(r.standard_normal((3, 5)), requires_grad=True)
    g = gumbel_sample((3, 5), r)
    proj = Tensor(r.standard_normal((3, 5)))
    err = check_gradients(lambda: ops.sum(ops.mul(recalibrate(logits, 1.0, g).weights, proj)), [logits])
    assert err < 1e-4


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)),
       st.floats(0.05, 1e6), st.booleans())
def test_simplex_closure(logits, tau, noisy):
    g = gumbel_sample(logits.shape, np.random.default_rng(0)) if noisy else None
    w = recalibrate(logits, tau, g).data
    assert np.all(np.isfinite(w)) and np.all(w >= 0) and np.all(w <= 1)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)
    z = (logits + (0 if g is None else g)) / tau
    spread = np.ptp(z, axis=-1).max()
    if spread < 700:  # beyond this exp underflows to exactly 0
        assert np.all(w > 0)
    if spread < 36:  # beyond this the losers' mass is below half an ulp of 1
        assert np.all(w < 1)


# -- threshold routing ---------------------------------------------------------------

def test_route_example_two_branches():
    d = route_threshold(np.array([0.5, 0.3, 0.1, 0.05, 0.05]), 0.8)
    assert d.selected() == [0, 1]
    assert d.mass == pytest.approx(0.8)
    np.testing.assert_allclose(d.rescaled[:2], [0.625, 0.375])
    assert np.all(d.rescaled[2:] == 0)


def test_route_threshold_one_selects_all_unscaled():
    w = np.array([0.4, 0.1, 0.2, 0.25, 0.05])
    d = route_threshold(w, 1.0)
    assert d.mask.all() and int(d.count) == 5
    np.testing.assert_array_equal(d.rescaled, w)


def test_route_single_dominant_branch():
    d = route_threshold(np.array([0.95, 0.02, 0.01, 0.01, 0.01]), 0.8)
    assert d.selected() == [0]
    assert d.rescaled[0] == pytest.approx(1.0)


def test_route_tie_break_ascending_index():
    d = route_threshold(np.full(5, 0.2), 0.5)
    assert d.selected() == [0, 1, 2]


def test_uniform_float32_weights_at_point_eight_select_four():
    d = route_threshold(np.full((3, 8, 5), 0.2, np.float32), 0.8)
    assert np.all(d.count == 4)
    assert np.all(d.mask[..., :4]) and not d.mask[..., 4].any()


def test_route_errors():
    with pytest.raises(RoutingError):
        route_threshold(np.zeros((2, 0)), 0.5)
    with pytest.raises(DomainError):
        route_threshold(np.full(5, 0.2), 0.0)
    with pytest.raises(DomainError):
        route_threshold(np.full(5, 0.2), 1.5)


def brute_force(w, T):
    """Smallest subset size reaching T and the best mass at that size, by enumeration."""
    k = len(w)
    for size in range(1, k + 1):
        best = max(math.fsum(w[list(s)]) for s in itertools.combinations(range(k), size))
        if best >= T:
            return size, best
    return k, math.fsum(w)


def _random_rows(n, seed):
    r = np.random.default_rng(seed)
    rows = r.dirichlet(np.full(5, 0.6), n)
    ts = r.uniform(0.05, 1.0, n)
    return rows, ts


def check_routing_invariants(rows, ts):
    for w, T in zip(rows, ts):
        d = route_threshold(w, T)
        sel = d.selected()
        s = np.sort(w)[::-1]
        # minimal prefix of the descending order
        assert d.mass >= T
        if len(sel) > 1:
            assert s[: len(sel) - 1].sum() < T
        assert sorted(sel) == sorted(np.flatnonzero(d.mask))
        np.testing.assert_allclose(d.rescaled.sum(), 1.0, atol=1e-6)
        assert all(w[b] >= w[o] for b in sel for o in range(5) if o not in sel)
        yield d, w, T


def test_routing_matches_brute_force_subset_search():
    rows, ts = _random_rows(10_000, 0)
    for d, w, T in check_routing_invariants(rows, ts):
        size, best = brute_force(w, T)
        assert int(d.count) == size
        assert d.mass == pytest.approx(best, abs=1e-12)


def test_routing_monotone_in_threshold():
    rows, _ = _random_rows(2000, 1)
    ts = np.linspace(0.05, 1.0, 12)
    prev = None
    for T in ts:
        d = route_threshold(rows, T)
        if prev is not None:
            assert np.all(d.mask >= prev.mask)
        prev = d


def test_batched_routing_matches_rowwise():
    rows, _ = _random_rows(200, 2)
    batch = rows.reshape(10, 4, 5, 5)
    d = route_threshold(batch, 0.7)
    for idx in np.ndindex(10, 4, 5):
        dr = route_threshold(batch[idx], 0.7)
        np.testing.assert_array_equal(d.mask[idx], dr.mask)
        np.testing.assert_array_equal(d.rescaled[idx], dr.rescaled)


# -- routing policies --------------------------------------------------------------------

def test_train_routing_none_mode_is_uniform_and_router_free():
    r = _router()
    x = Tensor(np.zeros((2, 3, 8, 8), np.float32))
    pol = TrainRouting("none", 1.0)
    cr = pol.cell_routing(0, r, x, x, True)
    np.testing.assert_allclose(cr.weights.data, 0.2)


def test_drop_branch_renormalises_and_keeps_a_branch():
    r = _router()
    x = Tensor(np.random.default_rng(0).standard_normal((16, 3, 8, 8)).astype(np.float32))
    pol = TrainRouting("softmax", 1.0, drop_branch=0.9, drop_rng=np.random.default_rng(0))
    w = pol.cell_routing(0, r, x, x, True).weights.data
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, rtol=1e-5)
    assert np.all((w > 0).sum(axis=-1) >= 1)


def test_drop_connection_scales_survivors():
    r = _router()
    x = Tensor(np.zeros((64, 3, 8, 8), np.float32))
    pol = TrainRouting("softmax", 1.0, drop_connection=0.5, drop_rng=np.random.default_rng(0))
    w = pol.cell_routing(0, r, x, x, True).weights.data
    sums = w.sum(axis=-1)
    assert set(np.round(np.unique(sums), 5)) <= {0.0, 2.0}


def test_inference_routing_sampled_needs_rng():
    r = _router()
    x = Tensor(np.zeros((1, 3, 8, 8), np.float32))
    with pytest.raises(DomainError):
        InferenceRouting(1.0, weight_mode="sampled").cell_routing(0, r, x, x)
