import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maelm.rank import norm_composite, residual_decompose
from maelm.theory import (
    ConstructionError,
    TheoremInstance,
    compute_epsilon,
    random_chain,
    random_instance,
    refresh_mixing,
    theorem_sweep,
    verify_theorem_depth,
    verify_theorem_step,
    wide_spread_instance,
)


def brute_attention(h_r, h_m, wq, wk, wv, wo):
    """Real rows attend over real and mask rows; plain loops over queries."""
    full = np.vstack([h_r, h_m])
    d = h_r.shape[1]
    out = np.empty((h_r.shape[0], wo.shape[1]))
    for i, q in enumerate(h_r):
        logits = np.array([(q @ wq) @ (k @ wk) / math.sqrt(d) for k in full])
        w = np.exp(logits - logits.max())
        out[i] = (w / w.sum()) @ full @ wv @ wo
    return out


def test_epsilon_examples():
    ones = np.ones((2, 2))
    u = np.array([[0.5, 0.5]])
    inst = TheoremInstance(np.eye(2), u, ones, ones, ones, ones)
    # |W^QK|_1 = 2 sqrt 2, |W^VO|_{1,inf} = 4, |U|_inf = 1
    assert compute_epsilon(inst) == pytest.approx(2 * math.sqrt(2) * 4 * 1 * 2, rel=1e-14)
    zero = TheoremInstance(np.eye(2), u, np.zeros((2, 2)), ones, ones, ones)
    assert compute_epsilon(zero) == 0.0


def test_u_rows_must_sum_to_one():
    with pytest.raises(ConstructionError):
        TheoremInstance(np.eye(2), np.array([[0.5, 0.6]]), *(np.eye(2),) * 4)


def test_external_mask_block_must_match_construction():
    inst = random_instance(0)
    with pytest.raises(ConstructionError):
        verify_theorem_step(inst, h_m=inst.h_m + 1e-6)
    verify_theorem_step(inst, h_m=inst.h_m.copy())


def test_rank_one_input_is_a_fixed_point():
    rng = np.random.default_rng(0)
    h = rng.normal(size=4)
    inst = TheoremInstance(np.tile(h, (5, 1)), rng.dirichlet(np.ones(5), size=2), *(rng.normal(size=(4, 4)) for _ in range(4)))
    res = verify_theorem_step(inst)
    assert res.holds and res.in_regime
    assert res.lhs == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_constructed_outputs_match_brute_force_attention(seed):
    inst = random_instance(seed)
    res = verify_theorem_step(inst)
    expected = brute_attention(inst.h_r, inst.h_m, inst.wq, inst.wk, inst.wv, inst.wo)
    np.testing.assert_allclose(res.trace.h_prime_r, expected, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(res.trace.r_prime, expected - res.trace.h_prime, atol=1e-12)
    assert res.rhs == pytest.approx(4 * res.epsilon * norm_composite(residual_decompose(inst.h_r).r) ** 3)


def test_norm_bound_holds_over_many_instances():
    for seed in range(60):
        res = verify_theorem_step(random_instance(seed))
        assert res.in_regime
        assert res.holds, (seed, res.lhs, res.rhs)


def test_mixing_sandwich_holds_for_nonnegative_u():
    for seed in range(60):
        res = verify_theorem_step(random_instance(seed))
        assert res.u_nonnegative
        assert res.mixing_sandwich, seed


def test_entrywise_residual_sandwich_is_not_implied():
    # R W^VO has entries of both signs, so no one-sided band around it can
    # contain R' in general; recorded rather than asserted as a theorem.
    fails = sum(not verify_theorem_step(random_instance(s)).sandwich for s in range(40))
    assert fails > 0


def test_out_of_regime_instance_is_flagged():
    res = verify_theorem_step(wide_spread_instance(0))
    assert not res.in_regime


def test_trace_serializes(tmp_path):
    res = verify_theorem_step(random_instance(3))
    data = json.loads(res.trace.dump(tmp_path / "t.json").read_text())
    assert set(data) >= {"s_rr", "s_rm", "f_tilde", "r_prime", "d"}
    np.testing.assert_allclose(data["r_prime"], res.trace.r_prime)


def test_refresh_mixing_recovers_u():
    rng = np.random.default_rng(4)
    h_r = rng.normal(size=(4, 6))
    u = rng.dirichlet(np.ones(4), size=3)
    np.testing.assert_allclose(refresh_mixing(h_r, u @ h_r), u, atol=1e-10)
    with pytest.raises(ConstructionError):
        refresh_mixing(h_r, rng.normal(size=(2, 6)) * 10)


def test_single_layer_depth_reduces_to_step():
    inst = random_instance(5)
    depth = verify_theorem_depth(inst.h_r, inst.u, [(inst.wq, inst.wk, inst.wv, inst.wo)])
    step = verify_theorem_step(inst)
    assert depth.norms[1] == pytest.approx(step.lhs)
    assert depth.bound == pytest.approx(step.rhs)
    assert depth.holds == step.holds


def test_depth_requires_layers():
    with pytest.raises(ValueError):
        verify_theorem_depth(np.eye(2), np.array([[0.5, 0.5]]), [])


@pytest.mark.parametrize("seed", range(8))
def test_three_layer_chains_contract(seed):
    *_, res = random_chain(seed)
    assert res.contraction < 1.0 and res.in_regime
    assert res.holds
    assert res.strictly_decreasing
    assert len(res.norms) == 4


def test_sweep_counts_are_consistent():
    summary, rows = theorem_sweep(20, depth_chains=3)
    assert summary.in_regime + summary.out_of_regime == 20
    assert summary.hold + summary.fail == summary.in_regime
    assert summary.line() == f"{summary.in_regime} in-regime, {summary.hold} hold, {summary.fail} fail"
    assert len(rows) == 23 and summary.depth_pass == 3


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_instances_are_seeded_and_within_size_limits(seed):
    a, b = random_instance(seed), random_instance(seed)
    assert np.array_equal(a.h_r, b.h_r) and np.array_equal(a.u, b.u)
    n, d = a.h_r.shape
    assert 2 <= n <= 8 and 1 <= a.u.shape[0] <= 4 and 2 <= d <= 16
    np.testing.assert_allclose(a.u.sum(axis=1), 1.0, atol=1e-12)
