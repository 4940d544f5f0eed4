"""Smoke tests for the python surface; the numeric depth lives in the C++
suites, so these only pin the worked example and check that every exported
operation runs and agrees with itself across the bindings."""

import json

import numpy as np
import pytest

import lpfa


def test_worked_example_bits():
    assert lpfa.b16_bits(-2.4071154594421387) == 0xC01A
    assert lpfa.b16_value(0xC01A) == -2.40625
    assert lpfa.b16_bits(-2.296875) == 0xC013
    assert lpfa.b16_value(0xC097) == -4.71875

    r = lpfa.add_b16(-2.40625, -2.296875)
    assert r["exact"] == -4.703125
    assert r["value"] == -4.6875  # midpoint, ties-even keeps the even fraction
    assert not r["rounded_up"]
    assert r["overflow_shift"]


def test_rounding_bit_table():
    table = lpfa.rounding_bit_table()
    assert len(table) == 10
    for lhs, rhs, kept, rounding_bit in table:
        assert kept == (lhs + rhs) >> 1
        assert rounding_bit == bool((lhs + rhs) & 1)


def test_snap_matches_bit_round_trip():
    xs = np.linspace(-3.0, 3.0, 101)
    snapped = lpfa.snap_array(xs)
    for x, s in zip(xs, snapped):
        assert s == lpfa.b16_value(lpfa.b16_bits(x))


def test_prefix_errors_zero_on_exact_sums():
    events = lpfa.prefix_errors([1.0, 0.5, 0.25], [1.0, 1.0, 1.0])
    assert [e["error"] for e in events] == [0.0, 0.0, 0.0]
    assert [e["position"] for e in events] == [0, 1, 2]


@pytest.fixture
def instance():
    rng = np.random.default_rng(7)
    q = lpfa.snap_array(rng.normal(size=(16, 8)))
    k = lpfa.snap_array(rng.normal(size=(16, 8)))
    v = lpfa.snap_array(rng.normal(size=(16, 8)))
    return q, k, v


def test_attention_shapes_and_exact_agreement(instance):
    q, k, v = instance
    out = lpfa.attention(q, k, v, plan="exact")
    assert out["O"].shape == (16, 8)
    assert np.array_equal(out["O"], out["O_hp"])  # no lp stages to diverge

    lp = lpfa.attention(q, k, v, plan="lp")
    assert float(np.abs(lp["O"] - lp["O_hp"]).max()) > 0.0


def test_flash_matches_non_tiled(instance):
    q, k, v = instance
    ref = lpfa.attention(q, k, v, plan="exact")
    for blk in (1, 4, 8, 16):
        tiled = lpfa.flash(q, k, v, plan="exact", block_rows=blk, block_cols=blk)
        assert float(np.abs(tiled["O"] - ref["O"]).max()) < 1e-10
    full = lpfa.flash(q, k, v, plan="lp")
    lp = lpfa.attention(q, k, v, plan="lp")
    assert np.array_equal(full["O"], lp["O"])  # one block is the non-tiled path


def test_stabilized_flash_shift_invariance(instance):
    q, k, v = instance
    ref = lpfa.attention(q, k, v, plan="exact")
    stab = lpfa.flash(q, k, v, plan="exact", block_rows=8, block_cols=8,
                      stabilized=True)
    assert float(np.abs(stab["O"] - ref["O"]).max()) < 1e-10


def test_gradients_match_finite_differences(instance):
    q, k, v = instance
    dO = np.ones((16, 8))
    g = lpfa.attention_grads(q, k, v, dO, plan="exact")
    eps = 1e-5
    rng = np.random.default_rng(3)
    for _ in range(10):
        i, j = rng.integers(0, 16), rng.integers(0, 8)
        up, dn = q.copy(), q.copy()
        up[i, j] += eps
        dn[i, j] -= eps
        fd = (lpfa.attention(up, k, v, plan="exact")["O"].sum()
              - lpfa.attention(dn, k, v, plan="exact")["O"].sum()) / (2 * eps)
        assert abs(fd - g["dQ"][i, j]) < 1e-4 * max(1.0, abs(fd))


def test_delta_sources_agree_in_exact_mode(instance):
    q, k, v = instance
    dO = lpfa.snap_array(np.full((16, 8), 0.5))
    grads = [lpfa.attention_grads(q, k, v, dO, plan="exact", delta_source=s)
             for s in ("dO_O_hp", "dP_P", "recompute_PV_hp")]
    for other in grads[1:]:
        assert float(np.abs(grads[0]["dQ"] - other["dQ"]).max()) < 1e-6


def test_gradient_bias_decomposition(instance):
    q, k, v = instance
    rng = np.random.default_rng(11)
    x = lpfa.snap_array(rng.normal(size=(16, 12)))
    dO = lpfa.snap_array(rng.normal(size=(16, 8)))
    rep = lpfa.gradient_bias(q, k, v, dO, x)
    assert rep["coeffs"].shape == (16,)
    assert rep["dwq_diff"].shape == (8, 12)
    assert rep["bias_sum"] == pytest.approx(rep["coeffs"].sum(), rel=1e-12)


def test_sign_probe_measures_the_engineered_workload():
    p = lpfa.sign_probe(seed=1)
    assert p["tie_rows"] >= 2
    assert p["mean_o_gap"] < 0.0
    assert p["mean_coeff"] > 0.0
    assert p["max_dO"] < 0.0


def test_experiment_round_trips_and_is_deterministic():
    a = lpfa.experiment(steps=3)
    b = lpfa.experiment(steps=3)
    assert a == b  # bitwise-identical JSON
    rep = json.loads(a)
    assert rep["schema"] == "lpfa.comparison" and rep["version"] == 1
    names = [arm["name"] for arm in rep["arms"]]
    assert names == ["lp", "stabilized-lp"]
    assert len(rep["arms"][0]["bias_cum"]) == 3


def test_bad_arguments_raise():
    with pytest.raises(ValueError):
        lpfa.attention(np.ones((4, 4)), np.ones((4, 4)), np.ones((4, 4)),
                       plan="fp8")
    with pytest.raises(ValueError):
        lpfa.snap(1.0, grid="f16")
    with pytest.raises(ValueError):
        lpfa.attention(np.ones(4), np.ones((4, 4)), np.ones((4, 4)))
