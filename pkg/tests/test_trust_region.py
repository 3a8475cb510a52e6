import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from talbo.trust_region import TrustRegionState, is_success, restart_trust_region, trust_region_bounds, update_trust_region

L_MIN = 0.5**7

# (batch max, expected (L, n_succ, n_fail, y*, restart)) with N_succ_tol=3, N_fail_tol=2, y*0 = 1
GOLDEN = [
    (1.0005, (0.8, 0, 1, 1.0005, False)),  # below 1 + 1e-3
    (1.001, (0.4, 0, 0, 1.001, False)),  # not strictly above 1.0005 * 1.001
    (1.0011, (0.4, 0, 1, 1.0011, False)),
    (1.1, (0.4, 1, 0, 1.1, False)),
    (1.2, (0.4, 2, 0, 1.2, False)),
    (1.3, (0.8, 0, 0, 1.3, False)),
    (1.4, (0.8, 1, 0, 1.4, False)),
    (1.5, (0.8, 2, 0, 1.5, False)),
    (1.5, (0.8, 0, 1, 1.5, False)),
    (1.5, (0.4, 0, 0, 1.5, False)),
    (1.5, (0.4, 0, 1, 1.5, False)),
    (1.5, (0.2, 0, 0, 1.5, False)),
    (1.5, (0.2, 0, 1, 1.5, False)),
    (1.5, (0.1, 0, 0, 1.5, False)),
    (1.5, (0.1, 0, 1, 1.5, False)),
    (1.5, (0.05, 0, 0, 1.5, False)),
    (1.5, (0.05, 0, 1, 1.5, False)),
    (1.5, (0.025, 0, 0, 1.5, False)),
    (1.5, (0.025, 0, 1, 1.5, False)),
    (1.5, (0.0125, 0, 0, 1.5, False)),
    (1.5, (0.0125, 0, 1, 1.5, False)),
    (1.5, (0.00625, 0, 0, 1.5, True)),
    (1.5, (0.00625, 0, 1, 1.5, True)),
    (1.5, (0.003125, 0, 0, 1.5, True)),
    (1.5, (0.003125, 0, 1, 1.5, True)),
    (1.5, (0.0015625, 0, 0, 1.5, True)),
    (1.5, (0.0015625, 0, 1, 1.5, True)),
    (1.5, (0.00078125, 0, 0, 1.5, True)),
    (2.0, (0.00078125, 1, 0, 2.0, True)),
    (2.5, (0.00078125, 2, 0, 2.5, True)),
    (3.0, (0.0015625, 0, 0, 3.0, True)),
    (3.5, (0.0015625, 1, 0, 3.5, True)),
    (4.0, (0.0015625, 2, 0, 4.0, True)),
    (4.5, (0.003125, 0, 0, 4.5, True)),
    (4.5, (0.003125, 0, 1, 4.5, True)),
    (4.5, (0.0015625, 0, 0, 4.5, True)),
    (4.5, (0.0015625, 0, 1, 4.5, True)),
    (4.5, (0.00078125, 0, 0, 4.5, True)),
    (-1.0, (0.00078125, 0, 1, 4.5, True)),
    (-2.0, (0.000390625, 0, 0, 4.5, True)),
    (4.50449, (0.000390625, 0, 1, 4.50449, True)),
    (4.5046, (0.0001953125, 0, 0, 4.5046, True)),  # 4.5046 < 4.50449 * 1.001
    (5.0, (0.0001953125, 1, 0, 5.0, True)),
    (6.0, (0.0001953125, 2, 0, 6.0, True)),
    (6.0, (0.0001953125, 0, 1, 6.0, True)),
    (6.0, (9.765625e-05, 0, 0, 6.0, True)),
    (6.0, (9.765625e-05, 0, 1, 6.0, True)),
    (6.0, (4.8828125e-05, 0, 0, 6.0, True)),
    (6.0, (4.8828125e-05, 0, 1, 6.0, True)),
    (6.0, (2.44140625e-05, 0, 0, 6.0, True)),
]


def make(**kw):
    kw.setdefault("center", np.zeros(3))
    kw.setdefault("best_value", 1.0)
    return TrustRegionState(**kw)


def test_golden_tape():
    assert len(GOLDEN) == 50
    state = make(failure_tolerance=2)
    for i, (value, expected) in enumerate(GOLDEN, 1):
        state = update_trust_region(state, [value - 10.0, value])
        got = (state.length, state.success_count, state.failure_count, state.best_value, state.restart_triggered)
        assert got == expected, f"event {i}"


def test_bounds_examples():
    s = make(center=np.zeros(4))
    lo, hi = trust_region_bounds(s)
    np.testing.assert_array_equal(lo, np.full(4, -0.4))
    np.testing.assert_array_equal(hi, np.full(4, 0.4))
    lo2, hi2 = trust_region_bounds(make(center=np.zeros(4), length=1.6))
    np.testing.assert_array_equal(hi2 - lo2, 2 * (hi - lo))
    lo0, hi0 = trust_region_bounds(make(center=np.array([1.0, 2.0, 3.0]), length=0.0))
    np.testing.assert_array_equal(lo0, hi0)


def test_bounds_use_weights():
    s = make(center=np.array([1.0, -1.0, 0.0]), weights=np.array([1.0, 2.0, 0.5]), length=0.4)
    lo, hi = trust_region_bounds(s)
    np.testing.assert_allclose(lo, [0.8, -1.4, -0.1])
    np.testing.assert_allclose(hi, [1.2, -0.6, 0.1])
    with pytest.raises(ValueError):
        make(weights=np.array([1.0, 0.0, 1.0]))


def test_threshold_boundary():
    assert not is_success(1.0005, 1.0)
    assert is_success(1.0011, 1.0)
    assert not is_success(-0.9995, -1.0)  # threshold uses |y*|
    assert is_success(-0.998, -1.0)


def test_expansion_caps_at_max():
    s = make()
    for _ in range(3):
        s = update_trust_region(s, [s.best_value + 1.0])
    assert s.length == 1.6
    for _ in range(3):
        s = update_trust_region(s, [s.best_value + 1.0])
    assert s.length == 1.6


def test_failures_below_min_trigger_restart():
    s = make(length=1.5 * L_MIN, failure_tolerance=4)
    for _ in range(4):
        s = update_trust_region(s, [0.0])
    assert s.length == pytest.approx(0.75 * L_MIN)
    assert s.restart_triggered


def test_failure_tolerance_rule():
    assert TrustRegionState.create(np.zeros(16), 0.0, batch_size=5).failure_tolerance == 4
    assert TrustRegionState.create(np.zeros(2), 0.0, batch_size=1).failure_tolerance == 4
    assert TrustRegionState.create(np.zeros(40), 0.0, batch_size=10).failure_tolerance == 4
    assert TrustRegionState.create(np.zeros(41), 0.0, batch_size=10).failure_tolerance == 5


def test_restart_resets():
    s = make(length=L_MIN / 2, success_count=0, failure_count=1, restart_triggered=True)
    r = restart_trust_region(s, np.ones(3), 0.37)
    assert r.length == r.length_init == 0.8
    assert r.success_count == r.failure_count == 0
    assert r.best_value == 0.37
    assert not r.restart_triggered
    np.testing.assert_array_equal(r.center, np.ones(3))


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        update_trust_region(make(), [])


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=80))
def test_invariants_along_random_tapes(values):
    s = make(failure_tolerance=3)
    lengths = {0.8 * 2.0**k for k in range(-12, 2)}
    prev_best = s.best_value
    for v in values:
        s = update_trust_region(s, [v])
        assert not (s.success_count > 0 and s.failure_count > 0)
        assert s.best_value >= prev_best
        prev_best = s.best_value
        assert any(abs(s.length - l) < 1e-15 for l in lengths) or s.length < L_MIN / 2
        assert s.length <= s.length_max
