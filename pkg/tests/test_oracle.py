import numpy as np
import pytest

from bittol import oracle


def test_neuron_output_boundary_sits_on_minus_side():
    w = np.array([1, 1, 1], dtype=np.int64)
    x = np.array([1, 1, -1], dtype=np.int64)
    assert oracle.neuron_output(w, x, 1) == -1
    assert oracle.neuron_output(w, x, 0) == 1


def test_min_flips_small_case_by_hand():
    w = np.ones(3, dtype=np.int64)
    x = np.ones(3, dtype=np.int64)
    k, subset = oracle.min_flips_to_change(w, x, 0, 3)
    assert k == 2
    assert len(subset) == 2
    k1, _ = oracle.min_flips_to_change(w, x, 2, 3)
    assert k1 == 1


def test_min_flips_none_when_budget_too_small():
    w = np.ones(5, dtype=np.int64)
    x = np.ones(5, dtype=np.int64)
    k, subset = oracle.min_flips_to_change(w, x, 0, 1)
    assert k is None and subset is None


def test_min_flips_respects_fanin_cap():
    w = np.ones(oracle.EXHAUSTIVE_FANIN_CAP + 1, dtype=np.int64)
    with pytest.raises(ValueError):
        oracle.min_flips_to_change(w, w.copy(), 0, 1)


def _tolerance_num(w, x, s):
    h = int(w @ x)
    return abs(2 * (h - s) - 1)


def test_min_flips_matches_margin_formula_when_reachable():
    """The smallest output-changing flip set has size floor(T/2) + 1.

    T is the positional tolerance num/2.  The bound is tight whenever
    enough weights push toward the boundary, which the fixture filters
    for before asserting.
    """
    rng = np.random.default_rng(12)
    checked = 0
    while checked < 40:
        k_in = 9
        w = (rng.integers(0, 2, k_in) * 2 - 1).astype(np.int64)
        x = (rng.integers(0, 2, k_in) * 2 - 1).astype(np.int64)
        s = int(rng.integers(-4, 5))
        num = _tolerance_num(w, x, s)
        tight = num // 4 + 1  # floor((num/2) / 2) + 1
        h = int(w @ x)
        helpful = int(np.sum(w * x == (1 if h > s else -1)))
        if tight > helpful or tight > k_in:
            continue
        k, _ = oracle.min_flips_to_change(w, x, s, tight)
        assert k == tight, (w, x, s, num, tight, k)
        below, _ = oracle.min_flips_to_change(w, x, s, tight - 1)
        assert below is None
        checked += 1


def test_verify_neuron_tolerance_none_under_precondition():
    rng = np.random.default_rng(3)
    for _ in range(50):
        w = (rng.integers(0, 2, 8) * 2 - 1).astype(np.int64)
        x = (rng.integers(0, 2, 8) * 2 - 1).astype(np.int64)
        s = int(rng.integers(-3, 4))
        num = _tolerance_num(w, x, s)
        for b in (2, 4, 6):
            if num // 2 >= b:
                assert oracle.verify_neuron_tolerance(w, x, s, b) is None


def test_scan_flip_subsets_empty_on_valid_data():
    rng = np.random.default_rng(5)
    w = (rng.integers(0, 2, (12, 8)) * 2 - 1).astype(np.int64)
    x = oracle.all_sign_inputs(8)
    s = rng.integers(-5, 6, 12).astype(np.int64)
    assert oracle.scan_flip_subsets(w, x, s, budget=2) == []


def test_scan_detects_planted_violation_via_wrong_scale():
    """Feeding an integer input with the scale divisor omitted inflates
    the margin past eligibility, so the single-weight flip that does
    change the output must surface as a witness.  This proves the scan
    actually recomputes outputs rather than trusting the bound."""
    w = np.array([[1]], dtype=np.int64)
    x = np.array([[5]], dtype=np.int64)
    s = np.array([0], dtype=np.int64)
    found = oracle.scan_flip_subsets(w, x, s, budget=1, z_div=1)
    assert len(found) == 1
    wit = found[0]
    assert wit.flipped == (0,)
    assert wit.before == 1 and wit.after == -1
    # with the correct divisor the pair is ineligible and the scan is clean
    assert oracle.scan_flip_subsets(w, x, s, budget=1, z_div=5) == []


def test_input_flip_scan_agrees_with_weight_scan():
    rng = np.random.default_rng(6)
    w = (rng.integers(0, 2, (10, 7)) * 2 - 1).astype(np.int64)
    x = oracle.all_sign_inputs(7)
    s = rng.integers(-4, 5, 10).astype(np.int64)
    assert oracle.scan_input_flip_subsets(w, x, s, budget=2) == []
    assert oracle.scan_flip_subsets(w, x, s, budget=2) == []


def test_input_flip_scan_requires_sign_inputs():
    w = np.ones((1, 3), dtype=np.int64)
    x = np.array([[0, 1, 2]], dtype=np.int64)
    with pytest.raises(ValueError):
        oracle.scan_input_flip_subsets(w, x, np.zeros(1, dtype=np.int64), 1)


def test_all_sign_inputs_enumerates_exactly():
    xs = oracle.all_sign_inputs(4)
    assert xs.shape == (16, 4)
    assert set(np.unique(xs)) == {-1, 1}
    assert len({tuple(r) for r in xs}) == 16
    with pytest.raises(ValueError):
        oracle.all_sign_inputs(21)


@pytest.mark.parametrize("variant", ["weights", "inputs", "first-layer"])
def test_theorem_harness_small_run_is_clean(variant):
    out = oracle.theorem_harness(
        neurons=30, fan_in=7, span=7, bs=(2, 4), seed=1, variant=variant, samples=64
    )
    assert out["witnesses"] == []
    assert all(c > 0 for c in out["checked"].values()), out["checked"]


def test_theorem_harness_rejects_unknown_variant():
    with pytest.raises(ValueError):
        oracle.theorem_harness(variant="thresholds")


def test_naive_variance_matches_definition():
    assert oracle.naive_variance([1.0, 1.0, 1.0]) == 0.0
    assert oracle.naive_variance([0.0, 2.0]) == 1.0
    vals = [0.1, 0.4, 0.9, 1.6]
    mean = sum(vals) / 4
    want = sum((v - mean) ** 2 for v in vals) / 4
    assert abs(oracle.naive_variance(vals) - want) < 1e-15


def test_naive_mean_matches_definition():
    assert oracle.naive_mean([2.0, 4.0]) == 3.0
