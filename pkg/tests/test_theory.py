import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moelab.theory import (
    SimSpec,
    chernoff_tails,
    ecr_success_exact,
    ecr_success_mc,
    tcr_success_bruteforce,
    tcr_success_exact,
    tcr_success_mc,
    theorem_bounds,
)


def bin_cdf(x, m, prob):
    """Exact binomial CDF in rationals."""
    prob = Fraction(prob)

    def power(a, k):
        return Fraction(1) if k == 0 else a**k

    return float(sum(math.comb(m, j) * power(prob, j) * power(1 - prob, m - j) for j in range(0, min(x, m) + 1)))


def test_tcr_exact_examples():
    spec = SimSpec(2, 2, 1, p=(0.5, 0.5))
    assert tcr_success_exact(spec) == pytest.approx(0.375, abs=1e-15)
    assert tcr_success_bruteforce(spec) == pytest.approx(0.375, abs=1e-15)
    spec = SimSpec(4, 2, 1, p=(0.5, 0.5))
    assert abs(tcr_success_exact(spec) - tcr_success_bruteforce(spec)) <= 1e-12


def test_tcr_capacity_never_binds():
    spec = SimSpec(5, 3, 5, p=(0.5, 0.4, 0.9))
    assert tcr_success_exact(spec) == pytest.approx(1.8 / 3, abs=1e-12)


def test_tcr_exact_against_rational_formula():
    spec = SimSpec(9, 3, 2, p=(0.4, 0.5, 0.6))
    oracle = sum(spec.p) / (3 * 9) * sum(bin_cdf(1, k - 1, Fraction(1, 3)) for k in range(1, 10))
    assert tcr_success_exact(spec) == pytest.approx(oracle, abs=1e-14)


def test_tcr_exact_scales_to_large_s():
    val = tcr_success_exact(SimSpec(100_000, 8, 500))
    assert 0 < val < 1


def test_ecr_exact_examples():
    assert ecr_success_exact(SimSpec(2, 2, 1, q=(0.3, 0.3))) == pytest.approx(0.7, abs=1e-15)
    assert ecr_success_exact(SimSpec(10, 3, 1, q=0)) == 1.0
    assert ecr_success_exact(SimSpec(10, 3, 10, q=(0.9,))) == 1.0


def test_mc_examples():
    est = tcr_success_mc(SimSpec(2, 2, 1, p=(0.5, 0.5), trials=10**6, seed=1))
    assert abs(est.estimate - 0.375) <= 4 * est.std_error
    assert est.exact == pytest.approx(0.375)
    est = ecr_success_mc(SimSpec(2, 2, 1, q=(0.3, 0.3), trials=10**6, seed=1))
    assert abs(est.estimate - 0.7) <= 4 * est.std_error
    zero = SimSpec(6, 3, 2, p=(0.0,), trials=5000, check_p=False)
    assert tcr_success_mc(zero).estimate == 0.0
    assert ecr_success_mc(SimSpec(6, 3, 2, q=(1.0,), trials=5000)).estimate == 0.0


def test_mc_deterministic_and_worker_invariant():
    spec = SimSpec(40, 4, 8, q=(0.2,), trials=300_000, seed=9)
    a = tcr_success_mc(spec, workers=1)
    b = tcr_success_mc(spec, workers=3)
    c = tcr_success_mc(spec, workers=1)
    assert a.successes == b.successes == c.successes
    assert ecr_success_mc(spec, workers=1).successes == ecr_success_mc(spec, workers=4).successes


def test_mc_seeds_differ():
    a = tcr_success_mc(SimSpec(40, 4, 8, trials=100_000, seed=1))
    b = tcr_success_mc(SimSpec(40, 4, 8, trials=100_000, seed=2))
    assert a.successes != b.successes


def test_simspec_validation():
    with pytest.raises(ValueError):
        SimSpec(4, 2, 1, p=(0.3, 0.5))
    with pytest.raises(ValueError):
        SimSpec(4, 2, 1, q=(1.2,))
    with pytest.raises(ValueError):
        SimSpec(4, 2, 0)
    with pytest.raises(ValueError):
        SimSpec(4, 2, 1, trials=0)
    with pytest.raises(ValueError):
        SimSpec(4, 2, 1, p=(0.5, 0.5, 0.5))


def test_bounds_examples():
    b = theorem_bounds(SimSpec(1024, 4, 48))
    assert b.tcr_lower == pytest.approx(0.009375, abs=1e-15)
    assert b.tcr_upper == pytest.approx(0.46875, abs=1e-15)
    assert b.tcr_lower_valid
    b = theorem_bounds(SimSpec(101, 4, 20, q=(0.1,)))
    assert b.ecr_lower_valid
    assert b.ecr_lower_tail == pytest.approx(1 - math.exp(-3.75), abs=1e-15)
    assert round(b.ecr_lower_tail, 5) == 0.97648
    assert not theorem_bounds(SimSpec(2, 2, 1)).tcr_lower_valid


def test_tcr_lower_needs_positions_in_range():
    # C >= 48 alone is not enough once n C / 2 exceeds s - 1
    spec = SimSpec(49, 6, 48)
    b = theorem_bounds(spec)
    assert tcr_success_exact(spec) < b.tcr_lower
    assert not b.tcr_lower_valid


def test_chernoff_examples():
    lo, hi = chernoff_tails(50, 10)
    assert lo == pytest.approx(math.exp(-1), abs=1e-15)
    assert hi == pytest.approx(math.exp(-0.9375), abs=1e-15)
    exact = bin_cdf(40, 100, Fraction(1, 2))
    assert round(exact, 5) == 0.02844
    assert exact <= lo
    assert chernoff_tails(0, 1.0)[0] == 0.0
    with pytest.raises(ValueError):
        chernoff_tails(-1, 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 4), st.integers(1, 10), st.data())
def test_exact_matches_bruteforce(s, n, C, data):
    p = [data.draw(st.floats(1 / n, 1)) for _ in range(n)]
    spec = SimSpec(s, n, C, p=p)
    assert abs(tcr_success_exact(spec) - tcr_success_bruteforce(spec)) <= 1e-12


@given(st.integers(1, 300), st.integers(1, 8), st.integers(1, 60), st.floats(0, 1))
def test_exact_monotone_in_capacity(s, n, C, q):
    a, b = SimSpec(s, n, C, q=(q,)), SimSpec(s, n, C + 1, q=(q,))
    assert tcr_success_exact(b) >= tcr_success_exact(a) - 1e-15
    assert ecr_success_exact(b) >= ecr_success_exact(a) - 1e-15


@settings(deadline=None)
@given(st.integers(1, 60), st.integers(1, 6), st.integers(1, 60), st.integers(0, 1000).map(lambda k: k / 1000))
def test_ecr_exact_against_rational_formula(s, n, C, q):
    spec = SimSpec(s, n, C, q=(q,))
    assert ecr_success_exact(spec) == pytest.approx(bin_cdf(C - 1, s - 1, q), abs=1e-12)


def test_json_record_shape():
    d = tcr_success_mc(SimSpec(8, 2, 2, trials=1000)).to_dict()
    assert {"estimate", "std_error", "exact", "bounds"} <= set(d)
    assert "tcr_lower_valid" in d["bounds"]
