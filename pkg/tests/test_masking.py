import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mt4ssl.errors import ConfigError
from mt4ssl.masking import MaskSpec, coverage, expected_coverage, sample_mask


def test_zero_probability_masks_nothing():
    assert len(sample_mask(100, 0.0, 10, 0)) == 0


def test_certain_start_truncates_at_end():
    spec = sample_mask(5, 1.0, 10, 0)
    assert spec.indices.tolist() == [0, 1, 2, 3, 4]


def test_coverage_examples():
    empty = MaskSpec(0.1, 3, 10, np.zeros(0, dtype=np.int64))
    full = MaskSpec(0.1, 3, 10, np.arange(10))
    assert coverage(empty, 10) == 0.0
    assert coverage(full, 10) == 1.0
    with pytest.raises(ZeroDivisionError):
        coverage(empty, 0)


def test_closed_form_value():
    assert expected_coverage(0.065, 10) == pytest.approx(1 - 0.935**10, abs=1e-15)
    # 0.48936; the commonly quoted 0.4890 is a truncation
    assert abs(expected_coverage(0.065, 10) - 0.489) < 5e-4


def test_monte_carlo_matches_closed_form():
    rng = np.random.default_rng(123)
    covs = [coverage(sample_mask(1000, 0.065, 10, rng)) for _ in range(200)]
    assert abs(np.mean(covs) - expected_coverage(0.065, 10)) <= 0.02


@pytest.mark.parametrize("kw", [dict(num_frames=0, p=0.1, span_len=3), dict(num_frames=5, p=1.5, span_len=3), dict(num_frames=5, p=0.1, span_len=0)])
def test_invalid_arguments(kw):
    with pytest.raises(ConfigError):
        sample_mask(kw["num_frames"], kw["p"], kw["span_len"], 0)


mask_args = st.tuples(
    st.integers(1, 300), st.floats(0.0, 1.0), st.integers(1, 20), st.integers(0, 2**32 - 1)
)


@settings(max_examples=200, deadline=None)
@given(mask_args)
def test_indices_are_exact_union_of_spans(args):
    t, p, l, seed = args
    spec = sample_mask(t, p, l, seed)
    expected = set()
    for s in spec.starts:
        expected.update(range(s, min(s + l, t)))
    assert spec.indices.tolist() == sorted(expected)
    assert np.all(np.diff(spec.indices) > 0)
    assert spec.indices.size == 0 or (spec.indices.min() >= 0 and spec.indices.max() < t)


@settings(max_examples=100, deadline=None)
@given(mask_args)
def test_same_seed_same_mask(args):
    t, p, l, seed = args
    a, b = sample_mask(t, p, l, seed), sample_mask(t, p, l, seed)
    assert np.array_equal(a.indices, b.indices) and np.array_equal(a.starts, b.starts)


@settings(max_examples=100, deadline=None)
@given(mask_args)
def test_every_masked_index_is_covered_by_a_start(args):
    t, p, l, seed = args
    spec = sample_mask(t, p, l, seed)
    for i in spec.indices:
        assert np.any((spec.starts <= i) & (i < spec.starts + l))
