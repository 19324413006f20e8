import numpy as np
import pytest
import scipy.stats
from hypothesis import given
from hypothesis import strategies as st

from maskfed.core import ConfigError
from maskfed.masking import (
    MaskPlan,
    build_rolling_masks,
    sample_bernoulli_masks,
    shuffle_permutation,
    substream,
)


def test_full_probability_gives_all_ones():
    masks = sample_bernoulli_masks(np.array([1.0, 1.0]), 16, [substream(0, 1, i) for i in range(2)])
    for m in masks:
        assert np.all(m == 1)


def test_identical_streams_identical_masks():
    a = sample_bernoulli_masks(np.array([0.3]), 32, [substream(9, 4)])[0]
    b = sample_bernoulli_masks(np.array([0.3]), 32, [substream(9, 4)])[0]
    assert np.array_equal(a, b)


def test_nonpositive_probability_rejected():
    with pytest.raises(ConfigError):
        sample_bernoulli_masks(np.array([0.0]), 4, [substream(0, 0)])
    with pytest.raises(ConfigError):
        MaskPlan(mode="random", p=np.array([0.5, 0.0]))


def test_bernoulli_density_concentrates():
    # Binomial concentration: 10^4 draws of d=64 coordinates at p=0.5; the
    # empirical density deviates from 0.5 by less than 3*sqrt(0.25/(64*10^4)).
    draws, d, p = 10_000, 64, 0.5
    rng = substream(123, 0)
    total = 0
    for _ in range(draws):
        total += int((rng.random(d) < p).sum())
    density = total / (draws * d)
    assert abs(density - p) < 3 * np.sqrt(p * (1 - p) / (d * draws))


def test_rolling_windows_match_enumerated_oracle():
    # d=4, s=2, R=4, stride ceil(4/4)=1: windows 1100, 0110, 0011, 1001.
    masks = build_rolling_masks(4, 2, 4)
    expected = [[1, 1, 0, 0], [0, 1, 1, 0], [0, 0, 1, 1], [1, 0, 0, 1]]
    for m, e in zip(masks, expected):
        assert m.tolist() == e


def test_rolling_full_width():
    masks = build_rolling_masks(4, 4, 1)
    assert len(masks) == 1 and masks[0].tolist() == [1, 1, 1, 1]


@given(st.integers(1, 16), st.data())
def test_rolling_coverage_and_popcount(d, data):
    s = data.draw(st.integers(1, d))
    R = data.draw(st.integers(1, 2 * d))
    masks = build_rolling_masks(d, s, R)
    assert all(int(m.sum()) == s for m in masks)
    if R * s >= d:
        union = np.zeros(d, dtype=np.uint8)
        for m in masks:
            union |= m
        assert np.all(union == 1)


def test_rolling_rejects_bad_sizes():
    with pytest.raises(ConfigError):
        build_rolling_masks(4, 5, 2)
    with pytest.raises(ConfigError):
        build_rolling_masks(4, 2, 0)


def test_permutation_identity_for_r1():
    sigma = shuffle_permutation(1, substream(0, 7))
    assert sigma.sigma.tolist() == [1]


@given(st.integers(1, 40), st.integers(0, 1000))
def test_permutation_is_bijection(R, seed):
    sigma = shuffle_permutation(R, substream(seed, 3))
    assert sorted(sigma.sigma.tolist()) == list(range(1, R + 1))


def test_permutation_deterministic_per_stream():
    a = shuffle_permutation(10, substream(5, 2, 1))
    b = shuffle_permutation(10, substream(5, 2, 1))
    assert np.array_equal(a.sigma, b.sigma)


def test_permutation_uniformity_chi_square():
    # 6! = 720 cells, 100 draws per cell on average; chi-square not rejected
    # at alpha = 0.001 (critical value from the chi2 inverse CDF, 719 dof).
    R, reps = 6, 720 * 100
    rng = substream(2024, 0)
    counts = {}
    for _ in range(reps):
        key = tuple(shuffle_permutation(R, rng).sigma.tolist())
        counts[key] = counts.get(key, 0) + 1
    assert len(counts) == 720
    expected = reps / 720
    chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
    critical = scipy.stats.chi2.ppf(1 - 0.001, 720 - 1)
    assert chi2 < critical


def test_plan_validation():
    with pytest.raises(ConfigError):
        MaskPlan(mode="rolling", s=np.array([2, 2]))  # missing R
    with pytest.raises(ConfigError):
        MaskPlan(mode="nope")
    with pytest.raises(ConfigError):
        MaskPlan(mode="full", p=np.array([0.9]))
    plan = MaskPlan(mode="rolling", s=np.array([2, 3]), R=4)
    assert plan.n_clients == 2
