import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from wisernet.errors import TooFewSamples, TooSmall
from wisernet.noise import synthetic_covers
from wisernet.spam import (
    SPAM_DIM,
    MmdConfig,
    image_features,
    mmd,
    mmd_ratio_experiment,
    mmd_squared,
    round_half_away,
    spam_features,
)
from wisernet.srm import K5_INDEX, load_bank
from wisernet.tensor import PlanarImage


def brute_spam(m):
    """Direct per-pixel walk over the 8 directions; independent of the vectorized code."""
    m = [[int(v) for v in row] for row in m]
    h, w = len(m), len(m[0])

    def block(dirs):
        acc = [0.0] * 343
        for dy, dx in dirs:
            counts, total = [0] * 343, 0
            for y in range(h):
                for x in range(w):
                    if not (0 <= y + 3 * dy < h and 0 <= x + 3 * dx < w):
                        continue
                    d = []
                    for k in range(3):
                        a = m[y + k * dy][x + k * dx] - m[y + (k + 1) * dy][x + (k + 1) * dx]
                        d.append(max(-3, min(3, a)))
                    counts[(d[0] + 3) * 49 + (d[1] + 3) * 7 + (d[2] + 3)] += 1
                    total += 1
            for i in range(343):
                acc[i] += counts[i] / total / 4
        return acc

    straight = block([(0, 1), (0, -1), (1, 0), (-1, 0)])
    diagonal = block([(1, 1), (-1, -1), (1, -1), (-1, 1)])
    return np.array(straight + diagonal)


def bin_of(a, b, c):
    return (a + 3) * 49 + (b + 3) * 7 + (c + 3)


def test_dimension_and_normalization():
    f = spam_features(np.random.default_rng(0).normal(0, 3, (20, 17)))
    assert f.shape == (SPAM_DIM,) == (686,)
    assert abs(f[:343].sum() - 1) <= 1e-9 and abs(f[343:].sum() - 1) <= 1e-9
    assert f.min() >= 0


def test_constant_map_mass_in_zero_bin():
    f = spam_features(np.full((6, 6), 4.2))
    z = bin_of(0, 0, 0)
    assert f[z] == 1.0 and f[343 + z] == 1.0


def test_hand_instance_4x4():
    m = np.array([[0, 1, 0, 1]] * 4)
    f = spam_features(m)
    np.testing.assert_array_equal(f, brute_spam(m))
    # hand count: right gives (-1,1,-1), left (1,-1,1), vertical walks (0,0,0)
    expected = np.zeros(686)
    expected[bin_of(-1, 1, -1)] = 0.25
    expected[bin_of(1, -1, 1)] = 0.25
    expected[bin_of(0, 0, 0)] = 0.5
    # each diagonal walk has one start; two give (-1,1,-1), two give (1,-1,1)
    expected[343 + bin_of(-1, 1, -1)] = 0.5
    expected[343 + bin_of(1, -1, 1)] = 0.5
    np.testing.assert_array_equal(f, expected)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.int64, st.tuples(st.integers(4, 8), st.integers(4, 8)), elements=st.integers(-6, 6)))
def test_matches_brute_force(m):
    np.testing.assert_allclose(spam_features(m), brute_spam(m), rtol=0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.int64, st.tuples(st.integers(4, 7), st.integers(4, 7)), elements=st.integers(-5, 5)))
def test_rotation_and_transpose_invariance(m):
    f = spam_features(m)
    np.testing.assert_allclose(spam_features(np.rot90(m)), f, atol=1e-15)
    np.testing.assert_allclose(spam_features(m.T), f, atol=1e-15)


def test_too_small():
    with pytest.raises(TooSmall):
        spam_features(np.zeros((3, 10)))


def test_rounding_half_away_from_zero():
    np.testing.assert_array_equal(round_half_away([0.5, 1.5, -0.5, -2.5, 0.49]), [1, 2, -1, -3, 0])


# ------------------------------------------------------------------- MMD

def direct_mmd2(x, y, bw):
    k = lambda a, b: np.exp(-np.sum((a - b) ** 2) / (2 * bw * bw))
    m, n = len(x), len(y)
    sxx = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    syy = sum(k(y[i], y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    sxy = sum(k(x[i], y[j]) for i in range(m) for j in range(n)) / (m * n)
    return sxx + syy - 2 * sxy


def test_mmd_matches_direct_double_sum():
    r = np.random.default_rng(1)
    x, y = r.standard_normal((7, 4)), r.normal(0.5, 1.0, (9, 4))
    cfg = MmdConfig(bandwidth=1.7, standardize=False)
    assert mmd_squared(x, y, cfg) == pytest.approx(direct_mmd2(x, y, 1.7), rel=1e-12)


def test_mmd_standardizes_with_cover_statistics():
    r = np.random.default_rng(2)
    x, y = r.normal(5, 3, (8, 3)), r.normal(6, 2, (6, 3))
    mu, sd = x.mean(axis=0), x.std(axis=0)
    got = mmd_squared(x, y, MmdConfig(bandwidth=2.0))
    assert got == pytest.approx(direct_mmd2((x - mu) / sd, (y - mu) / sd, 2.0), rel=1e-12)


def test_mmd_identical_sets_zero():
    x = np.random.default_rng(3).standard_normal((12, 5))
    assert mmd(x, x) == 0.0
    assert mmd(x, x[::-1]) == 0.0
    assert mmd_squared(x, x[::-1]) <= 0


def test_mmd_order_invariance():
    r = np.random.default_rng(4)
    x, y = r.standard_normal((10, 6)), r.normal(0.3, 1, (11, 6))
    base = mmd(x, y)
    assert mmd(x[r.permutation(10)], y[r.permutation(11)]) == pytest.approx(base, rel=1e-12)


def test_mmd_symmetric_on_prestandardized_inputs():
    r = np.random.default_rng(5)
    x, y = r.standard_normal((10, 3)), r.normal(0.5, 1, (10, 3))
    cfg = MmdConfig(standardize=False)
    assert mmd(x, y, cfg) == pytest.approx(mmd(y, x, cfg), rel=1e-12)


def test_mmd_detects_mean_shift():
    for seed in range(5):
        r = np.random.default_rng(seed)
        x, y, z = r.standard_normal((50, 686)), r.standard_normal((50, 686)) + 3.0, r.standard_normal((50, 686))
        assert mmd(x, y) > 0 and mmd(x, y) > mmd(x, z)


def test_mmd_needs_two_samples():
    with pytest.raises(TooFewSamples):
        mmd(np.zeros((1, 3)), np.zeros((4, 3)))


def test_mmd_config_validation():
    with pytest.raises(ValueError):
        MmdConfig(bandwidth=0.0)
    with pytest.raises(ValueError):
        MmdConfig(bandwidth="mean")


# -------------------------------------------------------- the experiment

def test_image_features_shapes():
    img = synthetic_covers(1, 24, 24, 0)[0]
    k = load_bank().kernel(K5_INDEX)
    n, c = image_features(img, k)
    assert n.shape == c.shape == (686,)
    assert abs(c[:343].sum() - 1) < 1e-12
    assert image_features(img, k, merge="concat")[1].shape == (3 * 686,)


def test_identical_bands_make_arms_agree():
    # with equal bands the normal map (scale 1/3) equals each band map; an
    # integer kernel keeps residuals away from rounding ties
    g = synthetic_covers(1, 24, 24, 1)[0].bands[1]
    img = PlanarImage(np.stack([g, g, g]))
    bank = load_bank()
    n, c = image_features(img, bank.kernel(bank.index_of("first_e")))
    np.testing.assert_allclose(n, c, rtol=0, atol=1e-15)


def test_ratio_experiment_contract():
    covers = synthetic_covers(12, 32, 32, 4, texture=6)
    k = load_bank().kernel(K5_INDEX)
    r1 = mmd_ratio_experiment(covers, 0.4, 0.0, k, seed=3)
    r2 = mmd_ratio_experiment(covers, 0.4, 0.0, k, seed=3)
    assert r1 == r2
    assert r1.n_covers == 12 and r1.mmd_n >= 0 and r1.mmd_c >= 0
    with pytest.raises(TooFewSamples):
        mmd_ratio_experiment(covers[:9], 0.4, 0.0, k)
