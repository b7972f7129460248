import numpy as np

from adaeval.rng import SplitMix64


def test_reference_outputs_for_seed_zero():
    # first three SplitMix64 outputs for seed 0, from the published finalizer
    g = SplitMix64(0)
    got = g.next_uint64(3)
    assert got[0] == np.uint64(0xE220A8397B1DCDAF)
    assert got[1] == np.uint64(0x6E789E6AA1B965F4)
    assert got[2] == np.uint64(0x06C45D188009454F)


def test_stream_is_reproducible_and_counter_based():
    a = SplitMix64(1234)
    whole = a.next_uint64(10)
    b = SplitMix64(1234)
    first = b.next_uint64(4)
    rest = b.next_uint64(6)
    assert np.array_equal(whole, np.concatenate([first, rest]))
    # reconstruction from (seed, counter)
    c = SplitMix64(1234, counter=4)
    assert np.array_equal(c.next_uint64(6), rest)


def test_uniform_range_and_moments():
    u = SplitMix64(7).uniform(200_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.005
    assert abs(u.var() - 1.0 / 12.0) < 0.002


def test_gaussian_moments():
    z = SplitMix64(11).gaussian(200_001)  # odd count exercises truncation
    assert z.shape == (200_001,)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01


def test_integers_bounds_and_determinism():
    g = SplitMix64(5)
    v = g.integers(10_000, 7)
    assert v.min() >= 0 and v.max() < 7
    assert np.array_equal(SplitMix64(5).integers(10_000, 7), v)


def test_shuffle_is_a_permutation():
    g = SplitMix64(3)
    items = np.arange(50)
    out = g.shuffle(items)
    assert sorted(out.tolist()) == items.tolist()
    assert np.array_equal(items, np.arange(50))  # input untouched


def test_sample_without_replacement_distinct():
    g = SplitMix64(9)
    for _ in range(100):
        picks = g.sample_without_replacement(3, 16)
        assert len(set(picks.tolist())) == 3
        assert picks.min() >= 0 and picks.max() < 16
