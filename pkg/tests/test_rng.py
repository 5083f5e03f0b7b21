import numpy as np
from hypothesis import given, strategies as st

from retentia._rng import derive_seed, keyed_normal, keyed_poisson, keyed_uniform, stream_id


def test_stream_id_is_stable_and_63_bit():
    assert stream_id("intent") == stream_id("intent")
    assert stream_id("intent") != stream_id("intents")
    assert 0 <= stream_id("x") < 2 ** 63


def test_uniform_open_interval_and_moments():
    u = keyed_uniform(3, "u", np.arange(200_000))
    assert u.min() > 0 and u.max() < 1
    assert abs(u.mean() - 0.5) < 0.005
    assert abs(u.var() - 1 / 12) < 0.002


def test_draws_depend_only_on_keys():
    ids = np.arange(1000)
    full = keyed_uniform(1, "s", ids, 7)
    part = keyed_uniform(1, "s", ids[500:], 7)
    assert np.array_equal(full[500:], part)
    assert not np.array_equal(full, keyed_uniform(2, "s", ids, 7))
    assert not np.array_equal(full, keyed_uniform(1, "t", ids, 7))


def test_broadcasting_over_keys():
    grid = keyed_uniform(0, "g", np.arange(4)[:, None], np.arange(3)[None, :])
    assert grid.shape == (4, 3)
    assert grid[2, 1] == keyed_uniform(0, "g", 2, 1)


def test_normal_and_poisson_moments():
    z = keyed_normal(5, "z", np.arange(100_000))
    assert abs(z.mean()) < 0.02 and abs(z.std() - 1) < 0.02
    k = keyed_poisson(5, "k", 3.0, np.arange(100_000))
    assert abs(k.mean() - 3.0) < 0.03
    assert k.min() >= 0


@given(st.integers(0, 2 ** 40), st.text(max_size=8))
def test_derive_seed_deterministic(seed, name):
    assert derive_seed(seed, name) == derive_seed(seed, name)
    assert derive_seed(seed, name, "a") != derive_seed(seed, name, "b")
