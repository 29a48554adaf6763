import numpy as np
import pytest

from diffmark.schedule import TERMINAL_T, NoiseSchedule, sampling_timesteps


def test_linear_schedule_bounds():
    s = NoiseSchedule()
    assert s.T == 1000
    assert s.alpha_bar[0] >= 0.99
    assert np.all(s.alpha_bar > 0) and np.all(s.alpha_bar <= 1)


def test_strictly_decreasing():
    s = NoiseSchedule()
    assert np.all(np.diff(s.alpha_bar) < 0)


def test_monotonicity_across_constructions():
    for T in (10, 100, 1000):
        for b_end in (0.01, 0.02, 0.05):
            s = NoiseSchedule(timesteps=T, beta_end=b_end)
            assert np.all(np.diff(s.alpha_bar) < 0)


def test_terminal_index_resolves_to_one():
    s = NoiseSchedule()
    assert s.alpha_bar_at(TERMINAL_T) == 1.0


def test_out_of_range_lookup():
    s = NoiseSchedule(timesteps=100)
    with pytest.raises(IndexError):
        s.alpha_bar_at(100)
    with pytest.raises(IndexError):
        s.alpha_bar_at(-2)


def test_unsupported_kind_rejected():
    with pytest.raises(ValueError):
        NoiseSchedule(kind="cosine")


def test_config_roundtrip():
    s = NoiseSchedule(timesteps=500, beta_end=0.015)
    s2 = NoiseSchedule.from_config(s.to_config())
    assert np.array_equal(s.alpha_bar, s2.alpha_bar)


def test_sampling_timesteps_descending():
    s = NoiseSchedule()
    for n in (1, 2, 7, 10, 50):
        ts = sampling_timesteps(s, n)
        assert len(ts) == n
        assert ts[0] == s.T - 1
        assert all(a > b for a, b in zip(ts, ts[1:]))
        assert ts[-1] >= 0


def test_sampling_timesteps_bounds():
    s = NoiseSchedule(timesteps=10)
    with pytest.raises(ValueError):
        sampling_timesteps(s, 0)
    with pytest.raises(ValueError):
        sampling_timesteps(s, 11)
