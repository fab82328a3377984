import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moodkit import diffusion as df


@pytest.fixture(scope="module")
def table():
    return df.build_schedule(df.SchedulerConfig())


def _oracle_beta(t, T=1000, b0="0.001", b1="0.015"):
    mpmath.mp.dps = 40
    lo, hi = mpmath.sqrt(mpmath.mpf(b0)), mpmath.sqrt(mpmath.mpf(b1))
    return (lo + mpmath.mpf(t) / (T - 1) * (hi - lo)) ** 2


def test_schedule_endpoints_exact(table):
    assert table.beta[0] == 0.001 and table.beta[999] == 0.015
    assert table.T == 1000


def test_schedule_midpoint(table):
    assert table.beta[499] == pytest.approx(5.9295e-3, rel=1e-4)
    assert abs(table.beta[499] - float(_oracle_beta(499))) / float(_oracle_beta(499)) < 1e-12


def test_schedule_alpha_bar(table):
    assert table.alpha_bar[0] == 1 - table.beta[0]
    assert np.all(np.diff(table.alpha_bar) < 0)
    assert table.alpha_bar[-1] < 0.01 * table.alpha_bar[0]
    assert np.all((table.alpha_bar > 0) & (table.alpha_bar < 1))


def test_schedule_csv(tmp_path, table):
    table.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "t,beta,alpha_bar" and len(lines) == 1001
    t, b, ab = lines[500].split(",")
    assert int(t) == 499 and float(b) == table.beta[499]


@pytest.mark.parametrize("kw", [dict(T=1), dict(beta_start=0.02), dict(beta_end=1.0), dict(kind="cosine")])
def test_scheduler_config_invalid(kw):
    with pytest.raises(ValueError):
        df.SchedulerConfig(**kw)


def test_simplex_normalized_and_deterministic():
    cfg = df.SimplexNoiseConfig()
    a = df.sample_simplex_noise((40, 56), cfg, seed=3)
    b = df.sample_simplex_noise((40, 56), cfg, seed=3)
    assert np.array_equal(a, b) and a.shape == (40, 56)
    assert abs(a.mean()) < 1e-9 and abs(a.std() - 1) < 1e-9
    assert not np.array_equal(a, df.sample_simplex_noise((40, 56), cfg, seed=4))


def test_simplex_smooth_lag1_autocorrelation():
    cfg = df.SimplexNoiseConfig()
    acs = []
    for s in range(100):
        f = df.sample_simplex_noise((64, 64), cfg, seed=s)
        acs.append(np.mean(f[:, 1:] * f[:, :-1]) / np.mean(f * f))
    assert np.mean(acs) > 0.5
    g = np.random.default_rng(0).standard_normal((64, 64))
    assert abs(np.mean(g[:, 1:] * g[:, :-1])) < 0.1


def test_simplex_unnormalized_bounded():
    cfg = df.SimplexNoiseConfig(octaves=1, normalize_to_unit=False)
    f = df.sample_simplex_noise((32, 32), cfg, seed=1)
    assert np.abs(f).max() <= 1.0


def test_simplex_config_invalid():
    for kw in (dict(octaves=0), dict(persistence=0.0), dict(persistence=1.5), dict(base_frequency=0)):
        with pytest.raises(ValueError):
            df.SimplexNoiseConfig(**kw)


def test_forward_zero_noise(table, rng):
    x0 = rng.random((2, 8, 8))
    out = df.forward_noise(x0, 37, np.zeros_like(x0), table)
    assert np.allclose(out, np.sqrt(table.alpha_bar[37]) * x0)


def test_forward_t0_coefficient(table):
    out = df.forward_noise(np.ones((1, 1, 1)), 0, np.zeros((1, 1, 1)), table)
    assert out[0, 0, 0] == pytest.approx(np.sqrt(0.999)) and out[0, 0, 0] == pytest.approx(0.9995, abs=1e-4)


def test_forward_variance(table, rng):
    noise = rng.standard_normal((200, 32, 32))
    out = df.forward_noise(np.zeros_like(noise), 600, noise, table)
    assert out.var() == pytest.approx(1 - table.alpha_bar[600], rel=0.02)


def test_forward_out_of_range(table):
    with pytest.raises(IndexError):
        df.forward_noise(np.zeros((1, 2, 2)), 1000, np.zeros((1, 2, 2)), table)
    with pytest.raises(IndexError):
        df.estimate_x0(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), -1, table)


def test_estimate_zero_noise(table, rng):
    xt = rng.random((1, 4, 4)).astype(np.float32)
    assert np.allclose(df.estimate_x0(xt, np.zeros_like(xt), 100, table), xt / np.sqrt(table.alpha_bar[100]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 999), st.integers(0, 2**31 - 1))
def test_round_trip_any_t(t, seed):
    table = df.build_schedule()
    r = np.random.default_rng(seed)
    x0 = r.random((2, 16, 16)).astype(np.float32)
    noise = r.standard_normal((2, 16, 16)).astype(np.float32)
    back = df.estimate_x0(df.forward_noise(x0, t, noise, table), noise, t, table)
    assert np.abs(back - x0).max() <= 1e-5 * max(1.0, 1 / np.sqrt(table.alpha_bar[t]))


def test_per_sample_t(table, rng):
    x0 = rng.random((3, 4, 4))
    n = rng.standard_normal((3, 4, 4))
    t = np.array([1, 200, 999])
    out = df.forward_noise(x0, t, n, table)
    for i in range(3):
        assert np.allclose(out[i], df.forward_noise(x0[i], t[i], n[i], table))


class _Oracle:
    def __init__(self, x0, table):
        self.x0, self.table = x0, table

    def predict_noise(self, x, k):
        ab = self.table.alpha_bar[k]
        return (x - np.sqrt(ab) * self.x0) / np.sqrt(1 - ab)


class _Zero:
    def predict_noise(self, x, k):
        return np.zeros_like(x)


def test_single_step_oracle_inverts(table, rng):
    x0 = rng.random((3, 16, 16)).astype(np.float32)
    out = df.reconstruct(x0, 1, _Oracle(x0, table), table, seed=2)
    assert np.abs(out - x0).max() <= 1e-4


def test_long_chain_oracle_inverts(table, rng):
    x0 = rng.random((2, 16, 16)).astype(np.float32)
    out = df.reconstruct(x0, 50, _Oracle(x0, table), table, seed=2)
    assert np.abs(out - x0).max() <= 1e-4


def test_reconstruct_deterministic_across_workers(table, rng):
    x0 = rng.random((7, 16, 16)).astype(np.float32)
    a = df.reconstruct(x0, 20, _Zero(), table, seed=5, chunk=2, workers=1)
    b = df.reconstruct(x0, 20, _Zero(), table, seed=5, chunk=2, workers=3)
    c = df.reconstruct(x0, 20, _Zero(), table, seed=5, chunk=3, workers=1)
    assert np.array_equal(a, b) and np.array_equal(a, c)
    assert a.min() >= 0 and a.max() <= 1 and a.shape == x0.shape


def test_reconstruct_slice_ids_key_noise(table, rng):
    x0 = np.repeat(rng.random((1, 16, 16)).astype(np.float32), 2, axis=0)
    out = df.reconstruct(x0, 20, _Zero(), table, seed=5, slice_ids=[4, 4])
    assert np.array_equal(out[0], out[1])
    out = df.reconstruct(x0, 20, _Zero(), table, seed=5, slice_ids=[4, 5])
    assert not np.array_equal(out[0], out[1])


def test_reconstruct_bad_t(table):
    with pytest.raises(ValueError):
        df.reconstruct(np.zeros((1, 4, 4)), 0, _Zero(), table)
    with pytest.raises(ValueError):
        df.reconstruct(np.zeros((1, 4, 4)), 1000, _Zero(), table)


def test_gaussian_noise_keeps_algebra(table, rng):
    # the algebra does not care where the noise comes from
    x0 = rng.random((4, 8, 8))
    g = rng.standard_normal((4, 8, 8))
    assert np.allclose(df.estimate_x0(df.forward_noise(x0, 300, g, table), g, 300, table), x0)
