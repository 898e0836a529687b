import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from underlay_cr.config import (ActivityModel, DetectorConfig, QuantizerConfig, SensingConfig,
                                SpNoiseConfig, reference_defaults)
from underlay_cr.model import (initial_csi, pu_rate, pu_rate_dx, quantize, quantizer_bounds,
                               quantizer_thresholds, sense, step_channel, su_rate, su_rate_dp)


def trajectory(cfg, slots, seed=0):
    rng = np.random.default_rng(seed)
    t = initial_csi(cfg, rng)
    out = [t]
    for _ in range(slots - 1):
        t = step_channel(t, cfg, rng)
        out.append(t)
    return out


# ---------------------------------------------------------------- rates

def test_su_rate_values():
    assert su_rate(1.0, 1.0) == pytest.approx(1.0)
    assert su_rate(2.5, 0.0) == 0.0
    assert su_rate(3.0, 5.0) == pytest.approx(4.0, abs=1e-14)


def test_pu_rate_values():
    assert pu_rate(10.0, 0.0) == pytest.approx(np.log2(11.0))
    assert pu_rate(10.0, 0.0) == pytest.approx(3.459, abs=5e-4)
    assert pu_rate(10.0, 1.0) == pytest.approx(np.log2(6.0), abs=1e-14)
    assert pu_rate(10.0, 1e15) < 1e-13


@given(st.floats(0.01, 50), st.floats(0.0, 50))
def test_su_rate_derivative_matches_central_difference(h, p):
    step = 1e-6 * max(1.0, p)
    lo = max(p - step, 0.0)
    fd = (su_rate(h, p + step) - su_rate(h, lo)) / (p + step - lo)
    assert fd == pytest.approx(su_rate_dp(h, 0.5 * (lo + p + step)), rel=1e-6)


@given(st.floats(0.1, 100), st.floats(0.0, 50))
def test_pu_rate_derivative_matches_central_difference(g, x):
    step = 1e-6 * max(1.0, x)
    lo = max(x - step, 0.0)
    fd = (pu_rate(g, x + step) - pu_rate(g, lo)) / (x + step - lo)
    assert fd == pytest.approx(pu_rate_dx(g, 0.5 * (lo + x + step)), rel=1e-6)


@given(st.floats(0.01, 20), st.floats(0.0, 20), st.floats(0.01, 5))
def test_rates_monotone(h, p, dp):
    assert su_rate(h, p + dp) > su_rate(h, p)
    assert pu_rate(10.0, p + dp) < pu_rate(10.0, p)


# ---------------------------------------------------------------- channel processes

def test_gilbert_elliott_stationary_probability():
    chain = ActivityModel(p11=0.975, p01=0.1)
    assert chain.p10 == pytest.approx(0.025)
    assert chain.p00 == pytest.approx(0.9)
    assert chain.stationary_active == pytest.approx(0.8)


def test_empirical_activity_fraction():
    cfg = reference_defaults(num_sus=1)
    traj = trajectory(cfg, 100_000)
    frac = np.mean([t.activity for t in traj])
    assert abs(frac - 0.8) <= 0.01 * 0.8


def test_empirical_gain_means():
    cfg = reference_defaults(avg_gain_sp=0.7)
    traj = trajectory(cfg, 4000)
    h2 = np.array([t.su_gain for t in traj])
    h1 = np.array([t.sp_gain for t in traj])
    assert h2.size >= 1e5
    assert abs(h2.mean() / cfg.avg_gain_su[0, 0] - 1) < 0.02
    assert abs(h1.mean() / 0.7 - 1) < 0.02


def test_sp_gain_is_squared_norm():
    cfg = reference_defaults()
    t = trajectory(cfg, 3)[-1]
    g = t.sp_lowpass
    np.testing.assert_array_equal(t.sp_gain, g[..., 0] ** 2 + g[..., 1] ** 2)
    assert np.all(t.su_gain >= 0)


@pytest.mark.parametrize("corr", [0.0, 0.5, 0.9, 1.0])
def test_lag_one_autocorrelation(corr):
    # components are scaled by sqrt(corr) each slot, so the gain |g|^2 has lag-1 correlation corr
    cfg = reference_defaults(sp_correlation=corr)
    traj = trajectory(cfg, 4000)
    g = np.array([t.sp_lowpass for t in traj])  # (N, K, M, 2)
    x = g.reshape(g.shape[0], -1)
    est = float(np.mean((x[1:] * x[:-1]).mean(axis=0) / (x ** 2).mean(axis=0)))
    assert abs(est - np.sqrt(corr)) <= 0.02
    if corr == 1.0:
        return
    h = (g ** 2).sum(axis=-1).reshape(g.shape[0], -1)
    h = h - h.mean(axis=0)
    est_h = float(np.mean((h[1:] * h[:-1]).mean(axis=0) / (h ** 2).mean(axis=0)))
    assert abs(est_h - corr) <= 0.02


def test_frozen_channel_when_fully_correlated():
    cfg = reference_defaults(sp_correlation=1.0)
    traj = trajectory(cfg, 50)
    for t in traj[1:]:
        np.testing.assert_array_equal(t.sp_lowpass, traj[0].sp_lowpass)


def test_same_seed_same_trajectory():
    cfg = reference_defaults(sp_correlation=0.5)
    a = trajectory(cfg, 200, seed=7)
    b = trajectory(cfg, 200, seed=7)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.activity, y.activity)
        np.testing.assert_array_equal(x.sp_lowpass, y.sp_lowpass)
        np.testing.assert_array_equal(x.su_gain, y.su_gain)


# ---------------------------------------------------------------- sensing

def test_equiprobable_thresholds_unit_mean():
    cfg = reference_defaults(avg_gain_su=1.0, sensing=SensingConfig(quantizer=QuantizerConfig(levels=4)))
    thr = quantizer_thresholds(cfg)[0, 0]
    np.testing.assert_allclose(thr, [-np.log(0.75), -np.log(0.5), -np.log(0.25)], rtol=1e-14)
    np.testing.assert_allclose(thr, [0.2877, 0.6931, 1.3863], atol=5e-5)


def test_quantizer_regions_and_bounds(rng):
    cfg = reference_defaults(sensing=SensingConfig(quantizer=QuantizerConfig(levels=8)))
    h = cfg.avg_gain_su * rng.standard_exponential(cfg.avg_gain_su.shape)
    region = quantize(cfg, h)
    assert region.min() >= 1 and region.max() <= 8
    lo, hi = quantizer_bounds(cfg, region)
    assert np.all((lo <= h) & (h < hi))


def test_equiprobable_regions_empirically(rng):
    cfg = reference_defaults(num_sus=1, num_channels=1, sensing=SensingConfig(quantizer=QuantizerConfig(levels=4)))
    h = cfg.avg_gain_su[0, 0] * rng.standard_exponential((200_000, 1, 1))
    region = quantize(cfg, h)
    counts = np.bincount(region.ravel(), minlength=5)[1:] / region.size
    np.testing.assert_allclose(counts, 0.25, atol=0.005)


def test_perfect_detector_and_noise_free_measurement():
    cfg = reference_defaults(sensing=SensingConfig(detector=DetectorConfig(0.0, 0.0, 1),
                                               sp_noise=SpNoiseConfig(noise_var=0.0, snr_db=None)))
    rng = np.random.default_rng(3)
    t = initial_csi(cfg, rng)
    obs = None
    for _ in range(50):
        obs = sense(t, cfg, rng, obs)
        np.testing.assert_array_equal(obs.activity_obs, t.activity)
        np.testing.assert_array_equal(obs.sp_meas, t.sp_lowpass)
        t = step_channel(t, cfg, rng)


def test_detector_error_rates():
    cfg = reference_defaults(sensing=SensingConfig(detector=DetectorConfig(0.1, 0.2, 1)))
    rng = np.random.default_rng(4)
    t = initial_csi(cfg, rng)
    md = fa = on = off = 0
    obs = None
    for _ in range(20_000):
        obs = sense(t, cfg, rng, obs)
        md += np.sum(t.activity & ~obs.activity_obs)
        fa += np.sum(~t.activity & obs.activity_obs)
        on += t.activity.sum()
        off += (~t.activity).sum()
        t = step_channel(t, cfg, rng)
    assert md / on == pytest.approx(0.2, abs=0.005)
    assert fa / off == pytest.approx(0.1, abs=0.005)


def test_detector_fires_only_every_period():
    cfg = reference_defaults(sensing=SensingConfig(detector=DetectorConfig(0.3, 0.3, 5)))
    rng = np.random.default_rng(5)
    t = initial_csi(cfg, rng)
    obs = None
    for n in range(40):
        obs_new = sense(t, cfg, rng, obs)
        assert obs_new.activity_fresh == (n % 5 == 0)
        if n % 5:
            np.testing.assert_array_equal(obs_new.activity_obs, obs.activity_obs)
        obs = obs_new
        t = step_channel(t, cfg, rng)


def test_measurement_present_iff_sensed():
    cfg = reference_defaults(sensing=SensingConfig(sp_noise=SpNoiseConfig(snr_db=4.0, period=3)))
    rng = np.random.default_rng(6)
    t = initial_csi(cfg, rng)
    for n in range(9):
        obs = sense(t, cfg, rng)
        present = np.all(np.isfinite(obs.sp_meas), axis=-1)
        np.testing.assert_array_equal(present, obs.sp_sensed)
        assert obs.sp_sensed.all() == (n % 3 == 0)
        t = step_channel(t, cfg, rng)


def test_measurement_noise_variance(rng):
    cfg = reference_defaults(sensing=SensingConfig(sp_noise=SpNoiseConfig(snr_db=4.0)))
    nu = cfg.sp_noise_var[0, 0]
    # the 4 dB ratio is avg_gain_sp / (2 nu)
    assert 1.0 / (2 * nu) == pytest.approx(10 ** 0.4)
    t = initial_csi(cfg, rng)
    err = np.concatenate([(sense(t, cfg, rng).sp_meas - t.sp_lowpass).ravel() for _ in range(2000)])
    assert err.var() == pytest.approx(nu, rel=0.02)
