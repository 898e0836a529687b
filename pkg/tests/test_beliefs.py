import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ncx2

from underlay_cr import allocator
from underlay_cr.beliefs import (BeliefError, BeliefState, GaussianLowpass, PointMass, TruncatedExponential,
                                 activity_posterior, expect_over_belief, expected_sp_gain, gm_predict,
                                 kalman_correct, prior_beliefs, stale_activity_update, truth_beliefs,
                                 update_beliefs, write_belief_trace)
from underlay_cr.config import (ActivityModel, DetectorConfig, QuadratureSpec, QuantizerConfig, SensingConfig,
                                SpNoiseConfig, reference_defaults)
from underlay_cr.model import initial_csi, pu_rate, sense, step_channel, su_rate

SPEC = QuadratureSpec()


# ---------------------------------------------------------------- activity

def test_perfect_detector_posterior():
    assert activity_posterior(1, 0.0, 0.0, 0.2, 0.8) == pytest.approx(1.0)
    assert activity_posterior(0, 0.0, 0.0, 0.2, 0.8) == pytest.approx(0.0)


@pytest.mark.parametrize("obs", [0, 1])
def test_uninformative_detector_returns_prior(obs):
    assert activity_posterior(obs, 0.5, 0.5, 0.2, 0.8) == pytest.approx(0.8)


def test_posterior_reference_value():
    # (1 - 0.02) 0.8 / (0.03 0.2 + 0.98 0.8) = 0.784 / 0.790
    q = activity_posterior(1, 0.03, 0.02, 0.2, 0.8)
    assert q == pytest.approx(0.784 / 0.790, rel=1e-14)
    assert q == pytest.approx(0.99241, abs=5e-6)


def test_posterior_degenerate_model_raises():
    # the detector never reports 1, yet it did
    with pytest.raises(BeliefError):
        activity_posterior(1, 0.0, 1.0, 0.2, 0.8)


@given(st.floats(0, 1), st.floats(0, 0.49), st.floats(0, 0.49), st.floats(0.01, 0.99))
def test_posterior_is_probability_and_informative(_, p_fa, p_md, p1):
    q1 = activity_posterior(1, p_fa, p_md, 1 - p1, p1)
    q0 = activity_posterior(0, p_fa, p_md, 1 - p1, p1)
    assert 0 <= q0 <= p1 + 1e-12 <= q1 + 2e-12 <= 1 + 3e-12


def test_stale_update_values():
    chain = ActivityModel(0.975, 0.1)
    assert stale_activity_update(0.8, chain) == pytest.approx(0.8)
    assert stale_activity_update(1.0, ActivityModel(1.0, 0.1)) == 1.0
    assert stale_activity_update(0.5, chain) == pytest.approx(0.5375)


# ---------------------------------------------------------------- Gauss-Markov / Kalman

def test_gm_predict_values():
    mu = np.array([1.0, 0.0])
    m, v = gm_predict(mu, 0.2, 1.0)
    np.testing.assert_array_equal(m, mu)
    assert v == pytest.approx(0.2)
    m, v = gm_predict(mu, 0.2, 0.0, stat_var=0.5)
    np.testing.assert_array_equal(m, 0.0)
    assert v == pytest.approx(0.5)
    m, v = gm_predict(mu, 0.2, 0.81)
    np.testing.assert_allclose(m, [0.9, 0.0])
    assert v == pytest.approx(0.257)


def test_kalman_perfect_measurement():
    m, v = kalman_correct(np.array([0.3, -0.1]), 0.4, np.array([1.0, 2.0]), 0.0)
    np.testing.assert_array_equal(m, [1.0, 2.0])
    assert v == 0.0


def test_kalman_symmetric_fusion():
    m, v = kalman_correct(np.array([0.0, 1.0]), 0.3, np.array([1.0, 0.0]), 0.3)
    np.testing.assert_allclose(m, [0.5, 0.5])
    assert v == pytest.approx(0.15)


def test_kalman_inconsistent_zero_variances_raise():
    with pytest.raises(BeliefError):
        kalman_correct(np.array([0.0, 0.0]), 0.0, np.array([1.0, 0.0]), 0.0)
    m, v = kalman_correct(np.array([1.0, 0.0]), 0.0, np.array([1.0, 0.0]), 0.0)
    np.testing.assert_array_equal(m, [1.0, 0.0])


@given(st.floats(1e-4, 10), st.floats(1e-4, 10))
def test_kalman_variance_shrinks(var_hat, nu):
    _, v = kalman_correct(np.zeros(2), var_hat, np.ones(2), nu)
    assert v <= min(var_hat, nu) * (1 + 1e-12)


def test_kalman_variance_non_increasing_with_measurements():
    var = 0.5
    hist = []
    for _ in range(30):
        _, var_hat = gm_predict(np.zeros(2), var, 1.0)
        _, var = kalman_correct(np.zeros(2), var_hat, np.zeros(2), 0.2)
        hist.append(float(var))
    assert all(b <= a + 1e-15 for a, b in zip(hist, hist[1:]))


# ---------------------------------------------------------------- expectations

def test_expected_sp_gain_values():
    assert expected_sp_gain(GaussianLowpass(np.zeros(2), np.array(0.5))) == pytest.approx(1.0)
    assert expected_sp_gain(PointMass(np.array(0.3))) == pytest.approx(0.3)
    assert expected_sp_gain(GaussianLowpass(np.array([0.6, 0.8]), np.array(0.25))) == pytest.approx(1.5)


def test_expected_sp_gain_against_monte_carlo(rng):
    g = np.array([0.6, 0.8]) + 0.5 * rng.standard_normal((1_000_000, 2))
    mc = (g ** 2).sum(axis=1).mean()
    assert abs(mc / 1.5 - 1) < 0.005
    # the quadrature agrees with the closed form
    gl = GaussianLowpass(np.array([0.6, 0.8]), np.array(0.25))
    assert expect_over_belief(lambda h: h, gl, SPEC) == pytest.approx(1.5, rel=1e-10)


def test_expectation_on_point_mass():
    assert expect_over_belief(lambda h: h, PointMass(np.array(0.7))) == pytest.approx(0.7)


def test_tail_region_is_memoryless():
    te = TruncatedExponential(np.array(1.3), np.array(np.inf), np.array(1.0))
    assert expect_over_belief(lambda h: h, te, SPEC) == pytest.approx(2.3, rel=1e-12)
    assert te.mean == pytest.approx(2.3)


def test_truncated_exponential_mean_matches_quadrature():
    te = TruncatedExponential(np.array([0.0, 0.2, 1.0]), np.array([0.5, 3.0, 1.1]), np.array([2.0, 1.0, 0.5]))
    np.testing.assert_allclose(expect_over_belief(lambda h: h, te, SPEC), te.mean, rtol=1e-12)


def test_pu_rate_expectation_against_monte_carlo(rng):
    mean, var = np.array([1.0, 0.0]), 0.25
    gl = GaussianLowpass(mean, np.array(var))
    draws = var * ncx2.rvs(2, 1.0 / var, size=1_000_000, random_state=rng)
    f = lambda h: pu_rate(10.0, 2.0 * h)
    q = expect_over_belief(f, gl, SPEC)
    assert abs(q / f(draws).mean() - 1) < 0.002


@settings(max_examples=50)
@given(st.floats(0, 3), st.floats(0.01, 3), st.floats(0.05, 5), st.floats(0, 2), st.floats(1e-3, 2))
def test_every_belief_integrates_to_one(lo, width, scale, mu, var):
    for belief in (TruncatedExponential(np.array(lo), np.array(lo + width), np.array(scale)),
                   TruncatedExponential(np.array(lo), np.array(np.inf), np.array(scale)),
                   GaussianLowpass(np.array([mu, 0.3]), np.array(var))):
        assert expect_over_belief(lambda h: np.ones_like(h), belief, SPEC) == pytest.approx(1.0, abs=1e-8)


ACCEPTANCE_FUNCTIONS = {"identity": lambda h: h, "su_rate": lambda h: su_rate(h, 1.7),
                        "pu_rate": lambda h: pu_rate(10.0, 1.7 * h)}


@pytest.mark.parametrize("name", list(ACCEPTANCE_FUNCTIONS))
@pytest.mark.parametrize("belief", [
    TruncatedExponential(np.array(0.0), np.array(0.6), np.array(2.0)),
    TruncatedExponential(np.array(0.6), np.array(2.4), np.array(2.0)),
    TruncatedExponential(np.array(2.4), np.array(np.inf), np.array(2.0)),
    GaussianLowpass(np.array([0.0, 0.0]), np.array(0.5)),
    GaussianLowpass(np.array([1.2, -0.4]), np.array(0.1)),
    GaussianLowpass(np.array([0.3, 0.1]), np.array(0.02)),
], ids=["te-low", "te-mid", "te-tail", "gl-rayleigh", "gl-rician", "gl-tight"])
def test_doubling_quadrature_order_is_stable(belief, name):
    f = ACCEPTANCE_FUNCTIONS[name]
    a = expect_over_belief(f, belief, SPEC)
    b = expect_over_belief(f, belief, SPEC.doubled())
    assert abs(a - b) < 1e-6


def test_non_finite_integrand_raises():
    with pytest.raises(BeliefError):
        with np.errstate(divide="ignore", invalid="ignore"):
            expect_over_belief(lambda h: 1.0 / (h - h), PointMass(np.array(1.0)))


def test_empty_region_raises():
    with pytest.raises(BeliefError):
        TruncatedExponential(np.array(1.0), np.array(1.0), np.array(1.0)).nodes(SPEC)


# ---------------------------------------------------------------- belief state updates

def _walk(cfg, slots, seed=0):
    rng_ch, rng_s = np.random.default_rng(seed), np.random.default_rng(seed + 100)
    t = initial_csi(cfg, rng_ch)
    obs = b = None
    for n in range(slots):
        if n:
            t = step_channel(t, cfg, rng_ch)
        obs = sense(t, cfg, rng_s, obs)
        b = update_beliefs(b, obs, cfg, t)
        yield t, obs, b


def test_perfect_mode_beliefs_are_the_truth():
    cfg = reference_defaults()
    for t, _, b in _walk(cfg, 5):
        np.testing.assert_array_equal(b.activity, t.activity)
        np.testing.assert_array_equal(b.su_exact, t.su_gain)
        np.testing.assert_allclose(b.sp_exact, t.sp_gain, rtol=1e-15)


def test_variant_i_uses_truth_under_imperfect_sensing():
    cfg = reference_defaults(csi_variant="i", sensing=SensingConfig(
        quantizer=QuantizerConfig(4), detector=DetectorConfig(0.1, 0.1, 10), sp_noise=SpNoiseConfig()))
    for t, _, b in _walk(cfg, 12):
        np.testing.assert_array_equal(b.activity, t.activity)
        np.testing.assert_array_equal(b.su_exact, t.su_gain)


def test_variant_iii_is_constant():
    cfg = reference_defaults(csi_variant="iii", sensing=SensingConfig(quantizer=QuantizerConfig(4)))
    beliefs = [b for _, _, b in _walk(cfg, 10)]
    for b in beliefs[1:]:
        np.testing.assert_array_equal(b.activity, beliefs[0].activity)
        np.testing.assert_array_equal(b.su_scale, beliefs[0].su_scale)
        np.testing.assert_array_equal(b.sp_var, beliefs[0].sp_var)
    np.testing.assert_allclose(beliefs[0].activity, 0.8)


def test_variant_ii_takes_observations_at_face_value():
    cfg = reference_defaults(csi_variant="ii", sensing=SensingConfig(
        detector=DetectorConfig(0.1, 0.1, 10), sp_noise=SpNoiseConfig()))
    for _, obs, b in _walk(cfg, 12):
        np.testing.assert_array_equal(b.activity, obs.activity_obs.astype(float))
        np.testing.assert_allclose(b.sp_exact, (obs.sp_meas ** 2).sum(axis=-1))


def test_detector_belief_between_sensing_slots():
    det = DetectorConfig(0.03, 0.02, 5)
    cfg = reference_defaults(sensing=SensingConfig(detector=det))
    chain = cfg.activity
    seen = list(_walk(cfg, 11))
    posterior = seen[5][2].activity
    expected = activity_posterior(seen[5][1].activity_obs.astype(int), 0.03, 0.02, 0.2, 0.8)
    np.testing.assert_allclose(posterior, expected)
    q = posterior
    for _ in range(5):
        q = stale_activity_update(q, chain)
    # slot 10 is a sensing slot again, so compare the 4-step propagation at slot 9 and the 5-fold one separately
    q4 = posterior
    for _ in range(4):
        q4 = stale_activity_update(q4, chain)
    np.testing.assert_allclose(seen[9][2].activity, q4, rtol=1e-14)
    manual = seen[9][2].activity
    np.testing.assert_allclose(stale_activity_update(manual, chain), q, rtol=1e-14)


def test_quantized_belief_is_region_law():
    cfg = reference_defaults(sensing=SensingConfig(quantizer=QuantizerConfig(4)))
    for t, obs, b in _walk(cfg, 3):
        assert np.all((b.su_lo <= t.su_gain) & (t.su_gain < b.su_hi))
        assert b.su_exact is None


def test_noisy_sp_belief_tracks_channel():
    cfg = reference_defaults(sp_correlation=0.99, sensing=SensingConfig(sp_noise=SpNoiseConfig(noise_var=0.01, snr_db=None)))
    errs = []
    for t, _, b in _walk(cfg, 60):
        errs.append(np.abs(b.sp_mean - t.sp_lowpass).mean())
        assert np.all(b.sp_var <= 0.01 + 1e-15)
    assert np.mean(errs[10:]) < 0.1


def test_outdated_measurements_only_predict():
    cfg = reference_defaults(sp_correlation=0.81, sensing=SensingConfig(sp_noise=SpNoiseConfig(snr_db=4.0, period=4)))
    seen = list(_walk(cfg, 6))
    b0, b1 = seen[0][2], seen[1][2]
    m_hat, v_hat = gm_predict(b0.sp_mean, b0.sp_var, 0.81, cfg.sp_stationary_var)
    np.testing.assert_allclose(b1.sp_mean, m_hat)
    np.testing.assert_allclose(b1.sp_var, v_hat)


def test_imperfect_decisions_converge_to_perfect():
    """Fine quantizer and nearly noiseless SU-to-PU tracking reproduce the perfect-CSI winners."""
    sensing = SensingConfig(quantizer=QuantizerConfig(levels=2048),
                            sp_noise=SpNoiseConfig(noise_var=1e-10, snr_db=None))
    cfg = reference_defaults(sensing=sensing, sp_correlation=0.5)
    mult = allocator.Multipliers(np.full(5, 1.3), np.full(10, 1.2), np.full(10, 0.4))
    agree = total = 0
    for t, _, b in _walk(cfg, 60):
        a_imp = allocator.allocate(b, mult, cfg, prune=True)
        a_true = allocator.allocate(truth_beliefs(t), mult, cfg)
        agree += int(np.sum(a_imp.winner == a_true.winner))
        total += a_true.winner.size
    assert agree / total >= 0.99


def test_belief_trace_lines():
    cfg = reference_defaults(num_sus=2, num_channels=3, sensing=SensingConfig(quantizer=QuantizerConfig(4),
                                                                         sp_noise=SpNoiseConfig()))
    _, _, b = next(iter(_walk(cfg, 1)))
    fh = io.StringIO()
    write_belief_trace(b, fh)
    recs = [json.loads(line) for line in fh.getvalue().splitlines()]
    assert len(recs) == 3 + 2 * 3 * 2
    fams = {r["family"] for r in recs}
    assert fams == {"bernoulli", "truncated_exponential", "gaussian_lowpass"}


def test_belief_state_validation():
    with pytest.raises(BeliefError):
        BeliefState(slot=0, activity=np.array([1.2]))
    with pytest.raises(BeliefError):
        BeliefState(slot=0, activity=np.array([0.5]), sp_mean=np.zeros((1, 1, 2)), sp_var=np.array([[-1.0]]))


def test_prior_beliefs_match_stationary_laws():
    cfg = reference_defaults()
    b = prior_beliefs(cfg)
    np.testing.assert_allclose(b.activity, 0.8)
    np.testing.assert_allclose(expected_sp_gain(b.sp_belief), cfg.avg_gain_sp)
    np.testing.assert_allclose(b.su_belief.mean, cfg.avg_gain_su)
