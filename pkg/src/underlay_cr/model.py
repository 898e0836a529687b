"""Ground-truth channel processes, sensing, and the rate functions.

Shapes: K channels, M secondary users. Per-link arrays are ``(K, M)``,
low-pass SU-to-PU channels are ``(K, M, 2)`` (real, imaginary).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ScenarioConfig

LOG2E = float(np.log2(np.e))


def su_rate(h, p):
    """Secondary rate ``log2(1 + h p)`` in bits/s/Hz."""
    return np.log1p(np.multiply(h, p)) * LOG2E


def su_rate_dp(h, p):
    h = np.asarray(h, dtype=float)
    return h * LOG2E / (1.0 + h * p)


def pu_rate(gamma, x):
    """Primary rate ``log2(1 + gamma / (1 + x))`` under interference power ``x``."""
    return np.log1p(np.divide(gamma, 1.0 + np.asarray(x, dtype=float))) * LOG2E


def pu_rate_dx(gamma, x):
    x = np.asarray(x, dtype=float)
    return -np.asarray(gamma, dtype=float) * LOG2E / ((1.0 + x) * (1.0 + gamma + x))


@dataclass(frozen=True)
class CsiTrue:
    slot: int
    activity: np.ndarray  # (K,) bool
    sp_lowpass: np.ndarray  # (K, M, 2)
    su_gain: np.ndarray  # (K, M)

    @property
    def sp_gain(self) -> np.ndarray:
        g = self.sp_lowpass
        return g[..., 0] ** 2 + g[..., 1] ** 2


@dataclass(frozen=True)
class CsiObservation:
    """What the scheduler receives in one slot.

    ``activity_obs`` is the detector output when a detector is configured
    (``activity_fresh`` tells whether it fired this slot) and the exact
    activity otherwise. ``su_region`` (1-based) is set with a quantizer,
    ``su_gain`` otherwise. ``sp_meas`` carries the noisy low-pass measurement
    with SU-to-PU noise (NaN rows where ``sp_sensed`` is False) and the exact
    low-pass channel otherwise.
    """

    slot: int
    activity_obs: np.ndarray
    activity_fresh: bool
    su_region: np.ndarray | None = None
    su_gain: np.ndarray | None = None
    sp_meas: np.ndarray | None = None
    sp_sensed: np.ndarray | None = None


def initial_csi(cfg: ScenarioConfig, rng: np.random.Generator) -> CsiTrue:
    """Slot-0 state drawn from the stationary laws."""
    K, M = cfg.num_channels, cfg.num_sus
    active = rng.random(K) < cfg.activity.stationary_active
    sd = np.sqrt(cfg.sp_stationary_var)[..., None]
    g = sd * rng.standard_normal((K, M, 2))
    h2 = cfg.avg_gain_su * rng.standard_exponential((K, M))
    return CsiTrue(0, active, g, h2)


def step_channel(prev: CsiTrue, cfg: ScenarioConfig, rng: np.random.Generator) -> CsiTrue:
    """Advance the activity chain and the Gauss-Markov SU-to-PU channels by one slot.

    SU-to-SU gains are redrawn i.i.d. exponential every slot.
    """
    K, M = cfg.num_channels, cfg.num_sus
    u = rng.random(K)
    p_on = np.where(prev.activity, cfg.activity.p11, cfg.activity.p01)
    active = u < p_on
    corr = cfg.sp_correlation[..., None]
    innov = np.sqrt(cfg.sp_stationary_var)[..., None] * rng.standard_normal((K, M, 2))
    g = np.sqrt(corr) * prev.sp_lowpass + np.sqrt(1.0 - corr) * innov
    h2 = cfg.avg_gain_su * rng.standard_exponential((K, M))
    return CsiTrue(prev.slot + 1, active, g, h2)


def quantizer_thresholds(cfg: ScenarioConfig) -> np.ndarray:
    """Inner thresholds ``(K, M, L-1)`` of the SU-gain quantizer."""
    q = cfg.sensing.quantizer
    K, M = cfg.num_channels, cfg.num_sus
    if q is None:
        raise ValueError("scenario has no SU-gain quantizer")
    if q.thresholds is not None:
        return np.broadcast_to(np.asarray(q.thresholds, dtype=float), (K, M, q.levels - 1))
    levels = np.arange(1, q.levels) / q.levels
    # inverse exponential CDF at l/L
    return -cfg.avg_gain_su[..., None] * np.log1p(-levels)


def quantizer_bounds(cfg: ScenarioConfig, region: np.ndarray):
    """Lower/upper edges of the 1-based ``region`` of every link."""
    thr = quantizer_thresholds(cfg)
    K, M = region.shape
    edges = np.concatenate([np.zeros((K, M, 1)), thr, np.full((K, M, 1), np.inf)], axis=-1)
    idx = region[..., None]
    lo = np.take_along_axis(edges, idx - 1, axis=-1)[..., 0]
    hi = np.take_along_axis(edges, idx, axis=-1)[..., 0]
    return lo, hi


def quantize(cfg: ScenarioConfig, h: np.ndarray) -> np.ndarray:
    thr = quantizer_thresholds(cfg)
    return (h[..., None] >= thr).sum(axis=-1) + 1


def sense(true: CsiTrue, cfg: ScenarioConfig, rng: np.random.Generator,
          prev: CsiObservation | None = None) -> CsiObservation:
    """Produce the scheduler's view of ``true`` under the configured sensing modes."""
    sensing = cfg.sensing
    n = true.slot
    K, M = cfg.num_channels, cfg.num_sus
    # fixed draw order keeps sensing noise aligned across variants on one seed
    u_det = rng.random(K)
    noise = rng.standard_normal((K, M, 2))

    act_obs, fresh = true.activity, True
    if sensing.detector is not None:
        det = sensing.detector
        if n % det.period == 0 or prev is None:
            flip = np.where(true.activity, u_det < det.p_md, u_det < det.p_fa)
            act_obs = true.activity ^ flip
        else:
            act_obs, fresh = prev.activity_obs, False

    su_region = su_gain = None
    if sensing.quantizer is not None:
        su_region = quantize(cfg, true.su_gain)
    else:
        su_gain = true.su_gain

    sp_meas, sp_sensed = true.sp_lowpass, np.ones((K, M), dtype=bool)
    if sensing.sp_noise is not None:
        sensed = n % sensing.sp_noise.period == 0
        sp_sensed = np.full((K, M), sensed)
        if sensed:
            sd = np.sqrt(cfg.sp_noise_var)[..., None]
            sp_meas = true.sp_lowpass + sd * noise
        else:
            sp_meas = np.full((K, M, 2), np.nan)
    return CsiObservation(n, act_obs, fresh, su_region, su_gain, sp_meas, sp_sensed)
