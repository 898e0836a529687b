"""Instantaneous beliefs over the CSI and expectations taken across them.

Every belief family can emit quadrature nodes ``(x, w)`` with trailing node
axis; expectations are ``sum(w * f(x))``. Point masses are a single node with
unit weight, so downstream code never special-cases perfect CSI.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .config import ActivityModel, QuadratureSpec, ScenarioConfig
from .model import CsiObservation, CsiTrue, quantizer_bounds


class BeliefError(ValueError):
    """Raised for inconsistent sensing models or ill-defined beliefs."""


@lru_cache(maxsize=None)
def _legendre(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w / 2.0  # weights on [0, 1] after mapping u = (x + 1) / 2


@lru_cache(maxsize=None)
def _laguerre(n):
    x, w = np.polynomial.laguerre.laggauss(n)
    keep = w > 1e-18  # far nodes carry < 1e-16 of any polynomially bounded integrand
    return x[keep], w[keep]


# --------------------------------------------------------------------------
# belief families


@dataclass(frozen=True)
class PointMass:
    value: np.ndarray

    def nodes(self, spec: QuadratureSpec | None = None):
        v = np.asarray(self.value, dtype=float)
        return v[..., None], np.ones(v.shape + (1,))

    @property
    def mean(self):
        return np.asarray(self.value, dtype=float)


@dataclass(frozen=True)
class TruncatedExponential:
    """Exponential law with mean ``scale`` restricted to ``[lo, hi)``.

    Finite regions use Gauss-Legendre in CDF coordinates (so the weights sum
    to one exactly); unbounded regions use Gauss-Laguerre after shifting to
    ``lo``, which is exact for the exponential weight.
    """

    lo: np.ndarray
    hi: np.ndarray
    scale: np.ndarray

    def nodes(self, spec: QuadratureSpec):
        lo, hi, scale = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (self.lo, self.hi, self.scale)))
        if np.any(~(hi > lo)):
            raise BeliefError("truncated exponential region must be nonempty")
        lx, lw = _laguerre(spec.tail_order)
        nf, nt = spec.finite_order, lx.size
        n = max(nf, nt)
        x = np.zeros(lo.shape + (n,))
        w = np.zeros(lo.shape + (n,))
        tail = np.isinf(hi)
        if np.any(~tail):
            gx, gw = _legendre(nf)
            # conditional CDF measured from lo, stable however far lo sits in the tail
            m = scale[~tail][:, None]
            mass = -np.expm1(-(hi[~tail] - lo[~tail])[:, None] / m)
            x[~tail, :nf] = lo[~tail][:, None] - m * np.log1p(-mass * (gx + 1.0) / 2.0)
            w[~tail, :nf] = gw
        if np.any(tail):
            x[tail, :nt] = lo[tail][:, None] + scale[tail][:, None] * lx
            w[tail, :nt] = lw
            # padding nodes sit at lo with zero weight
            x[tail, nt:] = lo[tail][:, None]
        if nf < n:
            x[~tail, nf:] = lo[~tail][:, None]
        return x, w

    @property
    def mean(self):
        lo, hi, m = (np.asarray(a, dtype=float) for a in (self.lo, self.hi, self.scale))
        with np.errstate(invalid="ignore"):
            # E[X | lo <= X < hi] = m + (lo e^{-lo/m} - hi e^{-hi/m}) / (e^{-lo/m} - e^{-hi/m})
            d = np.exp(-(hi - lo) / m)
            hi_term = np.where(np.isinf(hi), 0.0, (hi - lo) * d)
            out = m + lo - hi_term / (1.0 - d)
        return np.where(np.isinf(hi), lo + m, out)


@dataclass(frozen=True)
class GaussianLowpass:
    """Law of ``|g|^2`` when ``g ~ N(mean, var I_2)``.

    Nodes come from polar coordinates around the mean: the squared radius of
    the standardized offset is Exp(1) (Gauss-Laguerre) and the angle is
    uniform (midpoint rule on the half circle, by symmetry).
    """

    mean_vec: np.ndarray
    var: np.ndarray

    def nodes(self, spec: QuadratureSpec):
        mu = np.asarray(self.mean_vec, dtype=float)
        var = np.asarray(self.var, dtype=float)
        if np.any(var < 0):
            raise BeliefError("Gaussian belief variance must be >= 0")
        r0 = np.sqrt(mu[..., 0] ** 2 + mu[..., 1] ** 2)[..., None, None]
        sd = np.sqrt(var)[..., None, None]
        t, wt = _laguerre(spec.radial_order)
        na = spec.angular_order
        phi = (np.arange(na) + 0.5) * np.pi / na
        radius = np.sqrt(2.0 * t)[:, None]
        # |mu + sd * radius * (cos phi, sin phi)|^2 with mu rotated onto the first axis
        x = r0 ** 2 + 2.0 * r0 * sd * radius * np.cos(phi) + sd ** 2 * radius ** 2
        w = np.broadcast_to(wt[:, None] / na, x.shape[-2:])
        shape = x.shape[:-2] + (x.shape[-2] * x.shape[-1],)
        return np.maximum(x, 0.0).reshape(shape), np.broadcast_to(w.reshape(-1), shape)

    @property
    def mean(self):
        return expected_sp_gain(self)


def expected_sp_gain(belief) -> np.ndarray:
    """Mean SU-to-PU power gain under ``belief``."""
    if isinstance(belief, GaussianLowpass):
        mu = np.asarray(belief.mean_vec, dtype=float)
        return mu[..., 0] ** 2 + mu[..., 1] ** 2 + 2.0 * np.asarray(belief.var, dtype=float)
    return belief.mean


def expect_over_belief(f, belief, spec: QuadratureSpec | None = None):
    """``E[f(h)]`` for ``h`` distributed as ``belief`` (vectorized over the belief's arrays)."""
    spec = spec or QuadratureSpec()
    x, w = belief.nodes(spec)
    vals = f(x)
    contrib = np.where(w > 0, w * vals, 0.0)
    if not np.all(np.isfinite(contrib)):
        raise BeliefError("integrand is not finite on the belief support")
    return contrib.sum(axis=-1)


# --------------------------------------------------------------------------
# elementary updates


def activity_posterior(obs, p_fa, p_md, p0, p1):
    """Pr{a = 1 | detector output ``obs``} for a binary detector.

    Uses the posterior probabilities of the two correct decisions; ``p0`` and
    ``p1`` are the prior probabilities of the idle and active states.
    """
    obs = np.asarray(obs)
    num0 = (1.0 - p_fa) * p0
    den0 = num0 + p_md * p1
    num1 = (1.0 - p_md) * p1
    den1 = p_fa * p0 + num1
    need0 = np.any(obs == 0)
    need1 = np.any(obs == 1)
    if (need0 and den0 == 0) or (need1 and den1 == 0):
        raise BeliefError("detector output has zero probability under the sensing model")
    with np.errstate(invalid="ignore", divide="ignore"):
        p00 = num0 / den0
        p11 = num1 / den1
    return np.where(obs == 1, p11, 1.0 - p00).astype(float)


def stale_activity_update(q, chain: ActivityModel):
    """One-step propagation of Pr{active} through the activity chain."""
    return np.asarray(q) * chain.p11 + (1.0 - np.asarray(q)) * chain.p01


def gm_predict(mean, var, corr, stat_var=0.5):
    """Gauss-Markov prediction of the low-pass belief (per-component variance)."""
    mean = np.asarray(mean, dtype=float)
    corr = np.asarray(corr, dtype=float)
    var_hat = corr * np.asarray(var, dtype=float) + (1.0 - corr) * stat_var
    return np.sqrt(corr)[..., None] * mean if mean.ndim > corr.ndim else np.sqrt(corr) * mean, var_hat


def kalman_correct(mean_hat, var_hat, meas, noise_var):
    """Measurement update for ``meas = g + v``, ``v ~ N(0, noise_var I)``."""
    mean_hat = np.asarray(mean_hat, dtype=float)
    meas = np.asarray(meas, dtype=float)
    var_hat = np.asarray(var_hat, dtype=float)
    noise_var = np.broadcast_to(np.asarray(noise_var, dtype=float), var_hat.shape)
    total = var_hat + noise_var
    both_zero = total == 0
    if np.any(both_zero):
        diff = np.abs(meas - mean_hat)
        diff = diff.reshape(var_hat.shape + (-1,)).max(axis=-1) if diff.ndim > var_hat.ndim else diff
        if np.any(diff[both_zero] > 0):
            raise BeliefError("zero-variance prediction contradicts a noiseless measurement")
    safe = np.where(both_zero, 1.0, total)
    expand = (lambda a: a[..., None]) if mean_hat.ndim > var_hat.ndim else (lambda a: a)
    mean = (expand(var_hat) * meas + expand(noise_var) * mean_hat) / expand(safe)
    mean = np.where(expand(both_zero), mean_hat, mean)
    var = np.where(both_zero, 0.0, var_hat * noise_var / safe)
    return mean, var


# --------------------------------------------------------------------------
# full belief state


@dataclass(frozen=True)
class BeliefState:
    """Beliefs of every CSI entity in one slot.

    ``activity`` is Pr{a_k = 1}. The SU-gain belief is either exact
    (``su_exact``) or truncated exponential (``su_lo``, ``su_hi``,
    ``su_scale``). The SU-to-PU belief is either exact (``sp_exact``) or a
    Gaussian low-pass pair (``sp_mean``, ``sp_var``).
    """

    slot: int
    activity: np.ndarray
    su_exact: np.ndarray | None = None
    su_lo: np.ndarray | None = None
    su_hi: np.ndarray | None = None
    su_scale: np.ndarray | None = None
    sp_exact: np.ndarray | None = None
    sp_mean: np.ndarray | None = None
    sp_var: np.ndarray | None = None

    def __post_init__(self):
        q = np.asarray(self.activity)
        if np.any((q < 0) | (q > 1)):
            raise BeliefError("activity probability outside [0, 1]")
        if self.sp_var is not None and np.any(np.asarray(self.sp_var) < 0):
            raise BeliefError("negative low-pass variance")

    @property
    def su_belief(self):
        if self.su_exact is not None:
            return PointMass(self.su_exact)
        return TruncatedExponential(self.su_lo, self.su_hi, self.su_scale)

    @property
    def sp_belief(self):
        if self.sp_exact is not None:
            return PointMass(self.sp_exact)
        return GaussianLowpass(self.sp_mean, self.sp_var)

    @property
    def exact_gains(self) -> bool:
        return self.su_exact is not None and self.sp_exact is not None

    def records(self):
        """One dict per (channel, entity) for the belief trace."""
        K = len(self.activity)
        for k in range(K):
            yield {"slot": self.slot, "entity": "activity", "k": k, "family": "bernoulli",
                   "p_active": float(self.activity[k])}
        M = (self.su_exact if self.su_exact is not None else self.su_lo).shape[1]
        for k in range(K):
            for m in range(M):
                if self.su_exact is not None:
                    yield {"slot": self.slot, "entity": "su_gain", "k": k, "m": m,
                           "family": "point", "value": float(self.su_exact[k, m])}
                else:
                    yield {"slot": self.slot, "entity": "su_gain", "k": k, "m": m,
                           "family": "truncated_exponential", "lo": float(self.su_lo[k, m]),
                           "hi": float(self.su_hi[k, m]), "scale": float(self.su_scale[k, m])}
                if self.sp_exact is not None:
                    yield {"slot": self.slot, "entity": "sp_gain", "k": k, "m": m,
                           "family": "point", "value": float(self.sp_exact[k, m])}
                else:
                    yield {"slot": self.slot, "entity": "sp_gain", "k": k, "m": m,
                           "family": "gaussian_lowpass", "mean": self.sp_mean[k, m].tolist(),
                           "var": float(self.sp_var[k, m])}


def write_belief_trace(beliefs: BeliefState, fh) -> None:
    for rec in beliefs.records():
        fh.write(json.dumps(rec, allow_nan=True) + "\n")


def prior_beliefs(cfg: ScenarioConfig, slot: int = 0) -> BeliefState:
    """Stationary (statistical-CSI-only) beliefs."""
    K, M = cfg.num_channels, cfg.num_sus
    return BeliefState(
        slot=slot,
        activity=np.full(K, cfg.activity.stationary_active),
        su_lo=np.zeros((K, M)), su_hi=np.full((K, M), np.inf), su_scale=np.array(cfg.avg_gain_su),
        sp_mean=np.zeros((K, M, 2)), sp_var=np.array(cfg.sp_stationary_var),
    )


def truth_beliefs(true: CsiTrue) -> BeliefState:
    return BeliefState(slot=true.slot, activity=true.activity.astype(float),
                       su_exact=true.su_gain, sp_exact=true.sp_gain)


def update_beliefs(prev: BeliefState | None, obs: CsiObservation, cfg: ScenarioConfig,
                   true: CsiTrue | None = None) -> BeliefState:
    """Belief for slot ``obs.slot`` from the previous belief and the new observation.

    The CSI variant selects the rule: ``optimal`` tracks the proper posterior,
    ``i`` uses the ground truth (``true`` is required), ``ii`` takes raw
    observations at face value and ``iii`` keeps the stationary priors.
    """
    variant = cfg.csi_variant
    n = obs.slot
    if variant == "iii":
        return prior_beliefs(cfg, n)
    if variant == "i":
        if true is None:
            raise BeliefError("variant 'i' needs the true CSI")
        return truth_beliefs(true)

    sensing = cfg.sensing
    naive = variant == "ii"
    fields = {}

    det = sensing.detector
    if det is None or naive:
        q = np.asarray(obs.activity_obs, dtype=float)
    elif obs.activity_fresh:
        p1 = cfg.activity.stationary_active
        q = activity_posterior(obs.activity_obs.astype(int), det.p_fa, det.p_md, 1.0 - p1, p1)
    else:
        q_prev = prev.activity if prev is not None else np.full(cfg.num_channels, cfg.activity.stationary_active)
        q = stale_activity_update(q_prev, cfg.activity)

    if sensing.quantizer is None:
        fields["su_exact"] = obs.su_gain
    else:
        lo, hi = quantizer_bounds(cfg, obs.su_region)
        if naive:
            fields["su_exact"] = TruncatedExponential(lo, hi, cfg.avg_gain_su).mean
        else:
            fields.update(su_lo=lo, su_hi=hi, su_scale=np.array(cfg.avg_gain_su))

    sensed = obs.sp_sensed
    meas = obs.sp_meas
    if sensing.sp_noise is None:
        fields["sp_exact"] = meas[..., 0] ** 2 + meas[..., 1] ** 2
    elif naive:
        fresh = meas[..., 0] ** 2 + meas[..., 1] ** 2
        if prev is not None and prev.sp_exact is not None:
            fields["sp_exact"] = np.where(sensed, fresh, prev.sp_exact)
        else:
            fields["sp_exact"] = np.where(sensed, fresh, cfg.avg_gain_sp)
    else:
        if prev is None or prev.sp_mean is None:
            mean, var = np.zeros(cfg.avg_gain_sp.shape + (2,)), np.array(cfg.sp_stationary_var)
        else:
            mean, var = prev.sp_mean, prev.sp_var
        mean_hat, var_hat = gm_predict(mean, var, cfg.sp_correlation, cfg.sp_stationary_var)
        if np.any(sensed):
            mean_c, var_c = kalman_correct(mean_hat, var_hat, np.where(sensed[..., None], meas, mean_hat),
                                           cfg.sp_noise_var)
            mean_hat = np.where(sensed[..., None], mean_c, mean_hat)
            var_hat = np.where(sensed, var_c, var_hat)
        fields.update(sp_mean=mean_hat, sp_var=var_hat)

    return BeliefState(slot=n, activity=q, **fields)
