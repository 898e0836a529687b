"""Projected stochastic subgradient tracking of the Lagrange multipliers.

The power price ``pi`` is always tracked. ``theta`` and ``rho`` are only
tracked when the scheme carries the long-term interference / capacity
constraint; otherwise they stay at zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .allocator import Allocation, Multipliers, allocate
from .beliefs import BeliefState, PointMass
from .config import ScenarioConfig
from .model import pu_rate

log = logging.getLogger(__name__)


def update_pi(pi, eta, budget, served):
    """``[pi - eta (budget - served)]_+``: the price rises when an SU overspends."""
    return np.maximum(np.asarray(pi) - eta * (np.asarray(budget) - served), 0.0)


def update_theta(theta, eta, active, interference, limit):
    """``[theta - eta a (limit - interference)]_+``; unchanged when the PU is idle."""
    return np.maximum(np.asarray(theta) - eta * np.asarray(active) * (np.asarray(limit) - interference), 0.0)


def update_rho(rho, eta, active, served_rate, target):
    """``[rho + eta a (target - served_rate)]_+``: grows while the PU is under-served."""
    return np.maximum(np.asarray(rho) + eta * np.asarray(active) * (np.asarray(target) - served_rate), 0.0)


def winner_expectations(alloc: Allocation, sp_nodes, gamma):
    """Belief expectations of the winner's interference ``h1 p`` and of the PU rate, per channel."""
    x1, w1 = sp_nodes
    idx = np.clip(alloc.winner - 1, 0, None)[..., None, None]
    x = np.take_along_axis(x1, idx, axis=-2)[..., 0, :]
    w = np.take_along_axis(w1, idx, axis=-2)[..., 0, :]
    p = alloc.power[..., None]
    interference = (w * x).sum(axis=-1) * alloc.power
    rate = (w * pu_rate(np.asarray(gamma)[..., None], x * p)).sum(axis=-1)
    return interference, rate


@dataclass
class DualState:
    mult: Multipliers
    step_pi: float = 0.01
    step_theta: float = 0.01
    step_rho: float = 0.01
    schedule: str = "constant"
    decay: float = 1000.0
    clamp: float = 1e6
    iteration: int = 0
    clamp_hits: int = field(default=0)

    @classmethod
    def from_config(cls, cfg: ScenarioConfig, mult: Multipliers | None = None) -> "DualState":
        mult = mult.copy() if mult is not None else Multipliers.zeros(cfg.num_sus, cfg.num_channels)
        mult.validate()
        return cls(mult, cfg.step_pi, cfg.step_theta, cfg.step_rho, cfg.step_schedule,
                   cfg.step_decay, cfg.multiplier_clamp)

    def factor(self) -> float:
        """Multiplier on the base stepsizes at the current iteration."""
        if self.schedule == "constant":
            return 1.0
        return 1.0 / np.sqrt(1.0 + self.iteration / self.decay)

    def _clamp(self, v):
        over = v > self.clamp
        if np.any(over):
            if self.clamp_hits == 0:
                log.warning("multiplier reached the clamp %.3g at iteration %d; "
                            "the scenario may be infeasible", self.clamp, self.iteration)
            self.clamp_hits += int(over.sum())
            v = np.minimum(v, self.clamp)
        return v


def update_all(state: DualState, cfg: ScenarioConfig, served, active, interference, pu_served) -> DualState:
    """One subgradient step from per-slot constraint samples (mutates and returns ``state``).

    ``served`` is the power each SU spent (M,); ``active``, ``interference``
    and ``pu_served`` are per channel (the activity may be a probability).
    """
    flags = cfg.flags
    f = state.factor()
    m = state.mult
    m.pi = state._clamp(update_pi(m.pi, f * state.step_pi, cfg.avg_power_budget, served))
    if flags.avg_interference:
        m.theta = state._clamp(update_theta(m.theta, f * state.step_theta, active, interference,
                                            cfg.max_interference))
    if flags.avg_capacity:
        m.rho = state._clamp(update_rho(m.rho, f * state.step_rho, active, pu_served,
                                        cfg.rate_target_value))
    state.iteration += 1
    return state


def update_all_with_belief(state: DualState, beliefs: BeliefState, alloc: Allocation,
                           cfg: ScenarioConfig, sp_nodes=None) -> DualState:
    """Belief form of the three updates: a -> E[a], h1 p -> E[h1] p, r1 -> E[r1] under the slot's beliefs.

    With point-mass beliefs this is exactly the instantaneous update.
    """
    if sp_nodes is None:
        sp_nodes = beliefs.sp_belief.nodes(cfg.quadrature)
    served = alloc.served_power(cfg.num_sus)
    interference, rate = winner_expectations(alloc, sp_nodes, cfg.pu_snr)
    return update_all(state, cfg, served, np.asarray(beliefs.activity, dtype=float), interference, rate)


def expected_subgradient(cfg: ScenarioConfig, mult: Multipliers, true_batch):
    """Monte-Carlo estimate of the dual subgradient at ``mult`` from a batch of CSI draws.

    Returns per-constraint mean excess (power: served - budget; interference:
    a (h1 p - limit); PU rate: a (target - r1)), the signs matching the
    direction each multiplier moves.
    """
    a, h1, h2 = true_batch
    beliefs = BeliefState(slot=0, activity=a.astype(float), su_exact=h2, sp_exact=h1)
    sp_nodes = PointMass(h1).nodes()
    alloc = allocate(beliefs, mult, cfg, su_nodes=PointMass(h2).nodes(), sp_nodes=sp_nodes, prune=True)
    served = alloc.served_power(cfg.num_sus) / a.shape[0]
    interference, rate = winner_expectations(alloc, sp_nodes, cfg.pu_snr)
    g_pi = served - cfg.avg_power_budget
    g_theta = (a * (interference - cfg.max_interference)).mean(axis=0)
    g_rho = (a * (cfg.rate_target_value - rate)).mean(axis=0)
    return g_pi, g_theta, g_rho


def draw_stationary(cfg: ScenarioConfig, rng: np.random.Generator, batch: int):
    """``batch`` independent stationary CSI draws as arrays ``(a, h1, h2)`` with a leading batch axis."""
    K, M = cfg.num_channels, cfg.num_sus
    a = rng.random((batch, K)) < cfg.activity.stationary_active
    g = np.sqrt(cfg.sp_stationary_var)[..., None] * rng.standard_normal((batch, K, M, 2))
    h1 = g[..., 0] ** 2 + g[..., 1] ** 2
    h2 = cfg.avg_gain_su * rng.standard_exponential((batch, K, M))
    return a, h1, h2


def offline_dual_calibrate(cfg: ScenarioConfig, mc_samples: int, iters: int,
                           step0: float | None = None, rng: np.random.Generator | None = None,
                           monitor: list | None = None) -> Multipliers:
    """Dual ascent with Monte-Carlo subgradients and stepsize ``step0 / sqrt(t)``.

    Each subgradient is divided by its constraint limit, so one stepsize fits
    watts, interference and bits alike, and clipped to [-1, 1] so the first
    iterations (all prices zero) cannot overshoot. The returned multipliers
    average the second half of the iterates. Fresh i.i.d. stationary CSI is drawn every iteration and allocations use
    perfect CSI of those draws. Returns the final multipliers, meant as a warm
    start for the stochastic tracker. ``monitor`` (a list) receives the
    subgradient triple of every iteration.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    step0 = cfg.calibrate_step if step0 is None else step0
    flags = cfg.flags
    mult = Multipliers.zeros(cfg.num_sus, cfg.num_channels)
    avg = Multipliers.zeros(cfg.num_sus, cfg.num_channels)
    counted = 0
    for t in range(1, iters + 1):
        g_pi, g_theta, g_rho = expected_subgradient(cfg, mult, draw_stationary(cfg, rng, mc_samples))
        if monitor is not None:
            monitor.append((g_pi, g_theta, g_rho))
        eta = step0 / np.sqrt(t)
        step = lambda v, g, scale: np.minimum(np.maximum(v + eta * np.clip(g / scale, -1.0, 1.0), 0.0),
                                              cfg.multiplier_clamp)
        mult.pi = step(mult.pi, g_pi, cfg.avg_power_budget)
        if flags.avg_interference:
            mult.theta = step(mult.theta, g_theta, cfg.max_interference)
        if flags.avg_capacity:
            mult.rho = step(mult.rho, g_rho, cfg.rate_target_value)
        if t > iters // 2:
            counted += 1
            for name in ("pi", "theta", "rho"):
                acc = getattr(avg, name)
                acc += (getattr(mult, name) - acc) / counted
    if counted:
        return avg
    return mult
