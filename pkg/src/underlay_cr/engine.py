"""Slot loop, running sample averages and feasibility reports.

Decisions and dual updates use the beliefs; every reported metric is
computed from the ground-truth CSI.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from contextlib import ExitStack
from dataclasses import dataclass, field

import numpy as np

from .allocator import Allocation, Multipliers, allocate
from .beliefs import update_beliefs, write_belief_trace
from .config import ScenarioConfig
from .duals import DualState, offline_dual_calibrate, update_all_with_belief
from .model import CsiTrue, initial_csi, pu_rate, sense, step_channel, su_rate

log = logging.getLogger(__name__)


@dataclass
class Metrics:
    """Running sums behind the sample averages.

    SU quantities are normalized by the number of slots, PU quantities by the
    number of slots in which the PU was active.
    """

    num_sus: int
    num_channels: int
    pu_rate_free: np.ndarray
    slots: int = 0
    c2_sum: float = 0.0
    p2_sum: np.ndarray = None
    p1_sum: np.ndarray = None
    r1_sum: np.ndarray = None
    active: np.ndarray = None

    def __post_init__(self):
        M, K = self.num_sus, self.num_channels
        self.p2_sum = np.zeros(M) if self.p2_sum is None else self.p2_sum
        self.p1_sum = np.zeros(K) if self.p1_sum is None else self.p1_sum
        self.r1_sum = np.zeros(K) if self.r1_sum is None else self.r1_sum
        self.active = np.zeros(K, dtype=np.int64) if self.active is None else self.active

    @classmethod
    def for_config(cls, cfg: ScenarioConfig) -> "Metrics":
        return cls(cfg.num_sus, cfg.num_channels, np.asarray(cfg.pu_rate_free))

    @property
    def c2_avg(self) -> float:
        return self.c2_sum / self.slots if self.slots else float("nan")

    @property
    def p2_avg(self) -> np.ndarray:
        return self.p2_sum / self.slots if self.slots else np.full(self.num_sus, np.nan)

    def _per_active(self, total):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.active > 0, total / np.maximum(self.active, 1), np.nan)

    @property
    def p1_avg(self) -> np.ndarray:
        """Average interference per channel over active slots (NaN while undefined)."""
        return self._per_active(self.p1_sum)

    @property
    def r1_avg(self) -> np.ndarray:
        return self._per_active(self.r1_sum)

    @property
    def eps1(self) -> np.ndarray:
        """Realized capacity-loss fraction per channel."""
        return 1.0 - self.r1_avg / self.pu_rate_free

    @property
    def eps1_avg(self) -> float:
        e = self.eps1
        e = e[np.isfinite(e)]
        return float(e.mean()) if e.size else float("nan")

    @property
    def p1_mean(self) -> float:
        v = self.p1_avg
        v = v[np.isfinite(v)]
        return float(v.mean()) if v.size else float("nan")

    def minus(self, other: "Metrics") -> "Metrics":
        """Sums accumulated after the snapshot ``other``."""
        return Metrics(self.num_sus, self.num_channels, self.pu_rate_free, self.slots - other.slots,
                       self.c2_sum - other.c2_sum, self.p2_sum - other.p2_sum,
                       self.p1_sum - other.p1_sum, self.r1_sum - other.r1_sum,
                       self.active - other.active)

    def copy(self) -> "Metrics":
        return Metrics(self.num_sus, self.num_channels, self.pu_rate_free, self.slots, self.c2_sum,
                       self.p2_sum.copy(), self.p1_sum.copy(), self.r1_sum.copy(), self.active.copy())

    def as_dict(self) -> dict:
        return {"slots": self.slots, "c2_avg": self.c2_avg, "p2_avg": self.p2_avg.tolist(),
                "p1_avg": self.p1_avg.tolist(), "p1_mean": self.p1_mean,
                "r1_avg": self.r1_avg.tolist(), "eps1": self.eps1.tolist(), "eps1_avg": self.eps1_avg,
                "active_slots": self.active.tolist()}


def realized(true: CsiTrue, alloc: Allocation, cfg: ScenarioConfig):
    """Ground-truth per-slot quantities: weighted SU rate, served power per SU,
    interference and PU rate per channel."""
    M = cfg.num_sus
    idx = np.clip(alloc.winner - 1, 0, None)[:, None]
    on = alloc.winner > 0
    h2 = np.take_along_axis(true.su_gain, idx, axis=1)[:, 0]
    h1 = np.take_along_axis(true.sp_gain, idx, axis=1)[:, 0]
    beta = np.where(on, cfg.priorities[idx[:, 0]], 0.0)
    c2 = float((beta * su_rate(h2, alloc.power)).sum())
    served = np.bincount(alloc.winner, weights=alloc.power, minlength=M + 1)[1:]
    interference = np.where(on, h1 * alloc.power, 0.0)
    rate = pu_rate(cfg.pu_snr, interference)
    return c2, served, interference, rate


def update_metrics(metrics: Metrics, true: CsiTrue, alloc: Allocation, cfg: ScenarioConfig) -> Metrics:
    """Add one slot to the running sums (in place); returns ``metrics``."""
    c2, served, interference, rate = realized(true, alloc, cfg)
    a = true.activity
    metrics.slots += 1
    metrics.c2_sum += c2
    metrics.p2_sum += served
    metrics.p1_sum += np.where(a, interference, 0.0)
    metrics.r1_sum += np.where(a, rate, 0.0)
    metrics.active += a
    return metrics


# --------------------------------------------------------------------------
# feasibility


def feasibility_report(metrics: Metrics, cfg: ScenarioConfig) -> dict:
    """Slack (limit - realized) of every long-term quantity, with violation flags.

    Power is judged per SU; interference and capacity loss on the average
    across channels (the plotted quantities), with per-channel values listed
    for reference. ``relevant`` marks the constraints the scheme enforces in
    some form; the power budget is always relevant.
    """
    tol = cfg.tolerances
    flags = cfg.flags
    rows = []
    p2 = metrics.p2_avg
    for m in range(cfg.num_sus):
        limit = float(cfg.avg_power_budget[m])
        rows.append({"constraint": "power", "index": m + 1, "limit": limit, "realized": float(p2[m]),
                     "slack": limit - float(p2[m]), "relevant": True,
                     "violated": bool(p2[m] > limit * (1.0 + tol.power_rel))})
    p1 = metrics.p1_avg
    limit = float(np.mean(cfg.max_interference))
    rows.append({"constraint": "interference", "index": 0, "limit": limit, "realized": metrics.p1_mean,
                 "slack": limit - metrics.p1_mean, "relevant": flags.checks_interference or cfg.scheme == "None",
                 "violated": bool(metrics.p1_mean > limit * (1.0 + tol.interference_rel))})
    for k in range(cfg.num_channels):
        lim = float(cfg.max_interference[k])
        rows.append({"constraint": "interference_channel", "index": k + 1, "limit": lim,
                     "realized": float(p1[k]), "slack": lim - float(p1[k]), "relevant": False,
                     "violated": bool(p1[k] > lim * (1.0 + tol.interference_rel))})
    eps = metrics.eps1
    limit = float(np.mean(cfg.max_capacity_loss))
    rows.append({"constraint": "capacity_loss", "index": 0, "limit": limit, "realized": metrics.eps1_avg,
                 "slack": limit - metrics.eps1_avg, "relevant": flags.checks_capacity or cfg.scheme == "None",
                 "violated": bool(metrics.eps1_avg > limit + tol.capacity_loss_abs)})
    for k in range(cfg.num_channels):
        lim = float(cfg.max_capacity_loss[k])
        rows.append({"constraint": "capacity_loss_channel", "index": k + 1, "limit": lim,
                     "realized": float(eps[k]), "slack": lim - float(eps[k]), "relevant": False,
                     "violated": bool(eps[k] > lim + tol.capacity_loss_abs)})
    feasible = not any(r["violated"] for r in rows if r["relevant"])
    return {"scheme": cfg.scheme, "csi_variant": cfg.csi_variant, "slots": metrics.slots,
            "feasible": feasible, "constraints": rows}


# --------------------------------------------------------------------------
# trace


def trace_columns(cfg: ScenarioConfig) -> list[str]:
    M, K = cfg.num_sus, cfg.num_channels
    cols = ["slot", "c2_avg"]
    cols += [f"p2_avg_{m}" for m in range(1, M + 1)]
    cols += [f"p1_avg_{k}" for k in range(1, K + 1)]
    cols += [f"r1_avg_{k}" for k in range(1, K + 1)]
    cols += ["eps1_avg"]
    cols += [f"pi_{m}" for m in range(1, M + 1)]
    cols += [f"theta_{k}" for k in range(1, K + 1)]
    cols += [f"rho_{k}" for k in range(1, K + 1)]
    return cols


def trace_row(slot: int, metrics: Metrics, mult: Multipliers) -> np.ndarray:
    return np.concatenate([[slot, metrics.c2_avg], metrics.p2_avg, metrics.p1_avg, metrics.r1_avg,
                           [metrics.eps1_avg], mult.pi, mult.theta, mult.rho])


@dataclass
class RunResult:
    cfg: ScenarioConfig
    metrics: Metrics  # whole horizon
    post: Metrics  # after burn-in
    duals: DualState
    columns: list
    series: np.ndarray  # recorded trace rows
    mult_avg: Multipliers  # time average of the multipliers after burn-in
    warm_start: Multipliers | None = None
    elapsed: float = 0.0
    stationary_points_max: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def report(self) -> dict:
        return feasibility_report(self.post, self.cfg)

    def summary(self) -> dict:
        cfg = self.cfg
        rep = self.report
        return {
            "scheme": cfg.scheme, "csi_variant": cfg.csi_variant, "seed": cfg.seed,
            "horizon": cfg.horizon, "burn_in": cfg.burn_in, "rate_target": cfg.rate_target,
            "step_schedule": cfg.step_schedule,
            "steps": {"pi": cfg.step_pi, "theta": cfg.step_theta, "rho": cfg.step_rho},
            "c2_avg": self.post.c2_avg, "p2_avg": self.post.p2_avg.tolist(),
            "p1_avg": self.post.p1_mean, "eps1_avg": self.post.eps1_avg,
            "post_burn_in": self.post.as_dict(), "whole_horizon": self.metrics.as_dict(),
            "multipliers": {"pi": self.duals.mult.pi.tolist(), "theta": self.duals.mult.theta.tolist(),
                            "rho": self.duals.mult.rho.tolist()},
            "clamp_hits": self.duals.clamp_hits,
            "feasible": rep["feasible"], "constraints": rep["constraints"],
            "elapsed_s": self.elapsed,
        }


def write_trace_csv(path, columns, series) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in series:
            w.writerow([int(row[0])] + [f"{v:.10g}" for v in row[1:]])


def write_summary(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, allow_nan=True)
        fh.write("\n")


def run(cfg: ScenarioConfig, *, trace_every: int = 0, warm_start: Multipliers | None = None,
        belief_trace=None, alloc_trace=None, progress=None) -> RunResult:
    """Simulate ``cfg.horizon`` slots.

    ``trace_every`` > 0 records a trace row every that many slots (and at the
    last slot). ``belief_trace`` / ``alloc_trace`` are optional paths for the
    line-delimited belief dump and the per-pair allocation dump.
    ``progress(slot)`` is called every 1000 slots.
    """
    t0 = time.perf_counter()
    seq = np.random.SeedSequence(cfg.seed)
    ch_seq, sense_seq, cal_seq = seq.spawn(3)
    rng_ch, rng_sense = np.random.default_rng(ch_seq), np.random.default_rng(sense_seq)
    if warm_start is None and cfg.calibrate_samples > 0:
        warm_start = offline_dual_calibrate(cfg, cfg.calibrate_samples, cfg.calibrate_iters,
                                            rng=np.random.default_rng(cal_seq))
    duals = DualState.from_config(cfg, warm_start)
    metrics = Metrics.for_config(cfg)
    snapshot = metrics.copy()
    mult_sum = Multipliers.zeros(cfg.num_sus, cfg.num_channels)
    spec = cfg.quadrature
    burn = cfg.burn_in
    rows = []
    columns = trace_columns(cfg)

    with ExitStack() as stack:
        bfh = stack.enter_context(open(belief_trace, "w")) if belief_trace else None
        afh = stack.enter_context(open(alloc_trace, "w", newline="")) if alloc_trace else None
        aw = None
        if afh is not None:
            aw = csv.writer(afh)
            aw.writerow(["slot", "k", "m", "phi", "power", "cap", "winner"])
        true = obs = beliefs = None
        for n in range(cfg.horizon):
            true = initial_csi(cfg, rng_ch) if n == 0 else step_channel(true, cfg, rng_ch)
            obs = sense(true, cfg, rng_sense, obs)
            beliefs = update_beliefs(beliefs, obs, cfg, true)
            su_nodes = beliefs.su_belief.nodes(spec)
            sp_nodes = beliefs.sp_belief.nodes(spec)
            # losers are not searched unless the per-pair dump needs them
            alloc = allocate(beliefs, duals.mult, cfg, spec, su_nodes=su_nodes, sp_nodes=sp_nodes,
                             prune=aw is None)
            if bfh is not None:
                write_belief_trace(beliefs, bfh)
            if aw is not None:
                for k in range(cfg.num_channels):
                    aw.writerow([n, k + 1, 0, f"{alloc.phi_virtual[k]:.10g}", 0, "", int(alloc.winner[k] == 0)])
                    for m in range(cfg.num_sus):
                        aw.writerow([n, k + 1, m + 1, f"{alloc.phi[k, m]:.10g}", f"{alloc.user_power[k, m]:.10g}",
                                     f"{alloc.cap[k, m]:.10g}", int(alloc.winner[k] == m + 1)])
            if n == burn:
                snapshot = metrics.copy()
            update_metrics(metrics, true, alloc, cfg)
            update_all_with_belief(duals, beliefs, alloc, cfg, sp_nodes)
            if n >= burn:
                mult_sum.pi += duals.mult.pi
                mult_sum.theta += duals.mult.theta
                mult_sum.rho += duals.mult.rho
            if trace_every and ((n + 1) % trace_every == 0 or n + 1 == cfg.horizon):
                rows.append(trace_row(n, metrics, duals.mult))
            if progress is not None and (n + 1) % 1000 == 0:
                progress(n + 1)
    if burn == 0:
        snapshot = Metrics.for_config(cfg)
    post = metrics.minus(snapshot)
    count = max(cfg.horizon - burn, 1)
    mult_avg = Multipliers(mult_sum.pi / count, mult_sum.theta / count, mult_sum.rho / count)
    series = np.array(rows) if rows else np.zeros((0, len(columns)))
    return RunResult(cfg, metrics, post, duals, columns, series, mult_avg, warm_start,
                     time.perf_counter() - t0)
