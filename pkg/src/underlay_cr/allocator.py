"""Per-slot resource allocation: peak caps, link-quality indicator, power search, scheduling.

Everything is vectorized over (user, channel) pairs. A pair is described by
quadrature nodes of its SU-gain belief (``x2, w2``) and SU-to-PU belief
(``x1, w1``); perfect CSI is the single-node case.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .beliefs import BeliefState, expected_sp_gain
from .config import QuadratureSpec, ScenarioConfig, SchemeFlags
from .model import LOG2E, pu_rate

log = logging.getLogger(__name__)

BISECT_ITERS = 80
GRID_FLOOR = 1e-7  # smallest grid point, relative to the search upper bound


@dataclass
class Multipliers:
    """Dual variables: power prices ``pi`` (M,), interference prices ``theta`` (K,),
    PU-rate rewards ``rho`` (K,)."""

    pi: np.ndarray
    theta: np.ndarray
    rho: np.ndarray

    @classmethod
    def zeros(cls, num_sus: int, num_channels: int) -> "Multipliers":
        return cls(np.zeros(num_sus), np.zeros(num_channels), np.zeros(num_channels))

    def copy(self) -> "Multipliers":
        return Multipliers(self.pi.copy(), self.theta.copy(), self.rho.copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.pi, self.theta, self.rho])

    def validate(self):
        for name in ("pi", "theta", "rho"):
            v = getattr(self, name)
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise ValueError(f"multiplier {name} must be finite and nonnegative")


@dataclass
class Allocation:
    """Decisions for one slot.

    ``winner[k]`` is 0 for the virtual user, else the 1-based SU index;
    ``power[k]`` is the winner's power. ``user_power``/``phi`` hold every
    candidate's optimum and indicator value for diagnostics.
    """

    winner: np.ndarray
    power: np.ndarray
    user_power: np.ndarray
    phi: np.ndarray
    phi_virtual: np.ndarray
    cap: np.ndarray

    def winner_mask(self, num_sus: int) -> np.ndarray:
        """One-hot ``(K, M)`` scheduling matrix for the real users."""
        return self.winner[..., None] == np.arange(1, num_sus + 1)

    def served_power(self, num_sus: int) -> np.ndarray:
        """Power each SU spends in the slot, summed over channels."""
        mask = self.winner_mask(num_sus)
        return (mask * self.power[..., None]).sum(axis=tuple(range(mask.ndim - 1)))


@dataclass
class PairContext:
    """Flattened per-pair data for the scalar power problem."""

    beta: np.ndarray
    pi: np.ndarray
    theta: np.ndarray
    rho: np.ndarray
    q: np.ndarray
    gamma: np.ndarray
    cap: np.ndarray
    x2: np.ndarray
    w2: np.ndarray
    x1: np.ndarray
    w1: np.ndarray

    def __post_init__(self):
        self.e_h1 = (self.w1 * self.x1).sum(axis=-1)
        self.e_h2 = (self.w2 * self.x2).sum(axis=-1)
        # linear price and PU-rate weight of the indicator
        self.slope = self.pi + self.theta * self.q * self.e_h1
        self.reward = self.rho * self.q

    @classmethod
    def build(cls, beta, pi, theta, rho, q, gamma, cap, x2, w2, x1, w1) -> "PairContext":
        """Broadcast per-pair inputs; node arrays carry the node axis last."""
        x2, w2, x1, w1 = (np.asarray(a, dtype=float) for a in (x2, w2, x1, w1))
        shape = np.broadcast_shapes(np.shape(beta), np.shape(pi), np.shape(theta), np.shape(rho),
                                    np.shape(q), np.shape(gamma), np.shape(cap),
                                    x2.shape[:-1], x1.shape[:-1])
        flat = lambda a: np.broadcast_to(np.asarray(a, dtype=float), shape).reshape(-1)
        nodes = lambda a: np.broadcast_to(a, shape + a.shape[-1:]).reshape(-1, a.shape[-1])
        ctx = cls(flat(beta), flat(pi), flat(theta), flat(rho), flat(q), flat(gamma), flat(cap),
                  nodes(x2), nodes(w2), nodes(x1), nodes(w1))
        ctx.shape = shape
        return ctx

    def take(self, idx) -> "PairContext":
        sub = PairContext(self.beta[idx], self.pi[idx], self.theta[idx], self.rho[idx], self.q[idx],
                          self.gamma[idx], self.cap[idx], self.x2[idx], self.w2[idx],
                          self.x1[idx], self.w1[idx])
        sub.shape = sub.beta.shape
        return sub

    @property
    def exact(self) -> bool:
        return self.x2.shape[-1] == 1 and self.x1.shape[-1] == 1

    def phi(self, p):
        """Indicator value at power ``p`` (shape ``(P,)`` or ``(P, G)``)."""
        p = np.asarray(p, dtype=float)
        extra = p.ndim - 1
        ex = lambda a: a.reshape(a.shape[:1] + (1,) * extra + a.shape[1:])
        col = lambda a: a.reshape(a.shape + (1,) * extra)
        pp = p[..., None]
        su = (ex(self.w2) * np.log1p(ex(self.x2) * pp)).sum(axis=-1) * LOG2E
        pu = (ex(self.w1) * pu_rate(col(self.gamma)[..., None], ex(self.x1) * pp)).sum(axis=-1)
        return col(self.beta) * su - col(self.slope) * p + col(self.reward) * pu

    def dphi(self, p):
        p = np.asarray(p, dtype=float)
        extra = p.ndim - 1
        ex = lambda a: a.reshape(a.shape[:1] + (1,) * extra + a.shape[1:])
        col = lambda a: a.reshape(a.shape + (1,) * extra)
        pp = p[..., None]
        x2, x1 = ex(self.x2), ex(self.x1)
        g = col(self.gamma)[..., None]
        su = (ex(self.w2) * x2 / (1.0 + x2 * pp)).sum(axis=-1)
        pu = (ex(self.w1) * x1 * g / ((1.0 + x1 * pp) * (1.0 + g + x1 * pp))).sum(axis=-1)
        return LOG2E * (col(self.beta) * su - col(self.reward) * pu) - col(self.slope)

    def phi_virtual(self):
        return self.reward * pu_rate(self.gamma, 0.0)


# --------------------------------------------------------------------------
# scalar power problem


def waterfilling_level(ctx: PairContext) -> np.ndarray:
    """Unclipped maximizer of the concave part ``beta E[r2] - slope p`` (may be <= 0 or inf)."""
    beta, s = ctx.beta, ctx.slope
    if ctx.x2.shape[-1] == 1:
        h2 = ctx.x2[:, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            # (marginal rate at zero - price) / (price h2): exactly 0 when they balance
            sp = np.where(s > 0, s, 1.0)
            out = np.where(s > 0, (beta * LOG2E * h2 - sp) / (sp * h2), np.inf)
        return np.where(h2 > 0, out, -np.inf)
    # E[beta log2e x / (1 + x p)] = s, decreasing in p and below beta log2e / p
    out = np.full(s.shape, -np.inf)
    marg0 = beta * LOG2E * ctx.e_h2
    out[s <= 0] = np.inf
    solve = (s > 0) & (marg0 > s)
    if np.any(solve):
        sub = ctx.take(solve)
        lo = np.zeros(sub.slope.shape)
        hi = sub.beta * LOG2E / sub.slope
        for _ in range(BISECT_ITERS):
            mid = 0.5 * (lo + hi)
            val = sub.beta * LOG2E * (sub.w2 * sub.x2 / (1.0 + sub.x2 * mid[:, None])).sum(axis=-1)
            up = val > sub.slope
            lo = np.where(up, mid, lo)
            hi = np.where(up, hi, mid)
        out[solve] = 0.5 * (lo + hi)
    return out


def _cubic_coefficients(ctx: PairContext):
    """Coefficients (ascending) of the numerator of d(phi)/dp for point-mass beliefs."""
    u, v = ctx.x2[:, 0], ctx.x1[:, 0]
    b, s, R, g = ctx.beta * LOG2E, ctx.slope, ctx.reward * LOG2E, ctx.gamma
    c0 = b * u * (1 + g) - s * (1 + g) - R * v * g
    c1 = b * u * v * (2 + g) - s * (v * (2 + g) + u * (1 + g)) - R * v * g * u
    c2 = b * u * v * v - s * (v * v + u * v * (2 + g))
    c3 = -s * u * v * v
    return np.stack([c0, c1, c2, c3], axis=-1)


def _real_roots(coef: np.ndarray) -> np.ndarray:
    """Real roots of rows of ascending cubic coefficients; NaN-padded ``(n, 3)``."""
    n = coef.shape[0]
    out = np.full((n, 3), np.nan)
    scale = np.abs(coef).max(axis=-1)
    scale = np.where(scale > 0, scale, 1.0)
    c = coef / scale[:, None]
    deg3 = np.abs(c[:, 3]) > 1e-13
    if np.any(deg3):
        a = c[deg3, :3] / c[deg3, 3:4]
        comp = np.zeros((a.shape[0], 3, 3))
        comp[:, 0, :] = -a[:, ::-1]
        comp[:, 1, 0] = 1.0
        comp[:, 2, 1] = 1.0
        ev = np.linalg.eigvals(comp)
        real = np.abs(ev.imag) <= 1e-7 * (1.0 + np.abs(ev.real))
        out[deg3] = np.where(real, ev.real, np.nan)
    deg2 = ~deg3 & (np.abs(c[:, 2]) > 1e-13)
    if np.any(deg2):
        A, B, C = c[deg2, 2], c[deg2, 1], c[deg2, 0]
        disc = B * B - 4 * A * C
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        # numerically stable pair
        qv = -0.5 * (B + np.copysign(sq, B))
        r1 = qv / A
        with np.errstate(divide="ignore", invalid="ignore"):
            r2 = np.where(qv != 0, C / qv, np.nan)
        out[deg2, 0] = r1
        out[deg2, 1] = r2
    deg1 = ~deg3 & ~deg2 & (np.abs(c[:, 1]) > 1e-13)
    if np.any(deg1):
        out[deg1, 0] = -c[deg1, 0] / c[deg1, 1]
    return out


def _d2phi_exact(ctx: PairContext, p):
    u, v = ctx.x2[:, :1], ctx.x1[:, :1]
    g = ctx.gamma[:, None]
    B, C = 1 + v * p, 1 + g + v * p
    return LOG2E * (-ctx.beta[:, None] * u * u / (1 + u * p) ** 2
                    + ctx.reward[:, None] * g * v * v * (B + C) / (B * C) ** 2)


def _stationary_exact(ctx: PairContext, upper: np.ndarray) -> np.ndarray:
    """Interior stationary points (NaN padded, ``(P, 3)``) for point-mass beliefs."""
    roots = _real_roots(_cubic_coefficients(ctx))
    hi = upper[:, None]
    inside = (roots > 0) & (roots < hi)
    roots = np.where(inside, roots, np.nan)
    # Newton polish on the exact derivative, kept inside the interval
    for _ in range(3):
        safe = np.where(np.isnan(roots), 0.0, roots)
        d1 = ctx.dphi(safe)
        d2 = _d2phi_exact(ctx, safe)
        step = np.where(d2 != 0, d1 / np.where(d2 != 0, d2, 1.0), 0.0)
        cand = safe - step
        ok = (cand > 0) & (cand < hi)
        roots = np.where(np.isnan(roots), np.nan, np.where(ok, cand, safe))
    return roots


def _stationary_grid(ctx: PairContext, upper: np.ndarray, points: int):
    """Local maximizers inside (0, upper) from sign changes of d(phi)/dp on a log grid.

    Returns ``(rows, roots, changes)`` where ``changes`` counts every sign
    change of the derivative per pair.
    """
    frac = np.concatenate([[0.0], _grid_fractions(points)])
    grid = upper[:, None] * frac
    d = ctx.dphi(grid)
    sgn = np.sign(d)
    changes = (sgn[:, 1:] * sgn[:, :-1] < 0).sum(axis=1)
    # + to - transitions bracket local maxima; minima never beat the endpoints
    rows, cols = np.nonzero((d[:, :-1] > 0) & (d[:, 1:] <= 0))
    if rows.size == 0:
        return rows, np.zeros(0), changes
    sub = ctx.take(rows)
    lo = grid[rows, cols]
    hi = grid[rows, cols + 1]
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        pos = sub.dphi(mid) > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
        if np.all(hi - lo <= 4 * np.finfo(float).eps * np.maximum(hi, 1e-300)):
            break
    return rows, 0.5 * (lo + hi), changes


def optimize_power(ctx: PairContext, method: str = "auto", grid_points: int = 256,
                   prune: bool = False):
    """Global maximizer of the indicator over ``[0, cap]`` for every pair.

    Returns ``(p_opt, phi_opt)`` flattened over pairs. ``method`` is
    ``"cubic"`` (exact stationary points, point-mass beliefs only),
    ``"grid"`` (vectorized bracketing grid, any beliefs), ``"jit"`` (the
    compiled version of the grid route) or ``"auto"`` (= ``"jit"``).
    ``prune`` (jit only) skips pairs that provably lose the scheduling
    contest on their channel (last axis of ``ctx.shape``); they come back
    with NaN power and -inf indicator.
    """
    if method == "auto":
        method = "jit"
    if method not in ("cubic", "grid", "jit"):
        raise ValueError(f"unknown power search method {method!r}")
    if method == "cubic" and not ctx.exact:
        raise ValueError("cubic stationary points need point-mass beliefs")
    if np.any(ctx.cap < 0):
        raise ValueError("power cap must be >= 0")
    if method == "jit":
        return _optimize_jit(ctx, grid_points, prune)
    wf = waterfilling_level(ctx)
    upper = np.minimum(ctx.cap, np.maximum(wf, 0.0))
    if np.any(np.isinf(upper)):
        raise ValueError("unbounded power problem: zero price and infinite cap")
    p = upper.copy()  # concave case: clipped waterfilling is exact
    nonconcave = (ctx.reward > 0) & (ctx.e_h1 > 0) & (upper > 0)
    if np.any(nonconcave):
        idx = np.nonzero(nonconcave)[0]
        sub = ctx.take(idx)
        ub = upper[idx]
        base = np.stack([np.zeros_like(ub), ub], axis=1)
        if method == "cubic":
            roots = _stationary_exact(sub, ub)
            cand = np.concatenate([base, roots], axis=1)
            vals = sub.phi(np.where(np.isnan(cand), 0.0, cand))
            vals = np.where(np.isnan(cand), -np.inf, vals)
            best = np.argmax(vals, axis=1)
            p[idx] = cand[np.arange(idx.size), best]
        else:
            rows, roots, changes = _stationary_grid(sub, ub, grid_points)
            if sub.exact and np.any(changes > 3):
                log.error("indicator derivative changed sign %d times on a perfect-CSI pair",
                          int(changes.max()))
            vals = sub.phi(base)
            best_val = vals.max(axis=1)
            best_p = np.where(vals[:, 1] > vals[:, 0], ub, 0.0)
            if rows.size:
                rv = sub.take(rows).phi(roots)
                order = np.lexsort((-rv, rows))
                first = np.ones(order.size, dtype=bool)
                first[1:] = rows[order][1:] != rows[order][:-1]
                r_rows, r_best = rows[order][first], order[first]
                better = rv[r_best] > best_val[r_rows]
                best_p[r_rows[better]] = roots[r_best[better]]
            p[idx] = best_p
    return p, ctx.phi(p)


def _grid_fractions(points: int) -> np.ndarray:
    return np.geomspace(GRID_FLOOR, 1.0, points)


def _optimize_jit(ctx: PairContext, grid_points: int, prune: bool = False):
    from ._jit import solve_pairs

    if np.any(np.isinf(ctx.cap) & (ctx.slope <= 0)):
        raise ValueError("unbounded power problem: zero price and infinite cap")
    c = np.ascontiguousarray
    p, phi, changes = solve_pairs(c(ctx.beta), c(ctx.slope), c(ctx.reward), c(ctx.gamma), c(ctx.cap),
                                  c(ctx.x2), c(ctx.w2), c(ctx.x1), c(ctx.w1),
                                  _grid_fractions(grid_points), BISECT_ITERS,
                                  ctx.shape[-1] if ctx.shape else 1, prune)
    if ctx.exact and np.any(changes > 3):
        log.error("indicator derivative changed sign %d times on a perfect-CSI pair", int(changes.max()))
    return p, phi


# --------------------------------------------------------------------------
# caps and scheduling


def rate_cap(gamma, rate_target, h1):
    """Largest power keeping ``pu_rate(gamma, h1 p) >= rate_target`` for an exact gain."""
    gamma, rate_target, h1 = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (gamma, rate_target, h1)))
    with np.errstate(divide="ignore", invalid="ignore"):
        margin = gamma / np.expm1(rate_target * np.log(2.0)) - 1.0
        y = np.where(h1 > 0, np.maximum(margin, 0.0) / h1, np.inf)
    return np.where(rate_target <= 0, np.inf, y)


def expected_rate_cap(gamma, rate_target, x1, w1, pmax):
    """Largest ``p <= pmax`` with ``E[pu_rate(gamma, h1 p)] >= rate_target`` (bisection)."""
    gamma, rate_target, pmax = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (gamma, rate_target, pmax)))
    f = lambda p: (w1 * pu_rate(gamma[..., None], x1 * p[..., None])).sum(axis=-1)
    ok_at_max = f(pmax) >= rate_target
    lo, hi = np.zeros(pmax.shape), pmax.copy()
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        good = f(mid) >= rate_target
        lo = np.where(good, mid, lo)
        hi = np.where(good, hi, mid)
    return np.where(ok_at_max, pmax, lo)


def peak_power(q, sp_nodes, flags: SchemeFlags, max_interference, rate_target, gamma, pmax):
    """Per-link peak power from the short-term constraints active under ``flags``.

    ``q`` is Pr{PU active} per channel, ``sp_nodes`` the ``(x1, w1)``
    quadrature of the SU-to-PU gain belief. Channels believed idle (``q == 0``)
    keep the amplifier limit.
    """
    x1, w1 = sp_nodes
    pmax = np.asarray(pmax, dtype=float)
    cap = pmax.copy()
    busy = (np.asarray(q) > 0)[..., None]
    if flags.inst_interference:
        e_h1 = (w1 * x1).sum(axis=-1)
        with np.errstate(divide="ignore"):
            x_cap = np.where(e_h1 > 0, np.asarray(max_interference)[..., None] / e_h1, np.inf)
        cap = np.where(busy, np.minimum(cap, x_cap), cap)
    if flags.inst_capacity:
        rt = np.asarray(rate_target, dtype=float)
        g = np.asarray(gamma, dtype=float)
        if np.any(rt > pu_rate(g, 0.0) + 1e-12):
            log.warning("short-term PU rate demand exceeds the interference-free rate; cap set to 0")
        if x1.shape[-1] == 1:
            y_cap = rate_cap(g[..., None], rt[..., None], x1[..., 0])
        else:
            y_cap = expected_rate_cap(g[..., None], rt[..., None], x1, w1, pmax)
        y_cap = np.where((rt > pu_rate(g, 0.0) + 1e-12)[..., None], 0.0, y_cap)
        cap = np.where(busy, np.minimum(cap, y_cap), cap)
    return cap


def schedule(phi, power, phi_virtual):
    """Winner per channel: 0 (virtual user) or the 1-based SU with the largest indicator.

    Users with zero power never win; the virtual user also wins ties with the
    best real user. Remaining ties go to the lowest index.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.shape[-1] == 0:
        return np.zeros(phi.shape[:-1], dtype=np.int64)
    masked = np.where((np.asarray(power) > 0) & ~np.isnan(phi), phi, -np.inf)
    best = np.argmax(masked, axis=-1)
    best_val = np.take_along_axis(masked, best[..., None], axis=-1)[..., 0]
    return np.where(best_val > phi_virtual, best + 1, 0)


def lqi(p, ctx: PairContext):
    """Link-quality indicator of every pair at power ``p``."""
    return ctx.phi(p)


def effective_multipliers(mult: Multipliers, flags: SchemeFlags):
    theta = mult.theta if flags.avg_interference else np.zeros_like(mult.theta)
    rho = mult.rho if flags.avg_capacity else np.zeros_like(mult.rho)
    return mult.pi, theta, rho


def allocate(beliefs: BeliefState, mult: Multipliers, cfg: ScenarioConfig,
             spec: QuadratureSpec | None = None, method: str = "auto",
             su_nodes=None, sp_nodes=None, prune: bool = False) -> Allocation:
    """Optimal allocation for one slot given the beliefs and the multipliers.

    Channels are independent; arrays may carry extra leading axes (batches)
    in front of the channel axis.
    """
    spec = spec or cfg.quadrature
    flags = cfg.flags
    if su_nodes is None:
        su_nodes = beliefs.su_belief.nodes(spec)
    if sp_nodes is None:
        sp_nodes = beliefs.sp_belief.nodes(spec)
    x2, w2 = su_nodes
    x1, w1 = sp_nodes
    q = np.asarray(beliefs.activity, dtype=float)
    pi, theta, rho = effective_multipliers(mult, flags)
    cap = peak_power(q, sp_nodes, flags, cfg.max_interference, cfg.rate_target_value,
                     cfg.pu_snr, cfg.amplifier_cap)
    ctx = PairContext.build(cfg.priorities, pi, theta[..., None], rho[..., None], q[..., None],
                            cfg.pu_snr[..., None], cap, x2, w2, x1, w1)
    p, phi = optimize_power(ctx, method=method, grid_points=spec.grid_points, prune=prune)
    shape = ctx.shape
    p, phi = p.reshape(shape), phi.reshape(shape)
    phi0 = rho * q * pu_rate(cfg.pu_snr, 0.0)
    winner = schedule(phi, p, phi0)
    idx = np.clip(winner - 1, 0, None)[..., None]
    power = np.where(winner > 0, np.take_along_axis(p, idx, axis=-1)[..., 0], 0.0)
    return Allocation(winner, power, p, phi, phi0, cap)


allocate_slot = allocate
