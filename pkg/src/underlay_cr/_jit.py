"""Compiled per-pair power search used by the slot loop.

Same algorithm as the vectorized grid route in ``allocator``: modified
waterfilling bound, log-spaced bracketing grid on d(phi)/dp, bisection on
every + to - sign change, best of {0, upper bound, local maxima}.
"""

import math

import numpy as np
from numba import njit

LN2 = math.log(2.0)
LOG2E = 1.0 / LN2


@njit(cache=True)
def _phi(p, beta, slope, reward, gamma, x2, w2, x1, w1):
    su = 0.0
    for j in range(x2.size):
        su += w2[j] * math.log1p(x2[j] * p)
    pu = 0.0
    if reward != 0.0:
        for j in range(x1.size):
            pu += w1[j] * math.log1p(gamma / (1.0 + x1[j] * p))
    return LOG2E * (beta * su + reward * pu) - slope * p


@njit(cache=True)
def _dphi(p, beta, slope, reward, gamma, x2, w2, x1, w1):
    su = 0.0
    for j in range(x2.size):
        su += w2[j] * x2[j] / (1.0 + x2[j] * p)
    pu = 0.0
    for j in range(x1.size):
        y = x1[j] * p
        pu += w1[j] * x1[j] * gamma / ((1.0 + y) * (1.0 + gamma + y))
    return LOG2E * (beta * su - reward * pu) - slope


@njit(cache=True)
def _wf_level(beta, slope, x2, w2, iters):
    if x2.size == 1:
        if x2[0] <= 0.0:
            return 0.0
        if slope <= 0.0:
            return np.inf
        den = slope * x2[0]
        if den <= 0.0:
            return np.inf
        return (beta * LOG2E * x2[0] - slope) / den
    if slope <= 0.0:
        return np.inf
    marg = 0.0
    for j in range(x2.size):
        marg += w2[j] * x2[j]
    if beta * LOG2E * marg <= slope:
        return 0.0
    lo, hi = 0.0, beta * LOG2E / slope
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        val = 0.0
        for j in range(x2.size):
            val += w2[j] * x2[j] / (1.0 + x2[j] * mid)
        if beta * LOG2E * val > slope:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@njit(cache=True)
def _search(b, s, r, g, ub, a2, v2, a1, v1, frac, iters):
    """Best power on [0, ub] and the number of derivative sign changes."""
    eps = 4.0 * np.finfo(np.float64).eps
    f0 = _phi(0.0, b, s, r, g, a2, v2, a1, v1)
    fu = _phi(ub, b, s, r, g, a2, v2, a1, v1)
    best_p, best_f = 0.0, f0
    if fu > f0:
        best_p, best_f = ub, fu
    changes = 0
    p_prev = 0.0
    d_prev = _dphi(0.0, b, s, r, g, a2, v2, a1, v1)
    for j in range(frac.size):
        pj = ub * frac[j]
        dj = _dphi(pj, b, s, r, g, a2, v2, a1, v1)
        if (d_prev > 0.0 and dj < 0.0) or (d_prev < 0.0 and dj > 0.0):
            changes += 1
        if d_prev > 0.0 and dj <= 0.0:
            lo, hi = p_prev, pj
            for _ in range(iters):
                mid = 0.5 * (lo + hi)
                if _dphi(mid, b, s, r, g, a2, v2, a1, v1) > 0.0:
                    lo = mid
                else:
                    hi = mid
                if hi - lo <= eps * hi:
                    break
            root = 0.5 * (lo + hi)
            fr = _phi(root, b, s, r, g, a2, v2, a1, v1)
            if fr > best_f:
                best_p, best_f = root, fr
        p_prev, d_prev = pj, dj
    return best_p, best_f, changes


@njit(cache=True)
def solve_pairs(beta, slope, reward, gamma, cap, x2, w2, x1, w1, frac, iters, group, prune):
    """Optimal power, indicator value and derivative sign-change count per pair.

    Pairs come in consecutive groups (the users of one channel). With
    ``prune`` set, a pair whose indicator bound cannot beat a value already
    attained in its group is not searched; it reports NaN power and -inf.
    """
    n = beta.size
    p_out = np.empty(n)
    phi_out = np.empty(n)
    changes = np.zeros(n, dtype=np.int64)
    ub = np.empty(n)
    bound = np.empty(n)
    for start in range(0, n, group):
        stop = min(start + group, n)
        floor = -np.inf
        for i in range(start, stop):
            a2, v2 = x2[i], w2[i]
            wf = _wf_level(beta[i], slope[i], a2, v2, iters)
            ub[i] = min(cap[i], max(wf, 0.0))
            # concave part at its maximizer plus the largest possible PU term
            conc = _phi(ub[i], beta[i], slope[i], 0.0, gamma[i], a2, v2, x1[i], w1[i])
            free = reward[i] * LOG2E * math.log1p(gamma[i])
            bound[i] = conc + free
            floor = max(floor, free)
            if ub[i] > 0.0:
                floor = max(floor, _phi(ub[i], beta[i], slope[i], reward[i], gamma[i], a2, v2, x1[i], w1[i]))
        for i in range(start, stop):
            b, s, r, g = beta[i], slope[i], reward[i], gamma[i]
            a2, v2, a1, v1 = x2[i], w2[i], x1[i], w1[i]
            if prune and bound[i] + 1e-9 * (1.0 + abs(bound[i])) < floor:
                p_out[i] = np.nan
                phi_out[i] = -np.inf
                continue
            e_h1 = 0.0
            for j in range(a1.size):
                e_h1 += v1[j] * a1[j]
            if r <= 0.0 or e_h1 <= 0.0 or ub[i] <= 0.0:
                p_out[i] = ub[i]
                phi_out[i] = _phi(ub[i], b, s, r, g, a2, v2, a1, v1)
                continue
            p_out[i], phi_out[i], changes[i] = _search(b, s, r, g, ub[i], a2, v2, a1, v1, frac, iters)
    return p_out, phi_out, changes
