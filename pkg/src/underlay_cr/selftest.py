"""Independent oracle checks of the numerical kernels.

Each check returns ``(ok, detail)``. ``run_all`` prints one line per check.
"""

from __future__ import annotations

import time

import numpy as np
from scipy.optimize import linprog
from scipy.stats import ncx2

from . import allocator
from .beliefs import GaussianLowpass, TruncatedExponential, expect_over_belief, kalman_correct
from .config import QuadratureSpec
from .model import LOG2E, pu_rate, pu_rate_dx, su_rate, su_rate_dp


def random_pair_params(rng: np.random.Generator, n: int) -> dict:
    """Perfect-CSI instances with all four indicator terms present."""
    u = lambda lo, hi: rng.uniform(lo, hi, n)
    logu = lambda lo, hi: np.exp(rng.uniform(np.log(lo), np.log(hi), n))
    return dict(beta=u(0.5, 2.0), pi=u(0.0, 3.0), theta=logu(0.01, 10.0), rho=logu(0.01, 20.0),
                q=np.ones(n), gamma=logu(1.0, 100.0), cap=logu(0.1, 10.0),
                x2=logu(0.01, 20.0)[:, None], w2=np.ones((n, 1)),
                x1=logu(0.01, 10.0)[:, None], w1=np.ones((n, 1)))


def random_pairs(rng: np.random.Generator, n: int, **fixed) -> allocator.PairContext:
    params = random_pair_params(rng, n)
    params.update(fixed)
    return allocator.PairContext.build(**params)


def check_power_oracle(n=1000, grid=100_000, seed=1):
    """Optimizer value never below the best of a dense uniform grid on [0, cap]."""
    rng = np.random.default_rng(seed)
    ctx = random_pairs(rng, n)
    p, phi = allocator.optimize_power(ctx)
    worst = -np.inf
    frac = np.linspace(0.0, 1.0, grid)
    for lo in range(0, n, 50):
        sub = ctx.take(slice(lo, lo + 50))
        best = sub.phi(sub.cap[:, None] * frac).max(axis=1)
        worst = max(worst, float((best - phi[lo:lo + 50]).max()))
    inside = bool(np.all((p >= 0) & (p <= ctx.cap)))
    return worst <= 1e-8 and inside, f"{n} instances, worst grid excess {worst:.2e}"


def check_schedule_oracle(n=1000, seed=2):
    """Winner agrees with the LP over the relaxed simplex (virtual user wins ties)."""
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        # shared channel: one PU SNR and reward for all users
        ctx = random_pairs(rng, 3, gamma=rng.uniform(1, 100), rho=rng.uniform(0, 20),
                           theta=rng.uniform(0, 10))
        p, phi = allocator.optimize_power(ctx)
        phi0 = float(ctx.phi_virtual()[0])
        winner = int(allocator.schedule(phi, p, phi0))
        vals = np.concatenate([[phi0], phi])
        res = linprog(-vals, A_eq=np.ones((1, 4)), b_eq=[1.0], bounds=[(0, 1)] * 4, method="highs")
        lp_val = -res.fun
        if abs(vals[winner] - lp_val) > 1e-9 * (1 + abs(lp_val)):
            bad += 1
            continue
        order = np.sort(vals)
        if order[-1] - order[-2] > 1e-9 and winner != int(np.argmax(vals)):
            bad += 1
        if winner > 0 and p[winner - 1] <= 0:
            bad += 1
    return bad == 0, f"{n} instances, {bad} disagreements"


def check_waterfilling(n=1000, seed=3):
    """With zero PU reward the optimum is the clipped closed form."""
    rng = np.random.default_rng(seed)
    ctx = random_pairs(rng, n, rho=0.0)
    p, _ = allocator.optimize_power(ctx)
    h2 = ctx.x2[:, 0]
    closed = np.clip(ctx.beta * LOG2E / ctx.slope - 1.0 / h2, 0.0, ctx.cap)
    err = float(np.abs(p - closed).max())
    return err <= 1e-12, f"max |p - closed form| = {err:.1e}"


def _gauss_kl_grid(mu_hat, var_hat, meas, nu, mu, var, points=20001):
    """KL(grid posterior || analytic posterior) for one real component."""
    sd = np.sqrt(var)
    x = np.linspace(mu - 12 * sd, mu + 12 * sd, points)
    dx = x[1] - x[0]
    log_post = -0.5 * (x - mu_hat) ** 2 / var_hat - 0.5 * (meas - x) ** 2 / nu
    log_post -= log_post.max()
    post = np.exp(log_post)
    post /= post.sum() * dx
    analytic = np.exp(-0.5 * (x - mu) ** 2 / var) / np.sqrt(2 * np.pi * var)
    mask = post > 0
    return float((post[mask] * np.log(post[mask] / analytic[mask])).sum() * dx)


def check_kalman(n=100, seed=4):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        mu_hat = rng.normal(0, 1, 2)
        var_hat = rng.uniform(0.01, 1.0)
        nu = rng.uniform(0.01, 1.0)
        meas = mu_hat + rng.normal(0, np.sqrt(var_hat + nu), 2)
        mu, var = kalman_correct(mu_hat, var_hat, meas, nu)
        kl = sum(_gauss_kl_grid(mu_hat[i], var_hat, meas[i], nu, mu[i], float(var)) for i in range(2))
        worst = max(worst, kl)
    return worst <= 1e-6, f"{n} cases, worst KL {worst:.1e}"


def acceptance_functions(gamma=10.0, p=2.0):
    return {"identity": lambda h: h,
            "su_rate": lambda h: su_rate(h, p),
            "pu_rate": lambda h: pu_rate(gamma, h * p)}


def check_quadrature_mc(samples=1_000_000, seed=5):
    """Belief expectations against Monte Carlo on the acceptance function set."""
    rng = np.random.default_rng(seed)
    spec = QuadratureSpec()
    worst = 0.0
    # Gaussian low-pass belief: |g|^2 is scaled noncentral chi-square(2)
    mean, var = np.array([1.0, 0.0]), 0.25
    gl = GaussianLowpass(mean, np.array(var))
    draws = var * ncx2.rvs(2, (mean ** 2).sum() / var, size=samples, random_state=rng)
    # truncated exponential: tail region and a finite region
    te_tail = TruncatedExponential(np.array(0.7), np.array(np.inf), np.array(2.0))
    tail_draws = 0.7 + 2.0 * rng.standard_exponential(samples)
    lo, hi, m = 0.3, 1.4, 2.0
    u = rng.uniform(-np.expm1(-lo / m), -np.expm1(-hi / m), samples)
    te_fin = TruncatedExponential(np.array(lo), np.array(hi), np.array(m))
    fin_draws = -m * np.log1p(-u)
    for belief, x in ((gl, draws), (te_tail, tail_draws), (te_fin, fin_draws)):
        for f in acceptance_functions().values():
            q = float(expect_over_belief(f, belief, spec))
            mc = float(f(x).mean())
            worst = max(worst, abs(q - mc) / abs(mc))
    return worst <= 5e-3, f"{samples} samples, worst relative gap {worst:.2e}"


def check_rate_derivatives(seed=6):
    rng = np.random.default_rng(seed)
    h, p, g, x = (rng.uniform(0.1, 10, 200) for _ in range(4))
    step = 1e-6
    fd_su = (su_rate(h, p + step) - su_rate(h, p - step)) / (2 * step)
    fd_pu = (pu_rate(g, x + step) - pu_rate(g, x - step)) / (2 * step)
    err = max(float(np.max(np.abs(fd_su / su_rate_dp(h, p) - 1))),
              float(np.max(np.abs(fd_pu / pu_rate_dx(g, x) - 1))))
    return err <= 1e-6, f"worst relative error {err:.1e}"


def suites(quick: bool = False):
    if quick:
        return [("power search vs dense grid", lambda: check_power_oracle(n=200, grid=20_000)),
                ("scheduling vs LP", lambda: check_schedule_oracle(n=200)),
                ("waterfilling closed form", lambda: check_waterfilling(n=200)),
                ("Kalman vs grid Bayes", lambda: check_kalman(n=20)),
                ("quadrature vs Monte Carlo", lambda: check_quadrature_mc(samples=200_000)),
                ("rate derivatives vs finite differences", check_rate_derivatives)]
    return [("power search vs dense grid", check_power_oracle),
            ("scheduling vs LP", check_schedule_oracle),
            ("waterfilling closed form", check_waterfilling),
            ("Kalman vs grid Bayes", check_kalman),
            ("quadrature vs Monte Carlo", check_quadrature_mc),
            ("rate derivatives vs finite differences", check_rate_derivatives)]


def run_all(quick: bool = False, out=print) -> bool:
    ok_all = True
    for name, fn in suites(quick):
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing oracle is a failure, not an abort
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        ok_all &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail} ({time.perf_counter() - t0:.1f}s)")
    return ok_all
