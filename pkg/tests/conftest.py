import functools

import numpy as np
import pytest

from underlay_cr.config import DetectorConfig, QuantizerConfig, SensingConfig, reference_defaults
from underlay_cr.engine import run

SEEDS = (1, 2, 3, 4, 5)


@functools.lru_cache(maxsize=None)
def cached_run(scheme="APC", seed=1, variant="optimal", sensing=None, **extra):
    """Full-horizon run of the reference scenario; shared by every test in the session."""
    kw = dict(extra)
    if sensing is not None:
        kw["sensing"] = sensing
    cfg = reference_defaults(scheme=scheme, seed=seed, csi_variant=variant, **kw)
    return run(cfg)


def quantized(levels):
    return SensingConfig(quantizer=QuantizerConfig(levels=levels))


def detector(p_fa, p_md, period):
    return SensingConfig(detector=DetectorConfig(p_fa=p_fa, p_md=p_md, period=period))


def mean_stderr(values):
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def acceptance_line(number, ok, detail):
    """Print (and keep for the terminal summary) one verdict line per criterion."""
    line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
