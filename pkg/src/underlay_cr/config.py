"""Scenario configuration: dataclasses, validation and the INI-style file format.

All quantities are linear internally. Keys ending in ``_db`` are converted
once, here, when a file is read.
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SCHEMES = ("None", "AP", "AC", "APC", "IP", "IC", "IPC")
CSI_VARIANTS = ("optimal", "i", "ii", "iii")
RATE_TARGETS = ("conditional", "unconditional")
STEP_SCHEDULES = ("constant", "diminishing")

# Which multipliers are tracked and which short-term caps are applied.
#            long-term interference, long-term capacity, short-term interference, short-term capacity
SCHEME_TABLE = {
    "None": (False, False, False, False),
    "APC": (True, True, False, False),
    "AC": (False, True, False, False),
    "AP": (True, False, False, False),
    "IP": (False, False, True, False),
    "IC": (False, False, False, True),
    "IPC": (False, False, True, True),
}


class ConfigError(ValueError):
    """Invalid or inconsistent scenario description."""


def db_to_linear(x):
    return 10.0 ** (np.asarray(x, dtype=float) / 10.0)


@dataclass(frozen=True)
class SchemeFlags:
    avg_interference: bool
    avg_capacity: bool
    inst_interference: bool
    inst_capacity: bool

    @classmethod
    def of(cls, scheme: str) -> "SchemeFlags":
        try:
            return cls(*SCHEME_TABLE[scheme])
        except KeyError:
            raise ConfigError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}") from None

    @property
    def checks_interference(self) -> bool:
        return self.avg_interference or self.inst_interference

    @property
    def checks_capacity(self) -> bool:
        return self.avg_capacity or self.inst_capacity


@dataclass(frozen=True)
class ActivityModel:
    """Two-state (Gilbert-Elliott) chain for PU activity.

    ``p11`` is Pr{active -> active} and ``p01`` is Pr{idle -> active}. An
    i.i.d. Bernoulli activity with probability ``p`` is the chain with
    ``p11 == p01 == p``.
    """

    p11: float = 0.975
    p01: float = 0.1

    def __post_init__(self):
        for name in ("p11", "p01"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"activity {name}={v} outside [0, 1]")
        if self.p10 + self.p01 == 0.0:
            raise ConfigError("activity chain has no stationary distribution (p10 = p01 = 0)")

    @classmethod
    def bernoulli(cls, probability: float) -> "ActivityModel":
        return cls(p11=probability, p01=probability)

    @property
    def p10(self) -> float:
        return 1.0 - self.p11

    @property
    def p00(self) -> float:
        return 1.0 - self.p01

    @property
    def stationary_active(self) -> float:
        return self.p01 / (self.p01 + self.p10)


@dataclass(frozen=True)
class DetectorConfig:
    p_fa: float = 0.03
    p_md: float = 0.02
    period: int = 5

    def __post_init__(self):
        if not (0.0 <= self.p_fa <= 1.0 and 0.0 <= self.p_md <= 1.0):
            raise ConfigError("detector probabilities must lie in [0, 1]")
        if self.period < 1:
            raise ConfigError("detector period must be >= 1")


@dataclass(frozen=True)
class QuantizerConfig:
    """Scalar quantizer of the SU-to-SU gains.

    With ``thresholds`` unset the ``levels`` regions are equi-probable under
    the exponential prior of each link.
    """

    levels: int = 4
    thresholds: tuple | None = None

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("quantizer needs at least one region")
        if self.thresholds is not None:
            t = tuple(float(x) for x in self.thresholds)
            if len(t) != self.levels - 1:
                raise ConfigError(f"quantizer with {self.levels} regions needs {self.levels - 1} thresholds")
            if any(x <= 0 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
                raise ConfigError("quantizer thresholds must be positive and strictly increasing")
            object.__setattr__(self, "thresholds", t)


@dataclass(frozen=True)
class SpNoiseConfig:
    """Noisy (and possibly outdated) measurements of the SU-to-PU low-pass channels.

    ``noise_var`` is the per-component variance; when ``snr_db`` is given
    instead, the variance is set so that avg_gain_sp / (2 noise_var) equals
    that SNR.
    """

    noise_var: float | None = None
    snr_db: float | None = 4.0
    period: int = 1

    def __post_init__(self):
        if self.noise_var is None and self.snr_db is None:
            raise ConfigError("sp noise needs noise_var or snr_db")
        if self.noise_var is not None and self.noise_var < 0:
            raise ConfigError("sp noise variance must be >= 0")
        if self.period < 1:
            raise ConfigError("sp sensing period must be >= 1")


@dataclass(frozen=True)
class SensingConfig:
    quantizer: QuantizerConfig | None = None
    detector: DetectorConfig | None = None
    sp_noise: SpNoiseConfig | None = None

    @property
    def perfect(self) -> bool:
        return self.quantizer is None and self.detector is None and self.sp_noise is None


@dataclass(frozen=True)
class QuadratureSpec:
    """Node counts for belief expectations and the power-search grid."""

    finite_order: int = 64
    tail_order: int = 64
    radial_order: int = 64
    angular_order: int = 16
    grid_points: int = 256

    def __post_init__(self):
        for name in ("finite_order", "tail_order", "radial_order", "angular_order", "grid_points"):
            if getattr(self, name) < 1:
                raise ConfigError(f"quadrature {name} must be >= 1")

    def doubled(self) -> "QuadratureSpec":
        return replace(self, finite_order=2 * self.finite_order, tail_order=2 * self.tail_order,
                       radial_order=2 * self.radial_order, angular_order=2 * self.angular_order)


@dataclass(frozen=True)
class Tolerances:
    """Slack allowed by the feasibility report before a violation is flagged."""

    power_rel: float = 0.02
    interference_rel: float = 0.05
    capacity_loss_abs: float = 0.005


def _per(value, shape, name):
    arr = np.asarray(value, dtype=float)
    try:
        out = np.broadcast_to(arr, shape).copy()
    except ValueError:
        raise ConfigError(f"{name}: cannot broadcast shape {arr.shape} to {shape}") from None
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ScenarioConfig:
    """Full description of one experiment.

    Per-SU fields broadcast to shape ``(M,)``, per-channel fields to ``(K,)``
    and per-link fields to ``(K, M)``.
    """

    num_sus: int = 5
    num_channels: int = 10
    priorities: np.ndarray | float = 1.0
    avg_power_budget: np.ndarray | float = 1.0
    max_interference: np.ndarray | float = 0.15
    max_capacity_loss: np.ndarray | float = 0.05
    pu_snr: np.ndarray | float = 10.0
    amplifier_cap: np.ndarray | float = 10.0
    avg_gain_su: np.ndarray | float = float(db_to_linear(3.0))
    avg_gain_sp: np.ndarray | float = 1.0
    sp_correlation: np.ndarray | float = 0.0
    activity: ActivityModel = field(default_factory=ActivityModel)
    sensing: SensingConfig = field(default_factory=SensingConfig)
    step_pi: float = 0.01
    step_theta: float = 0.01
    step_rho: float = 0.01
    step_schedule: str = "constant"
    step_decay: float = 1000.0  # slots; diminishing schedule eta / sqrt(1 + n / step_decay)
    multiplier_clamp: float = 1e6
    horizon: int = 20000
    seed: int = 0
    scheme: str = "APC"
    csi_variant: str = "optimal"
    rate_target: str = "conditional"
    burn_in_fraction: float = 0.5
    calibrate_samples: int = 0
    calibrate_iters: int = 200
    calibrate_step: float = 1.0
    quadrature: QuadratureSpec = field(default_factory=QuadratureSpec)
    tolerances: Tolerances = field(default_factory=Tolerances)

    def __post_init__(self):
        M, K = self.num_sus, self.num_channels
        if M < 1 or K < 1:
            raise ConfigError("num_sus and num_channels must be >= 1")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        fix = lambda name, shape: object.__setattr__(self, name, _per(getattr(self, name), shape, name))
        fix("priorities", (M,))
        fix("avg_power_budget", (M,))
        fix("max_interference", (K,))
        fix("max_capacity_loss", (K,))
        fix("pu_snr", (K,))
        fix("amplifier_cap", (K, M))
        fix("avg_gain_su", (K, M))
        fix("avg_gain_sp", (K, M))
        fix("sp_correlation", (K, M))
        for name in ("priorities", "avg_power_budget", "max_interference", "pu_snr",
                     "amplifier_cap", "avg_gain_su", "avg_gain_sp"):
            v = getattr(self, name)
            if not np.all(v > 0):
                raise ConfigError(f"{name} must be > 0")
        if not np.all(np.isfinite(self.amplifier_cap)):
            raise ConfigError("amplifier_cap must be finite")
        eps = self.max_capacity_loss
        if not np.all((eps > 0) & (eps <= 1)):
            raise ConfigError("max_capacity_loss must lie in (0, 1]")
        rho = self.sp_correlation
        if not np.all((rho >= 0) & (rho <= 1)):
            raise ConfigError("sp_correlation must lie in [0, 1]")
        for name in ("step_pi", "step_theta", "step_rho"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if not self.step_decay > 0:
            raise ConfigError("step_decay must be > 0")
        if self.multiplier_clamp <= 0:
            raise ConfigError("multiplier_clamp must be > 0")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.csi_variant not in CSI_VARIANTS:
            raise ConfigError(f"unknown csi_variant {self.csi_variant!r}; expected one of {CSI_VARIANTS}")
        if self.rate_target not in RATE_TARGETS:
            raise ConfigError(f"unknown rate_target {self.rate_target!r}")
        if self.step_schedule not in STEP_SCHEDULES:
            raise ConfigError(f"unknown step_schedule {self.step_schedule!r}")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ConfigError("burn_in_fraction must lie in [0, 1)")
        if self.calibrate_samples < 0 or self.calibrate_iters < 0:
            raise ConfigError("calibration sizes must be >= 0")

    @property
    def flags(self) -> SchemeFlags:
        return SchemeFlags.of(self.scheme)

    @property
    def pu_rate_free(self) -> np.ndarray:
        """PU rate without SU interference, per channel."""
        return np.log2(1.0 + self.pu_snr)

    @property
    def rate_target_value(self) -> np.ndarray:
        """Minimum PU rate the capacity-loss constraint protects, per channel."""
        base = (1.0 - self.max_capacity_loss) * self.pu_rate_free
        if self.rate_target == "unconditional":
            base = base * self.activity.stationary_active
        return base

    @property
    def sp_stationary_var(self) -> np.ndarray:
        """Per-component variance of the SU-to-PU low-pass channel, shape (K, M)."""
        return self.avg_gain_sp / 2.0

    @property
    def sp_noise_var(self) -> np.ndarray | None:
        noise = self.sensing.sp_noise
        if noise is None:
            return None
        if noise.noise_var is not None:
            return np.full((self.num_channels, self.num_sus), float(noise.noise_var))
        return self.avg_gain_sp / (2.0 * float(db_to_linear(noise.snr_db)))

    @property
    def burn_in(self) -> int:
        return int(self.horizon * self.burn_in_fraction)

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)


def reference_defaults(**changes) -> ScenarioConfig:
    """The numerical setup of the reference experiments (M=5, K=10, 20000 slots)."""
    return ScenarioConfig(**changes)


# --------------------------------------------------------------------------
# file format

_BOOL = {"1": True, "yes": True, "true": True, "on": True,
         "0": False, "no": False, "false": False, "off": False}

# section -> key -> (target, kind); kind in float, floats, int, str, bool
_KEYS = {
    "scenario": {
        "num_sus": "int", "num_channels": "int", "horizon": "int", "seed": "int",
        "scheme": "str", "csi_variant": "str", "rate_target": "str",
        "priorities": "floats", "avg_power_budget": "floats", "max_interference": "floats",
        "max_capacity_loss": "floats", "pu_snr": "floats", "amplifier_cap": "floats",
        "avg_gain_su": "floats", "avg_gain_sp": "floats", "sp_correlation": "floats",
        "burn_in_fraction": "float",
    },
    "activity": {"model": "str", "p11": "float", "p10": "float", "p00": "float",
                 "p01": "float", "probability": "float"},
    "sensing": {"su_levels": "int", "su_thresholds": "floats", "detector": "bool",
                "p_fa": "float", "p_md": "float", "detector_period": "int",
                "sp_noise": "bool", "sp_noise_var": "float", "sp_snr": "float",
                "sp_sense_period": "int"},
    "duals": {"step_pi": "float", "step_theta": "float", "step_rho": "float",
              "schedule": "str", "decay": "float", "clamp": "float", "calibrate_samples": "int",
              "calibrate_iters": "int", "calibrate_step": "float"},
    "quadrature": {"finite_order": "int", "tail_order": "int", "radial_order": "int",
                   "angular_order": "int", "grid_points": "int"},
    "report": {"tol_power": "float", "tol_interference": "float", "tol_capacity_loss": "float"},
}

_DB_ALLOWED = {"pu_snr", "amplifier_cap", "avg_gain_su", "avg_gain_sp", "sp_snr",
               "avg_power_budget", "max_interference"}


def _line_of(text: str, section: str, key: str) -> int | None:
    current = None
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"\[(.+)\]", s)
        if m:
            current = m.group(1).strip().lower()
            continue
        if current == section and re.match(rf"{re.escape(key)}\s*[=:]", s, re.IGNORECASE):
            return i
    return None


def _convert(raw: str, kind: str):
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "floats":
        parts = [p for p in re.split(r"[,\s]+", raw) if p]
        vals = [float(p) for p in parts]
        return vals[0] if len(vals) == 1 else vals
    if kind == "bool":
        try:
            return _BOOL[raw.lower()]
        except KeyError:
            raise ValueError(f"not a boolean: {raw!r}") from None
    return raw


def parse_config_text(text: str, source: str = "<string>") -> dict:
    """Parse config text into a flat ``{(section, key): value}`` dict (dB already converted)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values = {}
    for section in parser.sections():
        sec = section.strip().lower()
        if sec not in _KEYS:
            line = _line_of(text, sec, "") or "?"
            raise ConfigError(f"{source}: unknown section [{section}] (line {line})")
        for key, raw in parser.items(section):
            is_db = key.endswith("_db")
            base = key[:-3] if is_db else key
            where = f"{source}:{_line_of(text, sec, key) or '?'}"
            if base not in _KEYS[sec]:
                raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
            if is_db and base not in _DB_ALLOWED:
                raise ConfigError(f"{where}: key {base!r} does not accept a _db suffix")
            try:
                value = _convert(raw, _KEYS[sec][base])
            except ValueError as exc:
                raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
            if is_db:
                value = db_to_linear(value).tolist()
            if (sec, base) in values:
                raise ConfigError(f"{where}: {base!r} given twice (linear and dB)")
            values[(sec, base)] = value
    return values


def config_from_values(values: dict, base: ScenarioConfig | None = None) -> ScenarioConfig:
    base = base or ScenarioConfig()
    get = lambda sec, key, default=None: values.get((sec, key), default)
    kw = {}
    for key in _KEYS["scenario"]:
        if ("scenario", key) in values:
            kw[key] = values[("scenario", key)]

    model = get("activity", "model", "gilbert_elliott")
    if model == "bernoulli":
        prob = get("activity", "probability")
        if prob is None:
            raise ConfigError("bernoulli activity needs 'probability'")
        kw["activity"] = ActivityModel.bernoulli(prob)
    elif model == "gilbert_elliott":
        p11 = get("activity", "p11")
        p10 = get("activity", "p10")
        p01 = get("activity", "p01")
        p00 = get("activity", "p00")
        if p11 is None and p10 is not None:
            p11 = 1.0 - p10
        if p01 is None and p00 is not None:
            p01 = 1.0 - p00
        for a, b, name in ((p11, p10, "p11+p10"), (p01, p00, "p01+p00")):
            if a is not None and b is not None and not math.isclose(a + b, 1.0, abs_tol=1e-12):
                raise ConfigError(f"activity transition probabilities {name} must sum to 1")
        kw["activity"] = ActivityModel(p11=base.activity.p11 if p11 is None else p11,
                                       p01=base.activity.p01 if p01 is None else p01)
    else:
        raise ConfigError(f"unknown activity model {model!r}")

    sensing = base.sensing
    levels = get("sensing", "su_levels")
    if levels is not None or get("sensing", "su_thresholds") is not None:
        thr = get("sensing", "su_thresholds")
        if thr is not None and not isinstance(thr, list):
            thr = [thr]
        if levels is None:
            levels = len(thr) + 1
        sensing = replace(sensing, quantizer=None if levels == 0 else QuantizerConfig(levels, thr))
    if get("sensing", "detector") is not None or get("sensing", "p_fa") is not None:
        if get("sensing", "detector", True):
            d = DetectorConfig()
            sensing = replace(sensing, detector=DetectorConfig(
                p_fa=get("sensing", "p_fa", d.p_fa), p_md=get("sensing", "p_md", d.p_md),
                period=get("sensing", "detector_period", d.period)))
        else:
            sensing = replace(sensing, detector=None)
    sp_keys = ("sp_noise", "sp_noise_var", "sp_snr")
    if any(get("sensing", k) is not None for k in sp_keys):
        if get("sensing", "sp_noise", True):
            var = get("sensing", "sp_noise_var")
            snr = get("sensing", "sp_snr")
            if var is None and snr is None:
                snr_db = SpNoiseConfig().snr_db
            else:
                snr_db = None if snr is None else float(10.0 * np.log10(snr))
            sensing = replace(sensing, sp_noise=SpNoiseConfig(
                noise_var=var, snr_db=snr_db, period=get("sensing", "sp_sense_period", 1)))
        else:
            sensing = replace(sensing, sp_noise=None)
    kw["sensing"] = sensing

    duals = {"step_pi": "step_pi", "step_theta": "step_theta", "step_rho": "step_rho",
             "schedule": "step_schedule", "decay": "step_decay", "clamp": "multiplier_clamp",
             "calibrate_samples": "calibrate_samples", "calibrate_iters": "calibrate_iters",
             "calibrate_step": "calibrate_step"}
    for key, target in duals.items():
        if ("duals", key) in values:
            kw[target] = values[("duals", key)]
    quad = {k: v for (s, k), v in values.items() if s == "quadrature"}
    if quad:
        kw["quadrature"] = replace(base.quadrature, **quad)
    rep = {"tol_power": "power_rel", "tol_interference": "interference_rel",
           "tol_capacity_loss": "capacity_loss_abs"}
    tol = {rep[k]: v for (s, k), v in values.items() if s == "report"}
    if tol:
        kw["tolerances"] = replace(base.tolerances, **tol)
    return replace(base, **kw)


def load_config(path, **overrides) -> ScenarioConfig:
    """Read a scenario file; ``overrides`` replace top-level fields afterwards."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    cfg = config_from_values(parse_config_text(text, source=str(path)))
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **overrides) if overrides else cfg


def bundled_config_path(name: str = "paper_sec6.cfg") -> Path:
    return Path(__file__).parent / "data" / name
