"""Flat ``key=value`` run configuration.

One pair per line; ``#`` starts a comment; blank lines are ignored.
Unknown keys are rejected.  Every key has a documented default except the
sweep keys, which the ``sweep`` command requires.
"""

from dataclasses import dataclass, fields, replace
from pathlib import Path

from ldprecon.attack import AttackConfig
from ldprecon.core import LaplaceParams
from ldprecon.exceptions import ConfigError
from ldprecon.ldp import LdpConfig
from ldprecon.model import build_structure
from ldprecon.optimize import ObjectiveWeights

SWEEP_AXES = ("epsilon", "clip_bound", "batch", "units", "rounds")


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    # run
    seed: int = 0
    out: str = "out"
    # victim data
    channels: int = 3
    height: int = 32
    width: int = 32
    batch: int = 8
    mask: str = "oracle"
    mask_threshold: float = 0.4
    # inference structure
    units: int = 256
    bias_copies: int = 100
    metric_units: int = 16
    w0: float = 1e-3
    tau: float = 100.0
    laplace_mu: float = 3e-3
    laplace_s: float = 3e-3
    mean_factor: float = 1.0
    variance_factor: float = 10.0
    tv_factor: float = 1e-3
    index_factor: float = 1.0
    metric_gain: float = 0.3
    hidden: int = 32
    # local differential privacy
    epsilon: float = 10.0
    delta: float = 0.01
    clip_bound: float = 10.0
    c_const: float = 1.0
    m: int = 1000
    # reconstruction
    w_mu: float = 1e6
    w_sigma: float = 2e4
    w_tv: float = 1e-6
    lr: float = 1e-6
    rounds: int = 1000
    z: float = 2.576
    optimize: bool = True
    denoise: bool = True
    # sweep
    sweep_axis: str = ""
    sweep_values: tuple = ()
    sweep_seeds: int = 5
    # federated simulation
    fl_users: tuple = (2, 5, 10, 50)
    fl_rounds: int = 200
    fl_lr: float = 0.05
    fl_pool: int = 40
    fl_test: int = 1000
    fl_height: int = 8
    fl_width: int = 8
    fl_units: int = 64
    fl_bias_copies: int = 10
    fl_hidden: int = 16
    fl_subject_min: float = 0.25
    fl_subject_max: float = 0.45
    fl_seeds: int = 1
    tau_small: float = 1e-8

    # --- derived objects ---------------------------------------------------

    @property
    def image_shape(self):
        return (self.channels, self.height, self.width)

    def structure(self, **overrides):
        kw = dict(
            image_shape=self.image_shape, K=self.units, D_b=self.bias_copies, w0=self.w0,
            laplace=LaplaceParams(self.laplace_mu, self.laplace_s), N_m=self.metric_units,
            batch_size=self.batch,
            metric_factors=(self.mean_factor, self.variance_factor, self.tv_factor),
            index_factor=self.index_factor, tau=self.tau, metric_gain=self.metric_gain,
        )
        kw.update(overrides)
        return build_structure(**kw)

    def ldp(self):
        return LdpConfig(epsilon=self.epsilon, delta=self.delta, C=self.clip_bound,
                         c_const=self.c_const, m=self.m)

    def attack(self):
        w = ObjectiveWeights(self.w_mu, self.w_sigma, self.w_tv, self.lr, self.rounds)
        return AttackConfig(z=self.z, weights=w, optimize=self.optimize, denoise=self.denoise)

    def with_values(self, **kw):
        return validate(replace(self, **kw))

    def to_text(self):
        """Canonical ``key=value`` listing in field order; unset keys are omitted."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v in ("", ()):
                continue
            if isinstance(v, tuple):
                v = ",".join(_fmt(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            else:
                v = _fmt(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_TUPLE_PARSERS = {"sweep_values": _floats, "fl_users": _ints}


def _convert(key, text):
    default = _FIELDS[key].default
    if key in _TUPLE_PARSERS:
        return _TUPLE_PARSERS[key](text)
    if isinstance(default, bool):
        return _bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def parse_pairs(lines, source="<config>"):
    """Parse ``key=value`` lines into a dict of raw strings."""
    pairs = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if not value:
            raise ConfigError(f"{source}:{n}: missing value for key {key!r}")
        pairs[key] = value
    return pairs


def build_config(pairs, base=None):
    base = RunConfig() if base is None else base
    values = {}
    for key, text in pairs.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        try:
            values[key] = _convert(key, text)
        except ValueError as exc:
            raise ConfigError(f"bad value for key {key!r}: {exc}") from None
    return validate(replace(base, **values))


def load_config(path=None, overrides=()):
    """Read ``path`` (optional), then apply ``key=value`` override strings."""
    pairs = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        pairs.update(parse_pairs(text.splitlines(), str(path)))
    pairs.update(parse_pairs(list(overrides), "--set"))
    return build_config(pairs)


def validate(cfg):
    checks = [
        (cfg.channels in (1, 3), "channels", "must be 1 or 3"),
        (cfg.height >= 8 and cfg.width >= 8, "height", "images must be at least 8x8"),
        (cfg.batch >= 1, "batch", "must be >= 1"),
        (cfg.units >= 2, "units", "must be >= 2"),
        (cfg.batch <= cfg.units, "batch", "exceeds the number of units"),
        (cfg.bias_copies >= 1, "bias_copies", "must be >= 1"),
        (cfg.metric_units >= 1, "metric_units", "must be >= 1"),
        (cfg.laplace_s > 0, "laplace_s", "must be positive"),
        (cfg.epsilon > 0, "epsilon", "must be positive"),
        (cfg.clip_bound > 0, "clip_bound", "must be positive"),
        (cfg.m >= 1, "m", "must be >= 1"),
        (cfg.rounds >= 0, "rounds", "must be >= 0"),
        (cfg.z > 0, "z", "must be positive"),
        (cfg.sweep_seeds >= 1, "sweep_seeds", "must be >= 1"),
        (cfg.fl_rounds >= 0, "fl_rounds", "must be >= 0"),
        (all(u >= 2 for u in cfg.fl_users), "fl_users", "every user count must be >= 2"),
        (cfg.mask in ("oracle", "luminance-threshold"), "mask",
         "must be oracle or luminance-threshold"),
        (not cfg.sweep_axis or cfg.sweep_axis in SWEEP_AXES, "sweep_axis",
         f"must be one of {', '.join(SWEEP_AXES)}"),
    ]
    for ok, key, msg in checks:
        if not ok:
            raise ConfigError(f"key {key!r}: {msg}")
    return cfg


def require(cfg, *keys):
    """Raise naming the first key whose value is still unset."""
    for key in keys:
        if getattr(cfg, key) in ("", ()):
            raise ConfigError(f"missing required key {key!r}")
