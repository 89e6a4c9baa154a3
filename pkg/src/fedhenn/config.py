"""Experiment configuration: sectioned key-value text with flat, globally unique keys.

Example::

    [run]
    mode = fedhenn_homo
    seed = 3

    [data]
    n_clients = 8
    classes_per_client = 2

    [model]
    hidden = 16,8
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path

from fedhenn.cka import KernelSpec

MODES = ("fedhenn_homo", "fedhenn_hetero", "fedavg", "fedprox", "local_only")
HOMOGENEOUS_MODES = ("fedhenn_homo", "fedavg", "fedprox")
REQUIRED = object()


class ConfigError(ValueError):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(v) for v in text.split(","))


def _arch_family(text: str) -> tuple[tuple[int, ...], ...]:
    return tuple(_int_list(part) for part in text.split(";"))


def _weights(text: str):
    text = text.strip()
    if text == "uniform":
        return "uniform"
    return tuple(float(v) for v in text.split(","))


def _batch(text: str):
    text = text.strip()
    if text == "full":
        return "full"
    v = int(text)
    if v < 1:
        raise ValueError("batch size must be >= 1")
    return v


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _sigma(text: str) -> tuple[str, float]:
    mode, _, value = text.strip().partition(":")
    modes = {"median": "median_fraction", "median_fraction": "median_fraction", "fixed": "fixed"}
    if mode not in modes:
        raise ValueError("expected 'median:<c>' or 'fixed:<sigma>'")
    v = float(value)
    if not v > 0:
        raise ValueError("sigma value must be > 0")
    return modes[mode], v


def _choice(*options):
    def parse(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return t

    parse.expected = " | ".join(options)
    return parse


def _fmt_list(v) -> str:
    return ",".join(str(x) for x in v)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return ";".join(_fmt_list(v) for v in value)
    if isinstance(value, tuple) and len(value) == 2 and isinstance(value[0], str):
        mode, v = value
        return f"{'median' if mode == 'median_fraction' else 'fixed'}:{v!r}"
    if isinstance(value, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in value)
    return str(value)


# name -> (section, parser, expected-type text, default)
_SCHEMA: dict[str, tuple] = {
    "mode": ("run", _choice(*MODES), " | ".join(MODES), REQUIRED),
    "seed": ("run", int, "integer", 0),
    "out_dir": ("run", str, "path", "runs/default"),
    "workers": ("run", int, "integer >= 1", 1),
    "dataset": ("data", _choice("synth", "csv"), "synth | csv", "synth"),
    "csv_path": ("data", str, "path", ""),
    "n_classes": ("data", int, "integer", 4),
    "dim": ("data", int, "integer", 2),
    "n_per_class": ("data", int, "integer", 100),
    "class_sep": ("data", float, "float", 3.0),
    "n_clients": ("data", int, "integer", REQUIRED),
    "classes_per_client": ("data", int, "integer", REQUIRED),
    "strict_coverage": ("data", _bool, "boolean", False),
    "test_frac": ("data", float, "float in (0,1)", 0.2),
    "shrink_fraction": ("data", float, "float in [0,1] (0 = off)", 0.0),
    "shrink_ratio": ("data", float, "float in (0,1]", 0.5),
    "hidden": ("model", _int_list, "comma-separated integers", None),
    "arch_family": ("model", _arch_family, "';'-separated lists of comma-separated integers", None),
    "arch_assign": ("model", _choice("random", "cycle"), "random | cycle", "random"),
    "activation": ("model", _choice("relu", "tanh", "identity"), "relu | tanh | identity", "relu"),
    "rounds": ("federation", int, "integer", 200),
    "local_epochs": ("federation", int, "integer", 20),
    "client_fraction": ("federation", float, "float in (0,1]", 0.1),
    "eta0": ("federation", float, "float", 0.001),
    "eta_schedule": ("federation", _choice("linear_ramp", "constant"), "linear_ramp | constant", "linear_ramp"),
    "rad_size": ("federation", int, "integer", 64),
    "rad_source": ("federation", _choice("heldout_pool", "gaussian_noise"), "heldout_pool | gaussian_noise", "heldout_pool"),
    "rad_pool_size": ("federation", int, "integer", 128),
    "client_weights": ("federation", _weights, "uniform | comma-separated floats", "uniform"),
    "fedprox_mu": ("federation", float, "float", 0.1),
    "kernel": ("kernel", _choice("linear", "rbf"), "linear | rbf", "linear"),
    "rbf_sigma": ("kernel", _sigma, "median:<c> | fixed:<sigma>", ("median_fraction", 0.5)),
    "lr": ("optim", float, "float", 0.05),
    "momentum": ("optim", float, "float", 0.9),
    "batch": ("optim", _batch, "full | integer", "full"),
}
SECTIONS = ("run", "data", "model", "federation", "kernel", "optim")


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    n_clients: int
    classes_per_client: int
    seed: int = 0
    out_dir: str = "runs/default"
    workers: int = 1
    dataset: str = "synth"
    csv_path: str = ""
    n_classes: int = 4
    dim: int = 2
    n_per_class: int = 100
    class_sep: float = 3.0
    strict_coverage: bool = False
    test_frac: float = 0.2
    shrink_fraction: float = 0.0
    shrink_ratio: float = 0.5
    hidden: tuple | None = None
    arch_family: tuple | None = None
    arch_assign: str = "random"
    activation: str = "relu"
    rounds: int = 200
    local_epochs: int = 20
    client_fraction: float = 0.1
    eta0: float = 0.001
    eta_schedule: str = "linear_ramp"
    rad_size: int = 64
    rad_source: str = "heldout_pool"
    rad_pool_size: int = 128
    client_weights: object = "uniform"
    fedprox_mu: float = 0.1
    kernel: str = "linear"
    rbf_sigma: tuple = ("median_fraction", 0.5)
    lr: float = 0.05
    momentum: float = 0.9
    batch: object = "full"

    def __post_init__(self):
        self.validate()

    @property
    def homogeneous(self) -> bool:
        return self.mode in HOMOGENEOUS_MODES

    @property
    def uses_alignment(self) -> bool:
        return self.mode in ("fedhenn_homo", "fedhenn_hetero")

    @property
    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(self.kernel, self.rbf_sigma[0], self.rbf_sigma[1])

    @property
    def hidden_family(self) -> tuple[tuple[int, ...], ...]:
        """Hidden-layer widths available to clients; a single entry for homogeneous modes."""
        if self.homogeneous or self.arch_family is None:
            return (tuple(self.hidden),)
        return tuple(tuple(h) for h in self.arch_family)

    def validate(self):
        def fail(msg):
            raise ConfigError(msg)

        if self.mode not in MODES:
            fail(f"mode: expected one of {', '.join(MODES)}")
        if self.seed < 0:
            fail("seed: must be >= 0")
        if self.n_clients < 1:
            fail("n_clients: must be >= 1")
        if self.classes_per_client < 1:
            fail("classes_per_client: must be >= 1")
        if self.workers < 1:
            fail("workers: must be >= 1")
        if self.rounds < 0:
            fail("rounds: must be >= 0")
        if self.local_epochs < 0:
            fail("local_epochs: must be >= 0")
        if not 0.0 < self.client_fraction <= 1.0:
            fail("client_fraction: must lie in (0, 1]")
        if self.eta0 < 0:
            fail("eta0: must be >= 0")
        if not 0.0 < self.test_frac < 1.0:
            fail("test_frac: must lie in (0, 1)")
        if not 0.0 <= self.shrink_fraction <= 1.0:
            fail("shrink_fraction: must lie in [0, 1]")
        if not 0.0 < self.shrink_ratio <= 1.0:
            fail("shrink_ratio: must lie in (0, 1]")
        if self.lr <= 0:
            fail("lr: must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            fail("momentum: must lie in [0, 1)")
        if self.fedprox_mu < 0:
            fail("fedprox_mu: must be >= 0")
        if self.dataset == "csv" and not self.csv_path:
            fail("csv_path: required when dataset = csv")
        if self.homogeneous and self.hidden is None:
            fail("hidden: required for homogeneous modes")
        if not self.homogeneous and self.hidden is None and self.arch_family is None:
            fail("arch_family: required for heterogeneous modes (or give hidden)")
        if self.uses_alignment:
            if any(len(h) == 0 for h in self.hidden_family):
                fail("hidden: FedHeNN modes need at least one hidden layer for the representation")
            if self.eta0 > 0 and self.rad_size < 2:
                fail("rad_size: must be >= 2 when eta0 > 0")
        if isinstance(self.client_weights, tuple):
            if len(self.client_weights) != self.n_clients:
                fail(f"client_weights: expected {self.n_clients} entries, got {len(self.client_weights)}")
            if any(w < 0 for w in self.client_weights) or not sum(self.client_weights) > 0:
                fail("client_weights: must be nonnegative with a positive sum")

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def with_overrides(self, overrides) -> ExperimentConfig:
        raw = {}
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            raw[key.strip()] = value.strip()
        return self.replace(**_coerce(raw))

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section in SECTIONS:
            parser.add_section(section)
        for name, (section, *_rest) in _SCHEMA.items():
            value = getattr(self, name)
            if value is None:
                continue
            parser.set(section, name, _fmt(value))
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in parser.items(section))
            lines.append("")
        return "\n".join(lines)


def _coerce(raw: dict[str, str]) -> dict:
    out = {}
    for key, text in raw.items():
        # compound convenience key: shrink = off | <fraction>,<ratio>
        if key == "shrink":
            t = text.strip().lower()
            if t == "off":
                out["shrink_fraction"] = 0.0
                continue
            try:
                frac, ratio = (float(v) for v in t.strip("()").split(","))
            except ValueError:
                raise ConfigError("shrink: expected off | <fraction>,<ratio>") from None
            out["shrink_fraction"], out["shrink_ratio"] = frac, ratio
            continue
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        _section, parse, expected, _default = _SCHEMA[key]
        try:
            out[key] = parse(text)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{key}: expected {expected}, got {text!r} ({exc})") from None
    return out


_NON_SCALAR = ("hidden", "arch_family", "client_weights")


def scalar_keys() -> tuple[str, ...]:
    """Keys holding a single value; these are the ones a sweep may vary."""
    return tuple(k for k in _SCHEMA if k not in _NON_SCALAR)


def parse_config_text(text: str, overrides=()) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}".splitlines()[0]) from None
    raw: dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if key in raw:
                raise ConfigError(f"duplicate key {key!r}")
            raw[key] = value
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        raw[key.strip()] = value.strip()
    values = _coerce(raw)
    missing = [k for k, (_s, _p, _e, d) in _SCHEMA.items() if d is REQUIRED and k not in values]
    if missing:
        raise ConfigError(f"missing required key {missing[0]!r}")
    return ExperimentConfig(**values)


def parse_config(path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), overrides)
