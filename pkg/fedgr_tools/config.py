# -*- coding: utf-8 -*-
"""Run configuration: dataclasses, INI parsing, validation and serialization.

File format::

    [data]
    n_classes = 10
    partition = iid

    [noise]
    phi = 1.0
    rho_min = 0.5
    rho_max = 1.0

    [protocol]
    rounds = 150
    alpha = 30

    [ablation]
    disable_cs = false

    [run]
    method = fedgr
    seeds = 1, 13, 42

Every key is optional; unknown sections or keys are rejected. Method hyperparameter
defaults are (lambda_B=1.0, lambda_R=0.1, epsilon=0.9, beta=0.8, tau=0.5, gamma_l=0.99,
kappa=0.9, mu=0.5); optimizer and schedule defaults are scaled to the
desk-size synthetic benchmark.
"""
import configparser
import dataclasses
import hashlib
import io
import logging
from dataclasses import dataclass, field, fields
from typing import Tuple

from fedgr_tools.datagen import NoiseConfig
from fedgr_tools.utils import ConfigError, ParameterError

logger = logging.getLogger(__name__)

METHODS = ("fedgr", "fedavg", "central")


@dataclass
class DataConfig:
    n_classes: int = 10
    n_samples: int = 5000
    n_test: int = 1000
    d_in: int = 16
    class_separation: float = 4.0
    partition: str = "iid"
    dirichlet_alpha: float = 0.3

    def validate(self):
        _require(self.n_classes >= 2, "n_classes", self.n_classes, ">= 2")
        _require(self.n_samples >= self.n_classes, "n_samples", self.n_samples, ">= n_classes")
        _require(self.n_test >= 1, "n_test", self.n_test, ">= 1")
        _require(self.d_in >= 1, "d_in", self.d_in, ">= 1")
        _require(self.class_separation > 0, "class_separation", self.class_separation, "> 0")
        _require(self.partition in ("iid", "dirichlet"), "partition", self.partition, "one of iid, dirichlet")
        _require(self.dirichlet_alpha > 0, "dirichlet_alpha", self.dirichlet_alpha, "> 0")


@dataclass
class ProtocolConfig:
    """Federation schedule plus every client-trainer hyperparameter."""

    n_clients: int = 20
    sample_ratio: float = 0.2
    rounds: int = 150
    alpha: int = 30
    delta: int = 30
    drop_probability: float = 0.0
    hidden: int = 64
    lambda_b: float = 1.0
    lambda_r: float = 0.1
    epsilon: float = 0.9
    beta: float = 0.8
    tau: float = 0.5
    gamma_l: float = 0.99
    kappa: float = 0.9
    mu: float = 0.5
    lr: float = 0.05
    momentum: float = 0.5
    weight_decay: float = 5e-4
    batch_size: int = 32
    local_epochs: int = 5
    sigma_weak: float = 0.05
    sigma_strong: float = 0.15
    gmm_max_iters: int = 200
    gmm_tol: float = 1e-6
    gmm_min_separation: float = 1.0
    seed: int = 1

    def validate(self):
        _require(self.n_clients >= 1, "n_clients", self.n_clients, ">= 1")
        _require(0 < self.sample_ratio <= 1, "sample_ratio", self.sample_ratio, "in (0, 1]")
        _require(self.rounds >= 1, "rounds", self.rounds, ">= 1")
        _require(1 <= self.alpha <= self.rounds, "alpha", self.alpha, "in [1, rounds]")
        _require(0 <= self.delta <= self.rounds, "delta", self.delta, "in [0, rounds]")
        _require(0 <= self.drop_probability < 1, "drop_probability", self.drop_probability, "in [0, 1)")
        _require(self.hidden >= 1, "hidden", self.hidden, ">= 1")
        _require(self.lambda_b >= 0, "lambda_b", self.lambda_b, ">= 0")
        _require(self.lambda_r >= 0, "lambda_r", self.lambda_r, ">= 0")
        _require(0 < self.epsilon <= 1, "epsilon", self.epsilon, "in (0, 1]")
        _require(0 <= self.beta <= 1, "beta", self.beta, "in [0, 1]")
        _require(self.tau > 0, "tau", self.tau, "> 0")
        _require(0 <= self.gamma_l <= 1, "gamma_l", self.gamma_l, "in [0, 1]")
        _require(0 <= self.kappa <= 1, "kappa", self.kappa, "in [0, 1]")
        _require(0 <= self.mu <= 1, "mu", self.mu, "in [0, 1]")
        _require(self.lr > 0, "lr", self.lr, "> 0")
        _require(0 <= self.momentum < 1, "momentum", self.momentum, "in [0, 1)")
        _require(self.weight_decay >= 0, "weight_decay", self.weight_decay, ">= 0")
        _require(self.batch_size >= 1, "batch_size", self.batch_size, ">= 1")
        _require(self.local_epochs >= 0, "local_epochs", self.local_epochs, ">= 0")
        _require(self.sigma_weak >= 0, "sigma_weak", self.sigma_weak, ">= 0")
        _require(self.sigma_strong >= 0, "sigma_strong", self.sigma_strong, ">= 0")
        _require(self.gmm_max_iters >= 1, "gmm_max_iters", self.gmm_max_iters, ">= 1")
        _require(self.gmm_tol >= 0, "gmm_tol", self.gmm_tol, ">= 0")
        _require(self.gmm_min_separation >= 0, "gmm_min_separation", self.gmm_min_separation, ">= 0")
        _require(self.seed >= 0, "seed", self.seed, ">= 0")


@dataclass
class AblationConfig:
    """Switches that remove one FedGR component each."""

    disable_cs: bool = False
    disable_lr: bool = False
    disable_b: bool = False
    disable_r: bool = False
    disable_strong_aug: bool = False

    def validate(self):
        pass


@dataclass
class RunSection:
    method: str = "fedgr"
    output_dir: str = ""
    seeds: Tuple[int, ...] = (1, 13, 42)

    def validate(self):
        _require(self.method in METHODS, "method", self.method, f"one of {', '.join(METHODS)}")
        _require(len(self.seeds) >= 1, "seeds", self.seeds, "a nonempty list")
        _require(all(s >= 0 for s in self.seeds), "seeds", self.seeds, "nonnegative")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    run: RunSection = field(default_factory=RunSection)

    @property
    def method(self):
        return self.run.method

    @property
    def seeds(self):
        return self.run.seeds

    @property
    def output_dir(self):
        return self.run.output_dir

    def validate(self):
        for name in SECTIONS:
            section = getattr(self, name)
            if name == "noise":
                # NoiseConfig validates itself on construction; re-run it on the current values
                try:
                    NoiseConfig(**dataclasses.asdict(section))
                except (ParameterError, ValueError) as e:
                    raise ConfigError(str(e), field=f"noise") from e
            else:
                section.validate()
        return self


SECTIONS = {
    "data": DataConfig,
    "noise": NoiseConfig,
    "protocol": ProtocolConfig,
    "ablation": AblationConfig,
    "run": RunSection,
}


def _require(ok, name, value, expectation):
    if not ok:
        raise ConfigError(f"'{name}' must be {expectation} (got {value!r})", field=name)


def _convert(section, f, raw, lineno):
    default = f.default if f.default is not dataclasses.MISSING else None
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {f.name}: cannot parse {raw!r}", lineno=lineno, field=f.name)


def _key_lines(text):
    # configparser does not keep line numbers of values; recover them for error messages
    lines, section = {}, None
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
        elif section is not None and "=" in s and not s.startswith(("#", ";")):
            lines[(section, s.split("=", 1)[0].strip().lower())] = lineno
    return lines


def parse_config_text(text):
    """Parse config text into a validated RunConfig (see module docstring)."""
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#", ";"), inline_comment_prefixes=("#",), interpolation=None
    )
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("key outside of any [section]", lineno=e.lineno) from e
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"duplicate section [{e.section}]", lineno=e.lineno) from e
    except configparser.DuplicateOptionError as e:
        raise ConfigError(f"duplicate key {e.option!r} in [{e.section}]", lineno=e.lineno) from e
    except configparser.ParsingError as e:
        lineno, line = e.errors[0]
        raise ConfigError(f"cannot parse {line!r}", lineno=lineno) from e

    key_lines = _key_lines(text)
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", field=section)
        known = {f.name: f for f in fields(SECTIONS[section])}
        kwargs = {}
        for key, raw in parser.items(section):
            lineno = key_lines.get((section, key))
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]", lineno=lineno, field=key)
            kwargs[key] = _convert(section, known[key], raw, lineno)
        values[section] = kwargs

    try:
        noise = NoiseConfig(**values.get("noise", {}))
    except (ParameterError, ValueError) as e:
        raise ConfigError(str(e), field="noise") from e
    cfg = RunConfig(
        data=DataConfig(**values.get("data", {})),
        noise=noise,
        protocol=ProtocolConfig(**values.get("protocol", {})),
        ablation=AblationConfig(**values.get("ablation", {})),
        run=RunSection(**values.get("run", {})),
    )
    return cfg.validate()


def parse_config(path):
    """Read and validate a config file.

    :param path: path to the config file
    :type path: str
    :return: validated configuration
    :rtype: RunConfig
    :raises ConfigError: on syntax errors (with line number) or invalid values (with field name)
    """
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return parse_config_text(text)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: RunConfig):
    """Config text that parses back to an equal RunConfig."""
    parser = configparser.ConfigParser(interpolation=None)
    for name in SECTIONS:
        section = getattr(cfg, name)
        parser[name] = {f.name: _format(getattr(section, f.name)) for f in fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_hash(cfg: RunConfig):
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()[:16]


def with_overrides(cfg: RunConfig, **sections):
    """Copy of ``cfg`` with fields replaced per section, e.g.
    ``with_overrides(cfg, protocol={"rounds": 5})``."""
    parts = {name: getattr(cfg, name) for name in SECTIONS}
    for name, updates in sections.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]", field=name)
        try:
            parts[name] = dataclasses.replace(parts[name], **updates)
        except (ParameterError, ValueError) as e:
            raise ConfigError(str(e), field=name) from e
    return RunConfig(**parts).validate()
