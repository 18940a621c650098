"""Experiment configuration files.

An INI-style file (``key = value`` under ``[section]`` headers) maps onto
one frozen dataclass per section.  Values are typed from the dataclass
defaults; lists are comma separated.  Unknown sections or keys are errors,
and ``--set section.key=value`` overrides are applied after the file.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError, ResultsIOError
from .harness import CampaignConfig
from .mdp import MdpConfig
from .ppo import PpoConfig
from .worldgen import DEFAULT_EVALUATOR_CONFIG, TrainConfig, WorldConfig


@dataclass(frozen=True)
class ExperimentSection:
    seed: int = 0
    out: str = ""


@dataclass(frozen=True)
class MdpSection:
    alpha: float = 0.7
    lambda1: float = 2.0
    lambda2: float = 2.0
    lambda3: float = 8.0
    beta: float = 1.0
    max_steps: int = 8
    latent_bound: float = 3.0
    target_classes: tuple = (0, 1, 2, 3)


@dataclass(frozen=True)
class CampaignSection:
    methods: tuple = ("ppo_mi", "random_search", "hillclimb")
    seeds: tuple = (0, 1, 2)
    query_budget: int = 2000
    step_sigma: float = 0.3
    brute_force: bool = True
    grid_points: int = 201


SECTIONS = {
    "experiment": ExperimentSection,
    "world": WorldConfig,
    "train": TrainConfig,
    "evaluator": TrainConfig,
    "mdp": MdpSection,
    "ppo": PpoConfig,
    "campaign": CampaignSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = ExperimentSection()
    world: WorldConfig = WorldConfig()
    train: TrainConfig = TrainConfig()
    evaluator: TrainConfig = DEFAULT_EVALUATOR_CONFIG
    mdp: MdpSection = MdpSection()
    ppo: PpoConfig = PpoConfig()
    campaign: CampaignSection = CampaignSection()

    @property
    def master_seed(self):
        return self.experiment.seed

    def mdp_config(self, target_class=None) -> MdpConfig:
        m = self.mdp
        y = m.target_classes[0] if target_class is None else target_class
        return MdpConfig(y, m.alpha, m.lambda1, m.lambda2, m.lambda3, m.beta, m.max_steps, self.world.z_dim, m.latent_bound)

    def campaign_config(self, methods=None) -> CampaignConfig:
        c = self.campaign
        return CampaignConfig(
            tuple(methods or c.methods),
            self.mdp.target_classes,
            c.seeds,
            c.query_budget,
            c.step_sigma,
            self.experiment.seed,
            c.brute_force,
            c.grid_points,
        )

    def validate(self):
        self.world.validate()
        self.train.validate("train")
        self.evaluator.validate("evaluator")
        self.mdp_config().validate(self.world.n_classes)
        self.ppo.validate()
        self.campaign_config().validate(self.world.n_classes)
        return self


def _convert(text: str, default, field_name: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            elem = type(default[0]) if default else str
            return tuple(elem(t) for t in items)
        return text
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r}: {exc}", field_name) from exc


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    return str(value)


def _apply(cfg: ExperimentConfig, section: str, key: str, text: str) -> ExperimentConfig:
    if section not in SECTIONS:
        raise ConfigError(f"unknown section [{section}]; valid sections: {', '.join(SECTIONS)}", section)
    current = getattr(cfg, section)
    names = {f.name for f in fields(current)}
    if key not in names:
        raise ConfigError(f"unknown key; valid keys in [{section}]: {', '.join(sorted(names))}", f"{section}.{key}")
    value = _convert(text, getattr(current, key), f"{section}.{key}")
    return replace(cfg, **{section: replace(current, **{key: value})})


def parse_overrides(pairs) -> list:
    out = []
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form section.key=value", "--set")
        dotted, value = pair.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override key {dotted!r} needs a section (e.g. mdp.alpha)", "--set")
        section, key = dotted.strip().split(".", 1)
        out.append((section, key, value))
    return out


def parse_config(path=None, overrides=(), text: str | None = None) -> ExperimentConfig:
    """Read, override and validate an experiment configuration.

    ``path=None`` (and no ``text``) means all defaults.
    """
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    if text is None and path is not None:
        try:
            text = Path(path).read_text()
        except FileNotFoundError as exc:
            raise ResultsIOError("config file not found", path) from exc
        except OSError as exc:
            raise ResultsIOError(f"cannot read config: {exc}", path) from exc
    try:
        parser.read_string(text or "", source=str(path or "<config>"))
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"parse error at line {exc.lineno}: key outside any [section]: {exc.line.strip()!r}") from exc
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"parse error at line {lineno}: cannot parse {line}") from exc
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None)
        where = f" at line {lineno}" if lineno is not None else ""
        raise ConfigError(f"parse error{where}: {exc.message}") from exc
    cfg = ExperimentConfig()
    for section in parser.sections():
        for key, value in parser.items(section):
            cfg = _apply(cfg, section, key, value)
    for section, key, value in parse_overrides(overrides):
        cfg = _apply(cfg, section, key, value)
    return cfg.validate()


def config_to_text(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_effective_config(cfg: ExperimentConfig, directory) -> Path:
    path = Path(directory) / "config.ini"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config_to_text(cfg))
    return path
