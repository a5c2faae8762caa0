"""Experiment configuration as a sectioned key = value file.

Sections map onto the dataclasses of each component::

    [corpus]      CorpusConfig
    [model]       BackboneConfig (input_dim / vocab follow [corpus])
    [classifier]  SpeakerClassifierConfig (num_speakers follows [corpus])
    [train]       TrainConfig without the objective
    [objective]   ObjectiveSpec
    [probe]       ProbeConfig
    [experiment]  split / seed-model settings

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields, replace

from .data import CorpusConfig
from .model import BackboneConfig, SpeakerClassifierConfig
from .objectives import ConfigError, ObjectiveSpec
from .probe import ProbeConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class ExperimentSettings:
    eval_fraction: float = 0.05
    split_seed: int = 0
    seed_epochs: int = 8


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: BackboneConfig = field(default_factory=BackboneConfig)
    classifier: SpeakerClassifierConfig = field(default_factory=SpeakerClassifierConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)

    @property
    def objective(self) -> ObjectiveSpec:
        return self.train.objective

    def with_objective(self, **changes) -> "ExperimentConfig":
        spec = replace(self.train.objective, **changes)
        return replace(self, train=replace(self.train, objective=spec))


_SECTIONS = {
    "corpus": CorpusConfig,
    "model": BackboneConfig,
    "classifier": SpeakerClassifierConfig,
    "train": TrainConfig,
    "objective": ObjectiveSpec,
    "probe": ProbeConfig,
    "experiment": ExperimentSettings,
}
# derived from [corpus]; never written or read directly
_DERIVED = {"model": {"input_dim", "vocab"}, "classifier": {"num_speakers"}, "train": {"objective"}}


def _convert(section, key, text, annotation):
    ann = str(annotation).replace(" ", "")
    text = text.strip()
    optional = "None" in ann
    if optional and text.lower() in ("", "none"):
        return None
    base = ann.replace("|None", "").replace("None|", "")
    try:
        if base == "bool":
            return {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}[text.lower()]
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
        return text
    except (KeyError, ValueError):
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r} as {base}") from None


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str, overrides=()) -> ExperimentConfig:
    """Parse ``text``; ``overrides`` are ``section.key=value`` strings applied on top."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, value.strip())
    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        known = {f.name: f for f in fields(_SECTIONS[section])}
        for key, raw in parser.items(section):
            if key not in known or key in _DERIVED.get(section, ()):
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values.setdefault(section, {})[key] = _convert(section, key, raw, known[key].type)
    return build_config(values)


def build_config(values: dict) -> ExperimentConfig:
    try:
        corpus = CorpusConfig(**values.get("corpus", {}))
        corpus.validate()
        model = BackboneConfig(**values.get("model", {}), input_dim=corpus.input_dim,
                               vocab=corpus.content_vocab)
        clf = SpeakerClassifierConfig(**values.get("classifier", {}), num_speakers=corpus.num_speakers)
        spec = ObjectiveSpec(**values.get("objective", {}))
        train = TrainConfig(**values.get("train", {}), objective=spec)
        probe = ProbeConfig(**values.get("probe", {}))
        exp = ExperimentSettings(**values.get("experiment", {}))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(corpus, model, clf, train, probe, exp)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    text = ""
    if path is not None:
        with open(path) as fh:
            text = fh.read()
    return parse_config(text, overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    """Fully resolved config; parsing it back yields an equal object."""
    out = io.StringIO()
    for section, cls in _SECTIONS.items():
        obj = cfg.objective if section == "objective" else getattr(cfg, section)
        out.write(f"[{section}]\n")
        for f in fields(cls):
            if f.name in _DERIVED.get(section, ()):
                continue
            out.write(f"{f.name} = {_format(getattr(obj, f.name))}\n")
        out.write("\n")
    return out.getvalue()


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))


def as_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
