"""Experiment configuration: INI-style ``key = value`` files with sections.

Grammar (``configparser`` with ``#`` comments)::

    [data]        corpus, vocab_mode, vocab_size, prompt_len, gen_len, n_train, n_test
    [provider]    d, context, hidden, n_layers, block, epochs, lr, batch
    [surrogate]   same keys as [provider] plus pretrain_epochs, mask_prompt, freeze_embedding
    [watermark]   scheme (kgw | exp | none), gamma, delta_wm, key, h, z_threshold,
                  key_len, perm_trials, p_threshold
    [attack]      noise_location, epsilon, delta, sweep_epsilons, sweep_deltas,
                  train_sizes, substitution_rate
    [seeds]       master, n_tuples
    [run]         out_dir, workers

Lists are comma separated. An empty ``delta`` means delta = sensitivity / epsilon.
Every key has a default; unknown keys are an error.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    corpus: str = ""  # empty: bundled toy corpus
    vocab_mode: str = "char"
    vocab_size: int = 64
    prompt_len: int = 16
    gen_len: int = 32
    n_train: int = 500
    n_test: int = 100


@dataclass
class ModelSection:
    d: int = 16
    context: int = 64
    hidden: int = 64
    n_layers: int = 1
    block: str = "attn"
    epochs: int = 4
    lr: float = 3e-3
    batch: int = 32


@dataclass
class SurrogateSection(ModelSection):
    epochs: int = 20
    pretrain_epochs: int = 2
    mask_prompt: bool = True
    freeze_embedding: bool = True


@dataclass
class WatermarkSection:
    scheme: str = "kgw"
    gamma: float = 0.5
    delta_wm: float = 4.0
    key: int = 15485863
    h: int = 1
    z_threshold: float = 2.0
    key_len: int = 64
    perm_trials: int = 200
    p_threshold: float = 0.05


@dataclass
class AttackSection:
    noise_location: str = "embedding_train"
    epsilon: float = 6.0
    delta: float | None = None
    sweep_epsilons: tuple[float, ...] = (300.0, 30.0, 6.0, 3.0)
    sweep_deltas: tuple[float, ...] = ()
    train_sizes: tuple[int, ...] = (5, 50, 500)
    substitution_rate: float = 0.3


@dataclass
class SeedSection:
    master: int = 0
    n_tuples: int = 1


@dataclass
class RunSection:
    out_dir: str = "runs/default"
    workers: int = 1


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    provider: ModelSection = field(default_factory=ModelSection)
    surrogate: SurrogateSection = field(default_factory=SurrogateSection)
    watermark: WatermarkSection = field(default_factory=WatermarkSection)
    attack: AttackSection = field(default_factory=AttackSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    run: RunSection = field(default_factory=RunSection)

    def to_ini(self) -> str:
        lines = []
        for sec in fields(self):
            lines.append(f"[{sec.name}]")
            obj = getattr(self, sec.name)
            for f in fields(obj):
                lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with per-section overrides, e.g. ``replace(attack={"epsilon": 30})``."""
        new = dataclasses.replace(self)
        for name, updates in sections.items():
            setattr(new, name, dataclasses.replace(getattr(self, name), **updates))
        return new


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw: str, f: dataclasses.Field, section: str):
    typ = str(f.type)
    raw = raw.strip()
    try:
        if typ.startswith("tuple"):
            inner = float if "float" in typ else int
            return tuple(inner(x) for x in raw.split(",") if x.strip())
        if "None" in typ:
            return float(raw) if raw else None
        if typ == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {f.name}: cannot parse {raw!r} as {typ}") from None


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    cfg = ExperimentConfig()
    known = {f.name: f for f in fields(cfg)}
    for section in cp.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
        obj = getattr(cfg, section)
        ffields = {f.name: f for f in fields(obj)}
        updates = {}
        for key, raw in cp.items(section):
            if key not in ffields:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            updates[key] = _parse(raw, ffields[key], section)
        setattr(cfg, section, dataclasses.replace(obj, **updates))
    return cfg


def load_config(path=None, env=None) -> ExperimentConfig:
    """Read ``path`` (or defaults); WSLAB_SEED overrides [seeds] master."""
    cfg = parse_config(Path(path).read_text(encoding="utf-8")) if path else ExperimentConfig()
    env = os.environ if env is None else env
    if env.get("WSLAB_SEED"):
        try:
            cfg.seeds = dataclasses.replace(cfg.seeds, master=int(env["WSLAB_SEED"]))
        except ValueError:
            raise ConfigError(f"WSLAB_SEED must be an integer, got {env['WSLAB_SEED']!r}") from None
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    from .steal import NOISE_LOCATIONS

    if cfg.data.vocab_mode not in ("char", "whitespace"):
        raise ConfigError("[data] vocab_mode must be char or whitespace")
    if cfg.data.prompt_len < 1 or cfg.data.gen_len < 1:
        raise ConfigError("[data] prompt_len and gen_len must be positive")
    if cfg.data.n_train < 1 or cfg.data.n_test < 1:
        raise ConfigError("[data] n_train and n_test must be positive")
    if cfg.data.prompt_len + cfg.data.gen_len > min(cfg.provider.context, cfg.surrogate.context) + 1:
        raise ConfigError("prompt_len + gen_len must fit in the model context")
    if cfg.watermark.scheme not in ("kgw", "exp", "none"):
        raise ConfigError("[watermark] scheme must be kgw, exp or none")
    if cfg.attack.noise_location not in NOISE_LOCATIONS:
        raise ConfigError(f"[attack] noise_location must be one of {', '.join(NOISE_LOCATIONS)}")
    if cfg.attack.delta is not None and not cfg.attack.delta > 0:
        raise ConfigError("[attack] delta must be positive")
    if not cfg.attack.epsilon > 0:
        raise ConfigError("[attack] epsilon must be positive")
    if cfg.seeds.n_tuples < 1:
        raise ConfigError("[seeds] n_tuples must be >= 1")
    if cfg.run.workers < 1:
        raise ConfigError("[run] workers must be >= 1")
