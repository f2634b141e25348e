"""Run configuration: nested YAML document, dataclass defaults, CLI overrides.

Resolution order, lowest to highest precedence:

1. dataclass defaults below;
2. ``MAPRE_SEED`` from the environment (only the top-level ``seed``);
3. the YAML config file;
4. ``--override key.path=value`` arguments, applied left to right.

Unknown keys at any level are rejected.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from mapre.encoder import EncoderConfig
from mapre.sampling import EpisodeSpec
from mapre.training.fewshot import FinetuneConfig
from mapre.training.model import ABLATIONS
from mapre.training.pretrain import PretrainConfig
from mapre.training.supervised import SupervisedConfig

SEED_ENV = "MAPRE_SEED"
EVAL_SPLITS = ("heldout", "train", "val", "test")


class ConfigError(ValueError):
    """Config file unreadable, malformed, or semantically invalid."""


@dataclass
class CorpusSection:
    num_relations: int = 26
    pretrain_relations: int = 12
    split: list = field(default_factory=lambda: [8, 2, 4])  # train / val / test relation counts
    entities_per_relation: int = 20
    sentences_per_triple: int = 4
    vocab_size: int = 128
    max_filler: int = 1


@dataclass
class ModelSection:
    share_encoders: bool = False


@dataclass
class EvalSection:
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 5
    episodes: int = 500
    split: str = "heldout"


@dataclass
class SupervisedSection:
    steps: int = 300
    batch_size: int = 16
    lr: float = 1e-3
    warmup_steps: int = 30
    weight_decay: float = 1e-5
    max_grad_norm: float = 1.0
    fraction: float = 1.0
    test_fraction: float = 0.2


@dataclass
class ModeSection:
    variant: str = "L"
    ablation: str = "both"


@dataclass
class GradcheckSection:
    seeds: int = 10
    tolerance: float = 1e-4


@dataclass
class PathsSection:
    corpus: str = "corpus"
    catalog: str = ""
    vocab: str = ""
    checkpoint_in: str = ""
    checkpoint_out: str = ""
    metrics: str = ""
    runs: str = "runs"


def _fields_without_seed(cls) -> dict:
    return {f.name: f.default if f.default is not dataclasses.MISSING else f.default_factory()
            for f in dataclasses.fields(cls) if f.name not in ("seed", "spec", "mode")}


def default_config() -> dict:
    """The full default document as plain nested dicts."""
    ep = dataclasses.asdict(EpisodeSpec())
    return {
        "seed": 0,
        "corpus": dataclasses.asdict(CorpusSection()),
        "encoder": dataclasses.asdict(EncoderConfig()),
        "model": dataclasses.asdict(ModelSection()),
        "pretrain": _fields_without_seed(PretrainConfig),
        "finetune": _fields_without_seed(FinetuneConfig),
        "episode": ep,
        "eval": dataclasses.asdict(EvalSection()),
        "supervised": dataclasses.asdict(SupervisedSection()),
        "mode": dataclasses.asdict(ModeSection()),
        "gradcheck": dataclasses.asdict(GradcheckSection()),
        "paths": dataclasses.asdict(PathsSection()),
    }


def _coerce(default, value, where: str):
    """Match float-valued defaults; YAML 1.1 reads ``5e-4`` as a string."""
    if isinstance(default, float) and not isinstance(value, bool):
        if isinstance(value, int):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{where} must be a number, got {value!r}") from None
    return value


def _merge(base: dict, update: dict, where: str = "") -> None:
    if not isinstance(update, dict):
        raise ConfigError(f"expected a mapping at {where or 'top level'}, got {type(update).__name__}")
    for key, value in update.items():
        path = f"{where}.{key}" if where else str(key)
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            _merge(base[key], value, path)
        else:
            base[key] = _coerce(base[key], value, path)


def parse_override(text: str) -> tuple[list[str], object]:
    """``"a.b=value"`` -> ``(["a", "b"], parsed value)``; values are parsed as YAML scalars."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as e:
        raise ConfigError(f"override {text!r}: {e}") from None
    return key.strip().split("."), value


def apply_override(cfg: dict, text: str) -> None:
    keys, value = parse_override(text)
    node = cfg
    for i, k in enumerate(keys[:-1]):
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key {'.'.join(keys[:i + 1])!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
    if isinstance(node[keys[-1]], dict):
        raise ConfigError(f"cannot override section {'.'.join(keys)!r} with a scalar")
    node[keys[-1]] = _coerce(node[keys[-1]], value, ".".join(keys))


def load_config(path=None, overrides=(), environ=None) -> dict:
    """Resolve and validate the run configuration."""
    environ = os.environ if environ is None else environ
    cfg = default_config()
    if environ.get(SEED_ENV, "").strip():
        try:
            cfg["seed"] = int(environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={environ[SEED_ENV]!r} is not an integer") from None
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from None
        if doc is not None:
            _merge(cfg, doc)
    for text in overrides:
        apply_override(cfg, text)
    validate(cfg)
    return cfg


def _build(cls, section: dict, where: str, **extra):
    try:
        return cls(**section, **extra)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where} section: {e}") from None


def validate(cfg: dict) -> None:
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError(f"seed must be an integer, got {cfg['seed']!r}")
    encoder_config(cfg)
    pretrain_config(cfg)
    finetune_config(cfg)
    supervised_config(cfg)
    eval_spec(cfg)
    c = cfg["corpus"]
    split = c["split"]
    if not (isinstance(split, list) and len(split) == 3 and all(isinstance(x, int) and x > 0 for x in split)):
        raise ConfigError(f"corpus.split must be three positive relation counts, got {split!r}")
    if c["pretrain_relations"] + sum(split) != c["num_relations"]:
        raise ConfigError("corpus.pretrain_relations + sum(corpus.split) must equal corpus.num_relations")
    if cfg["mode"]["variant"] not in ("L", "R"):
        raise ConfigError(f"mode.variant must be L or R, got {cfg['mode']['variant']!r}")
    if cfg["mode"]["ablation"] not in ABLATIONS:
        raise ConfigError(f"mode.ablation must be one of {sorted(ABLATIONS)}")
    if cfg["eval"]["split"] not in EVAL_SPLITS:
        raise ConfigError(f"eval.split must be one of {list(EVAL_SPLITS)}")
    if not 0.0 < cfg["supervised"]["fraction"] <= 1.0:
        raise ConfigError("supervised.fraction must lie in (0, 1]")
    if not 0.0 < cfg["supervised"]["test_fraction"] < 1.0:
        raise ConfigError("supervised.test_fraction must lie in (0, 1)")
    if cfg["gradcheck"]["seeds"] < 1:
        raise ConfigError("gradcheck.seeds must be positive")
    for key, value in cfg["paths"].items():
        if not isinstance(value, str):
            raise ConfigError(f"paths.{key} must be a string")


def encoder_config(cfg: dict) -> EncoderConfig:
    return _build(EncoderConfig, cfg["encoder"], "encoder")


def pretrain_config(cfg: dict) -> PretrainConfig:
    return _build(PretrainConfig, cfg["pretrain"], "pretrain", seed=cfg["seed"])


def training_spec(cfg: dict) -> EpisodeSpec:
    return _build(EpisodeSpec, cfg["episode"], "episode")


def finetune_config(cfg: dict) -> FinetuneConfig:
    return _build(FinetuneConfig, cfg["finetune"], "finetune", seed=cfg["seed"], spec=training_spec(cfg),
                  mode=cfg["mode"]["ablation"])


def supervised_config(cfg: dict) -> SupervisedConfig:
    s = {k: v for k, v in cfg["supervised"].items() if k not in ("fraction", "test_fraction")}
    return _build(SupervisedConfig, s, "supervised", seed=cfg["seed"])


def eval_spec(cfg: dict) -> EpisodeSpec:
    e = cfg["eval"]
    return _build(EpisodeSpec, {k: e[k] for k in ("n_way", "k_shot", "n_query")}, "eval")


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(copy.deepcopy(cfg), sort_keys=True)
