"""Run configuration: presets, config files, environment, flag overrides.

A run is described by one nested mapping with sections ``model``,
``model_small``, ``data``, ``positive``, ``negative``, ``stabilize``,
``eval`` and ``paths``.  Values resolve in increasing precedence:

    preset defaults  <  config file  <  SEQFORGET_* environment  <  flags

Environment keys use double underscores for nesting, e.g.
``SEQFORGET_POSITIVE__LR=1e-3`` sets ``positive.lr``.  Values are parsed as
JSON when possible and kept as strings otherwise.  ``SEQFORGET_KERNELS`` is
reserved for backend selection and ignored here.

Two presets ship with the package.  ``desk`` is sized so every phase shows a
measurable effect on a laptop CPU within minutes.  ``paper`` keeps the
reference hyperparameters (positive lr 5e-5, negative lr 1e-5 with
alpha 0.001 for one epoch, batch size 8) on a GPT-2-sized stack; it is
faithful, not fast.
"""

import copy
import dataclasses
import json
import os
from dataclasses import dataclass

from .data import VOCAB_SIZE, CorpusSpec
from .errors import ConfigError
from .model import FreezePolicy, ModelConfig
from .trainer import EarlyStop, PhaseConfig

ENV_PREFIX = "SEQFORGET_"
_ENV_RESERVED = {"SEQFORGET_KERNELS"}

PRESETS = ("desk", "paper")


@dataclass(frozen=True)
class DataSection:
    retain: CorpusSpec
    forget: CorpusSpec
    val_fraction: float = 0.15
    split_seed: int = 1
    max_in: int = 64
    max_out: int = 32
    mask_prompt: bool = True
    include_forget_in_positive: bool = True
    n_refusals: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.max_in < 1 or self.max_out < 1:
            raise ConfigError("max_in and max_out must be positive")
        if self.n_refusals < 0:
            raise ConfigError(f"n_refusals must be >= 0, got {self.n_refusals}")


@dataclass(frozen=True)
class EvalSection:
    probe_seed: int = 5
    max_new: int = 48

    def __post_init__(self):
        if self.max_new < 1:
            raise ConfigError(f"max_new must be positive, got {self.max_new}")


@dataclass(frozen=True)
class PathsSection:
    workdir: str = "runs/desk"
    metrics_name: str = "metrics.jsonl"
    eval_name: str = "eval_reports.jsonl"
    transcripts_name: str = "probe_transcripts.jsonl"
    checkpoint: str | None = None
    out: str | None = None
    emit_plot_data: bool = False


@dataclass(frozen=True)
class RunConfig:
    preset: str
    model: ModelConfig
    model_small: ModelConfig
    data: DataSection
    positive: PhaseConfig
    negative: PhaseConfig
    stabilize: PhaseConfig
    eval: EvalSection
    paths: PathsSection

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        need = 2 + self.data.max_in + self.data.max_out  # bos + eos
        for label, cfg in (("model", self.model), ("model_small", self.model_small)):
            if cfg.vocab_size != VOCAB_SIZE:
                raise ConfigError(
                    f"{label}.vocab_size must be {VOCAB_SIZE} for the byte "
                    f"tokenizer, got {cfg.vocab_size}"
                )
            if cfg.context_len < need:
                raise ConfigError(
                    f"{label}.context_len {cfg.context_len} cannot hold "
                    f"max_in+max_out sequences of {need} tokens"
                )


def preset_values(name: str) -> dict:
    """Concrete settings for a named preset, as a plain nested mapping."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    if name == "desk":
        return {
            "preset": "desk",
            "model": {"vocab_size": VOCAB_SIZE, "context_len": 128, "d_model": 128,
                      "n_heads": 4, "n_layers": 4, "seed": 7},
            "model_small": {"vocab_size": VOCAB_SIZE, "context_len": 128,
                            "d_model": 96, "n_heads": 4, "n_layers": 2, "seed": 7},
            "data": {"retain": {"n_examples": 512, "seed": 0},
                     "forget": {"n_examples": 128, "seed": 0},
                     "val_fraction": 0.15, "split_seed": 1,
                     "max_in": 64, "max_out": 32, "mask_prompt": True,
                     "include_forget_in_positive": True},
            "positive": {"lr": 1.5e-3, "epochs": 3, "batch_size": 8, "seed": 11,
                         "freeze_policy": {"variant": "all_trainable"}},
            "negative": {"lr": 1e-4, "alpha": 0.05, "epochs": 3, "batch_size": 8,
                         "seed": 12,
                         "freeze_policy": {"variant": "last_k_blocks_plus_head",
                                           "k": 2}},
            "stabilize": {"lr": 5e-4, "epochs": 5, "batch_size": 8, "seed": 13,
                          "freeze_policy": {"variant": "all_trainable"},
                          "early_stop": {"patience": 2, "min_delta": 1e-3}},
            "eval": {"probe_seed": 5, "max_new": 48},
            "paths": {"workdir": "runs/desk"},
        }
    # paper: reference hyperparameters on a GPT-2-sized stack
    return {
        "preset": "paper",
        "model": {"vocab_size": VOCAB_SIZE, "context_len": 1024, "d_model": 768,
                  "n_heads": 12, "n_layers": 12, "seed": 7},
        "model_small": {"vocab_size": VOCAB_SIZE, "context_len": 1024,
                        "d_model": 768, "n_heads": 12, "n_layers": 6, "seed": 7},
        "data": {"retain": {"n_examples": 2048, "seed": 0},
                 "forget": {"n_examples": 256, "seed": 0},
                 "val_fraction": 0.15, "split_seed": 1,
                 "max_in": 512, "max_out": 128, "mask_prompt": True,
                 "include_forget_in_positive": True},
        "positive": {"lr": 5e-5, "epochs": 3, "batch_size": 8, "seed": 11,
                     "freeze_policy": {"variant": "all_trainable"}},
        "negative": {"lr": 1e-5, "alpha": 0.001, "epochs": 1, "batch_size": 8,
                     "seed": 12,
                     "freeze_policy": {"variant": "last_k_blocks_plus_head",
                                       "k": 2}},
        "stabilize": {"lr": 5e-5, "epochs": 5, "batch_size": 8, "seed": 13,
                      "freeze_policy": {"variant": "all_trainable"},
                      "early_stop": {"patience": 2, "min_delta": 1e-3}},
        "eval": {"probe_seed": 5, "max_new": 48},
        "paths": {"workdir": "runs/paper"},
    }


def deep_merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; non-dict values in override replace base values."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            values = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must contain a JSON object")
    return values


def env_overrides(environ=None) -> dict:
    """SEQFORGET_SECTION__KEY=value pairs as a nested mapping."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX) or key in _ENV_RESERVED:
            continue
        parts = key[len(ENV_PREFIX):].lower().split("__")
        if not all(parts):
            raise ConfigError(f"malformed override variable {key}")
        raw = environ[key]
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def _take(section: dict, allowed, where: str) -> dict:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key {where}.{unknown[0]}")
    return dict(section)


def _dataclass_kwargs(section: dict, cls, where: str) -> dict:
    return _take(section, [f.name for f in dataclasses.fields(cls)], where)


def _build_corpus(section: dict, where: str) -> CorpusSpec:
    kwargs = _take(section, ["n_examples", "seed"], where)
    return CorpusSpec(**kwargs)


def _build_phase(section: dict, phase: str, data: DataSection) -> PhaseConfig:
    section = dict(section)
    policy = section.pop("freeze_policy", None)
    if policy is None:
        raise ConfigError(f"{phase}.freeze_policy is required")
    kwargs = _take(policy, ["variant", "k"], f"{phase}.freeze_policy")
    policy = FreezePolicy(**kwargs)
    early = section.pop("early_stop", None)
    if early is not None:
        kwargs = _take(early, ["patience", "min_delta"], f"{phase}.early_stop")
        early = EarlyStop(**kwargs)
    section.setdefault("mask_prompt", data.mask_prompt)
    section.setdefault("max_in", data.max_in)
    section.setdefault("max_out", data.max_out)
    kwargs = _dataclass_kwargs(section, PhaseConfig, phase)
    kwargs.pop("phase", None)
    kwargs.pop("freeze_policy", None)
    kwargs.pop("early_stop", None)
    return PhaseConfig(phase=phase, freeze_policy=policy, early_stop=early, **kwargs)


def build_run_config(values: dict) -> RunConfig:
    """Validate a fully merged mapping into a RunConfig."""
    values = _take(values, [f.name for f in dataclasses.fields(RunConfig)], "config")
    try:
        data_raw = dict(values["data"])
        retain = _build_corpus(data_raw.pop("retain"), "data.retain")
        forget = _build_corpus(data_raw.pop("forget"), "data.forget")
        data_kwargs = _dataclass_kwargs(data_raw, DataSection, "data")
        data = DataSection(retain=retain, forget=forget, **data_kwargs)
        return RunConfig(
            preset=values["preset"],
            model=ModelConfig(**_dataclass_kwargs(values["model"], ModelConfig,
                                                  "model")),
            model_small=ModelConfig(**_dataclass_kwargs(values["model_small"],
                                                        ModelConfig, "model_small")),
            data=data,
            positive=_build_phase(values["positive"], "positive", data),
            negative=_build_phase(values["negative"], "negative", data),
            stabilize=_build_phase(values["stabilize"], "stabilize", data),
            eval=EvalSection(**_dataclass_kwargs(values.get("eval", {}),
                                                 EvalSection, "eval")),
            paths=PathsSection(**_dataclass_kwargs(values.get("paths", {}),
                                                   PathsSection, "paths")),
        )
    except KeyError as exc:
        raise ConfigError(f"config is missing required section {exc.args[0]!r}") from exc
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def resolve_config(preset: str = "desk", config_path=None, environ=None,
                   flag_overrides: dict | None = None) -> tuple[RunConfig, dict]:
    """Merge all sources and validate; returns (config, resolved mapping).

    The mapping is what should be echoed into the workdir: it reflects
    exactly what the run used, after every override layer.
    """
    values = preset_values(preset)
    if config_path is not None:
        file_values = load_config_file(config_path)
        if "preset" in file_values and file_values["preset"] != preset:
            values = preset_values(file_values["preset"])
        values = deep_merge(values, file_values)
    values = deep_merge(values, env_overrides(environ))
    if flag_overrides:
        values = deep_merge(values, flag_overrides)
    return build_run_config(values), values
