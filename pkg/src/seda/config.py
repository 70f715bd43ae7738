"""Run configuration files.

A run config is a YAML mapping with a fixed set of sections and keys; any
other key is an error that names it. Every key is optional and falls back to
the library default.

    seed: 7
    data:     {preset: hard, ...SyntheticSpec fields}
    schedule: {total_steps, beta_start, beta_end}
    loss:     {alpha1, alpha2, beta, gamma, staged_step, stage_order}
    model:    {token_count, attention_heads, decoder_hidden_dims, activation}
    train:    {epochs, batch_size, base_lr, weight_decay, lr_halving_period_epochs,
               ablation, use_dst, use_attention_interaction, use_dsl}
    sampling: {noise_scale, stride, record_trajectory}
    paths:    {data, out, ckpt, report}

The seed resolves as command-line flag, then ``SEDA_SEED``, then the file.
It drives data generation, initialization, training and evaluation.
"""

import os
from dataclasses import dataclass, field, fields, replace
from importlib import resources

import yaml

from .data import PRESETS, SyntheticSpec, preset
from .denoiser import DenoiserConfig
from .exceptions import ConfigError, InvalidArgumentError
from .losses import StagedLossConfig
from .sampler import SamplingOptions
from .trainer import ABLATIONS, TrainConfig, apply_ablation

SEED_ENV = "SEDA_SEED"

_DATA_KEYS = {f.name: f.type for f in fields(SyntheticSpec) if f.name != "seed"}
_DATA_KEYS["preset"] = str
_SCHEMA = {
    "data": _DATA_KEYS,
    "schedule": {"total_steps": int, "beta_start": float, "beta_end": float},
    "loss": {
        "alpha1": float, "alpha2": float, "beta": float, "gamma": float,
        "staged_step": int, "stage_order": str,
    },
    "model": {"token_count": int, "attention_heads": int, "decoder_hidden_dims": list, "activation": str},
    "train": {
        "epochs": int, "batch_size": int, "base_lr": float, "weight_decay": float,
        "lr_halving_period_epochs": int, "ablation": str,
        "use_dst": bool, "use_attention_interaction": bool, "use_dsl": bool,
    },
    "sampling": {"noise_scale": float, "stride": int, "record_trajectory": bool},
    "paths": {"data": str, "out": str, "ckpt": str, "report": str},
}
_TYPE_NAMES = {int: "an integer", float: "a number", bool: "true/false", str: "a string", list: "a list"}


def _coerce(key, value, kind):
    kind = {"int": int, "float": float, "bool": bool, "str": str}.get(kind, kind)
    ok = {
        bool: isinstance(value, bool),
        int: isinstance(value, int) and not isinstance(value, bool),
        float: isinstance(value, (int, float)) and not isinstance(value, bool),
        str: isinstance(value, str),
        list: value is None or isinstance(value, list),
    }[kind]
    if not ok:
        raise ConfigError(f"{key} must be {_TYPE_NAMES[kind]}, got {value!r}", key=key)
    return float(value) if kind is float else value


@dataclass
class RunConfig:
    seed: int = 0
    data: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    sampling: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, raw):
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping at the top level", key="<root>")
        out = cls()
        for key, value in raw.items():
            if key == "seed":
                out.seed = _coerce("seed", value, int)
                continue
            if key not in _SCHEMA:
                raise ConfigError(f"unknown key {key!r}", key=str(key))
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"section {key} must be a mapping", key=key)
            section = {}
            for sub, v in value.items():
                dotted = f"{key}.{sub}"
                if sub not in _SCHEMA[key]:
                    raise ConfigError(f"unknown key {dotted!r}", key=dotted)
                section[sub] = _coerce(dotted, v, _SCHEMA[key][sub])
            setattr(out, key, section)
        out._check()
        return out

    def _check(self):
        name = self.data.get("preset")
        if name is not None and name not in PRESETS:
            raise ConfigError(f"data.preset must be one of {sorted(PRESETS)}", key="data.preset")
        ablation = self.train.get("ablation")
        if ablation is not None and ablation not in ABLATIONS:
            raise ConfigError(f"train.ablation must be one of {sorted(ABLATIONS)}", key="train.ablation")
        for section, build in (
            ("data", self.synthetic_spec),
            ("train", self.train_config),
            ("model", self.denoiser_kwargs),
            ("sampling", self.sampling_options),
        ):
            try:
                spec = build()
                if section == "data":
                    spec.validate()
                if section == "model":
                    DenoiserConfig(feature_dim=self.synthetic_spec().feature_dim, **spec)
            except (InvalidArgumentError, TypeError, ValueError) as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"invalid {section} settings: {exc}", key=section) from None

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    def synthetic_spec(self):
        values = {k: v for k, v in self.data.items() if k != "preset"}
        if "preset" in self.data:
            return preset(self.data["preset"], seed=self.seed, **values)
        return SyntheticSpec(seed=self.seed, **values)

    def loss_config(self):
        return StagedLossConfig(**self.loss)

    def train_config(self, ablation=None):
        values = {k: v for k, v in self.train.items() if k != "ablation"}
        config = TrainConfig(**self.schedule, **values, loss=self.loss_config(), seed=self.seed)
        ablation = ablation or self.train.get("ablation")
        if ablation is not None:
            config = apply_ablation(config, ablation)
        return config

    def denoiser_kwargs(self):
        kwargs = dict(self.model)
        if kwargs.get("decoder_hidden_dims") is not None:
            kwargs["decoder_hidden_dims"] = tuple(kwargs["decoder_hidden_dims"])
        return kwargs

    def sampling_options(self):
        return SamplingOptions(**self.sampling)


def bundled_configs():
    return sorted(
        p.name[: -len(".yaml")] for p in resources.files("seda.configs").iterdir() if p.name.endswith(".yaml")
    )


def resolve_config_path(path):
    """A filesystem path, or the name of a config shipped with the package."""
    if os.path.exists(path):
        return path
    if path in bundled_configs():
        return str(resources.files("seda.configs").joinpath(f"{path}.yaml"))
    raise ConfigError(f"config file {path!r} not found", key="--config")


def load_config(path, seed=None, environ=None):
    """Read a run config and apply the seed precedence."""
    with open(resolve_config_path(path)) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"could not parse {path}: {exc}".splitlines()[0], key="<root>") from None
    config = RunConfig.from_mapping(raw)
    environ = os.environ if environ is None else environ
    if seed is not None:
        return config.with_seed(seed)
    if environ.get(SEED_ENV, "") != "":
        try:
            return config.with_seed(int(environ[SEED_ENV]))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer", key=SEED_ENV) from None
    return config
