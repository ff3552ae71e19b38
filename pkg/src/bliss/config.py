"""Flat experiment configuration.

Config files are ``key = value`` lines; ``#`` starts a comment.  Every key is
a field of :class:`Config`; unknown keys and unparsable values are rejected
with the offending key in the message.  Defaults follow the published
hyperparameter table where one exists.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import torch

from .bilevel import GdlsConfig, LowerConfig, UpperConfig
from .data import CorpusSpec
from .models import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    seed: int = 0
    out_dir: str = "runs/default"
    arm: str = "bliss"  # bliss | random
    dtype: str = "float32"
    shard_parallelism: int = 1
    weighting: str = "softmax"  # softmax | naive

    # corpus
    num_seqs: int = 10000
    vocab_size: int = 256
    seq_len: int = 64
    noise_fraction: float = 0.5
    val_seqs: int = 256
    heldout_seqs: int = 512

    # models
    proxy_d_model: int = 64
    proxy_n_layers: int = 2
    proxy_n_heads: int = 2
    target_d_model: int = 128
    target_n_layers: int = 4
    target_n_heads: int = 4
    init_std: float = 0.02

    # lower level
    gamma: float = 1e-2
    lam: float = 1e-6
    eta1: float = 1e-5
    inner_steps: int = 1

    # linear-system solve
    gdls_eta: float = 1e-2
    gdls_steps: int = 3
    gdls_warm_start: bool = True
    gdls_guard: bool = True

    # upper level
    eta3: float = 1e-5
    t_steps: int = 3000
    batch_size: int = 16

    # rounds
    rounds: int = 5
    select_fraction: float = 0.2
    bilevel_fraction: float = 0.001
    retrain_steps: int = 10000
    eta4: float = 1e-3
    retrain_batch_size: int = 16
    warmup_steps: int = 1000  # proxy (and hence score body)
    warmup_lr: float = 1e-3
    target_warmup_steps: int = 1000
    target_warmup_lr: float = 1e-3
    random_first_round: bool = True
    proxy_reset_policy: str = "per_round"  # per_round | periodic
    reset_every: int = 50
    distill_steps: int = 240
    distill_lr: float = 1e-3
    periodic_inner_steps: int = 4
    score_init_policy: str = "carry_over"  # carry_over | reset_to_round1

    def __post_init__(self):
        choices = {
            "arm": ("bliss", "random"),
            "dtype": ("float32", "float64"),
            "weighting": ("softmax", "naive"),
            "proxy_reset_policy": ("per_round", "periodic"),
            "score_init_policy": ("carry_over", "reset_to_round1"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key}: must be one of {allowed}, got {getattr(self, key)!r}")
        if not 0 < self.select_fraction <= 1:
            raise ConfigError("select_fraction: must lie in (0, 1]")
        if not 0 < self.bilevel_fraction <= 1:
            raise ConfigError("bilevel_fraction: must lie in (0, 1]")
        if self.shard_parallelism < 1:
            raise ConfigError("shard_parallelism: must be at least 1")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and v < 0:
                raise ConfigError(f"{f.name}: must be non-negative")
        # delegate the remaining invariants to the component configs
        for build in (self.lower, self.gdls, self.upper, self.proxy_config, self.target_config):
            try:
                build()
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc

    # -- component views --------------------------------------------------
    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def proxy_config(self) -> ModelConfig:
        return ModelConfig(self.vocab_size, self.seq_len, self.proxy_d_model,
                           self.proxy_n_layers, self.proxy_n_heads, "proxy")

    def target_config(self) -> ModelConfig:
        return ModelConfig(self.vocab_size, self.seq_len, self.target_d_model,
                           self.target_n_layers, self.target_n_heads, "target")

    def lower(self) -> LowerConfig:
        if self.proxy_reset_policy == "periodic":
            return LowerConfig(0.0, self.lam, self.eta1, self.periodic_inner_steps)
        return LowerConfig(self.gamma, self.lam, self.eta1, self.inner_steps)

    def gdls(self) -> GdlsConfig:
        return GdlsConfig(self.gdls_eta, self.gdls_steps, self.gdls_warm_start, self.gdls_guard)

    def upper(self) -> UpperConfig:
        return UpperConfig(self.eta3, self.t_steps)

    def corpus(self, which: str = "train") -> CorpusSpec:
        if which == "train":
            return CorpusSpec(self.num_seqs, self.vocab_size, self.seq_len,
                              self.noise_fraction, self.seed, stream=0)
        n, stream = {"val": (self.val_seqs, 1), "heldout": (self.heldout_seqs, 2)}[which]
        return CorpusSpec(n, self.vocab_size, self.seq_len, 0.0, self.seed, stream)

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)


_FIELDS = {f.name: f for f in fields(Config)}


def _parse_value(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"{key}: unknown configuration key")
    kind = _FIELDS[key].type
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def parse_overrides(lines) -> dict:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        out[key] = _parse_value(key, value)
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> Config:
    values = {}
    if path is not None:
        values.update(parse_overrides(Path(path).read_text().splitlines()))
    values.update(overrides or {})
    try:
        return Config(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: Config) -> str:
    lines = ["# effective configuration"]
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else v}")
    return "\n".join(lines) + "\n"
