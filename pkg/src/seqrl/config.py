"""Experiment configuration: schema, loading and the objects it builds."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
import yaml

from .core import AMINO_ACIDS, Alphabet, RngStream
from .envs import AnnealSchedule, MutationEnv, seed_pool_by_bins
from .exceptions import InvalidConfig
from .policy import MarkovPolicy, MutationPolicy, PositionCategoricalPolicy
from .rewards import (
    LogisticScorer,
    NKLandscape,
    NoisyOracle,
    ThresholdClassifierReward,
    load_landscape_csv,
    make_phoq_like,
)
from .rl.types import RLConfig

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PolicySpec(_Strict):
    family: Literal["position_categorical", "markov", "mutation"] = "position_categorical"
    length: Optional[int] = Field(default=None, ge=1)
    alphabet: str = AMINO_ACIDS
    init: Literal["uniform", "random"] = "uniform"
    init_scale: float = Field(default=0.1, ge=0)


class NoiseSpec(_Strict):
    noise_sd: float = Field(default=0.0, ge=0)
    corruption_rate: float = Field(default=0.0, ge=0, le=1)


class LandscapeSpec(_Strict):
    kind: Literal["table", "nk", "phoq_like", "threshold_classifier"] = "phoq_like"
    seed: Optional[int] = None
    # table
    path: Optional[str] = None
    site_positions: Optional[list[int]] = None
    wild_type: Optional[str] = None
    # nk
    n: int = Field(default=6, ge=1)
    k: int = Field(default=2, ge=0)
    # phoq_like
    n_sites: int = Field(default=4, ge=1)
    high_fraction: float = Field(default=0.01, gt=0, le=1)
    labeled_fraction: float = Field(default=1.0, gt=0, le=1)
    zero_fraction: float = Field(default=0.3, ge=0, lt=1)
    epistasis: float = Field(default=0.5, ge=0)
    # threshold_classifier
    length: int = Field(default=8, ge=1)
    lam: float = 0.4
    noise: NoiseSpec = NoiseSpec()

    @model_validator(mode="after")
    def _table_fields(self):
        if self.kind == "table" and (self.path is None or self.site_positions is None or self.wild_type is None):
            raise ValueError("table landscapes need path, site_positions and wild_type")
        if self.kind == "nk" and self.k > self.n - 1:
            raise ValueError("nk landscapes need k <= n - 1")
        return self


class EnvSpec(_Strict):
    max_steps: int = Field(default=4, ge=1)
    mask: Optional[list[bool]] = None
    terminate_on_improvement: bool = False
    terminal_only: bool = False
    pool: Literal["wild_type", "bins"] = "wild_type"
    per_bin: int = Field(default=100, ge=1)
    anneal_start: float = Field(default=1.0, gt=0)
    anneal_end: float = Field(default=1.0, gt=0)
    anneal_steps: int = Field(default=0, ge=0)


class SamplingSpec(_Strict):
    temperature: float = Field(default=1.0, gt=0)
    top_p: float = Field(default=1.0, gt=0, le=1)
    samples_per_context: int = Field(default=32, ge=1)
    n_contexts: int = Field(default=16, ge=1)
    k_max: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _k_max(self):
        if self.k_max is not None and self.k_max > self.samples_per_context:
            raise ValueError("k_max cannot exceed samples_per_context")
        return self


class SuccessSpec(_Strict):
    threshold: Optional[float] = None


class ExperimentConfig(_Strict):
    schema_version: int = SCHEMA_VERSION
    name: str = "experiment"
    seed: int = Field(default=0, ge=0)
    task: Literal["generation", "mutation"] = "generation"
    policy: PolicySpec = PolicySpec()
    landscape: LandscapeSpec = LandscapeSpec()
    algorithm: Literal["ppo", "grpo", "dpo"] = "ppo"
    rl: dict = Field(default_factory=dict)
    steps: int = Field(default=100, ge=0)
    env: EnvSpec = EnvSpec()
    sampling: SamplingSpec = SamplingSpec()
    success: SuccessSpec = SuccessSpec()
    output_dir: str = "runs"

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}; expected {SCHEMA_VERSION}")
        return v

    @field_validator("rl")
    @classmethod
    def _rl(cls, v):
        unknown = sorted(set(v) - set(RLConfig.field_names()))
        if unknown:
            raise ValueError(f"unknown rl keys: {unknown}")
        RLConfig(**v)
        return v

    @model_validator(mode="after")
    def _task(self):
        if (self.task == "mutation") != (self.policy.family == "mutation"):
            raise ValueError("task 'mutation' requires policy family 'mutation' and vice versa")
        return self

    def rl_config(self):
        return RLConfig(**self.rl)

    def canonical_json(self):
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=1) + "\n"

    def digest(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _format_errors(exc):
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_config(data):
    try:
        return ExperimentConfig.model_validate(data or {})
    except ValidationError as exc:
        raise InvalidConfig(f"invalid config: {_format_errors(exc)}") from None


def load_config(path, seed=None):
    """Read a YAML or JSON config; ``seed`` overrides the file's seed."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InvalidConfig(f"config is not valid YAML/JSON: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise InvalidConfig("config must be a mapping")
    cfg = parse_config(data)
    if seed is not None:
        cfg = parse_config({**cfg.model_dump(), "seed": seed})
    return cfg


# -- builders ------------------------------------------------------------------


class Problem:
    """Everything a run needs that is derived from the config.

    ``reward`` is what the learner sees (possibly noisy); ``true_reward`` is
    the uncorrupted oracle used for evaluation.
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self.alphabet = Alphabet(cfg.policy.alphabet)
        spec = cfg.landscape
        seed = cfg.seed if spec.seed is None else spec.seed
        self.landscape_seed = seed
        a = self.alphabet.size
        self.table = None
        if spec.kind == "phoq_like":
            wt = spec.wild_type
            if wt is None:
                wt = "AVST" if spec.n_sites == 4 and set("AVST") <= set(self.alphabet.symbols) \
                    else self.alphabet.symbols[0] * spec.n_sites
            land = make_phoq_like(seed, spec.n_sites, self.alphabet, spec.high_fraction, spec.labeled_fraction,
                                  spec.zero_fraction, spec.epistasis, wt)
            self.table, self.true_reward, default_thr = land, land, land.success_threshold
            self.length, self.wild_type = land.wild_type.size, land.wild_type
        elif spec.kind == "table":
            land = load_landscape_csv(spec.path, spec.site_positions, spec.wild_type, self.alphabet)
            self.table, self.true_reward = land, land
            default_thr = land.top_fraction_threshold(spec.high_fraction)
            self.length, self.wild_type = land.wild_type.size, land.wild_type
        elif spec.kind == "nk":
            land = NKLandscape(spec.n, spec.k, a, seed)
            self.true_reward = land
            if a ** spec.n <= 5_000_000:
                self.table = land.to_table()
                default_thr = self.table.top_fraction_threshold(spec.high_fraction)
            else:
                default_thr = 0.7
            self.length = spec.n
            self.wild_type = np.zeros(spec.n, dtype=np.int64)
        else:
            w = RngStream(seed, 7).normal(size=(spec.length, a))
            self.true_reward = ThresholdClassifierReward(LogisticScorer(w), spec.lam)
            default_thr = 0.0
            self.length = spec.length
            self.wild_type = np.zeros(spec.length, dtype=np.int64)
        if cfg.policy.length is not None and cfg.policy.length != self.length:
            raise InvalidConfig(f"policy.length {cfg.policy.length} != landscape length {self.length}")
        self.threshold = cfg.success.threshold if cfg.success.threshold is not None else default_thr
        noise = spec.noise
        if noise.noise_sd or noise.corruption_rate:
            self.reward = NoisyOracle(self.true_reward, noise.noise_sd, noise.corruption_rate,
                                      RngStream(seed, 11), threshold=self.threshold)
        else:
            self.reward = self.true_reward

    def init_policy(self):
        pol = self.cfg.policy
        a, length = self.alphabet.size, self.length
        rng = RngStream(self.cfg.seed, 1)
        scale = pol.init_scale if pol.init == "random" else 0.0

        def draw(*shape):
            return scale * rng.normal(size=shape) if scale else np.zeros(shape)

        if pol.family == "position_categorical":
            return PositionCategoricalPolicy(draw(length, a))
        if pol.family == "markov":
            return MarkovPolicy(draw(a), draw(a, a), length)
        return MutationPolicy(draw(length), draw(length, a))

    def check_policy(self, policy):
        if policy.family != self.cfg.policy.family:
            raise InvalidConfig(f"checkpoint family {policy.family!r} != config {self.cfg.policy.family!r}")
        if policy.length != self.length or policy.alphabet_size != self.alphabet.size:
            raise InvalidConfig(
                f"checkpoint dimensions (L={policy.length}, A={policy.alphabet_size}) do not match "
                f"config (L={self.length}, A={self.alphabet.size})")

    def mask(self):
        m = self.cfg.env.mask
        if m is None:
            return np.ones(self.length, dtype=bool)
        if len(m) != self.length:
            raise InvalidConfig(f"env.mask has length {len(m)}, expected {self.length}")
        return np.asarray(m, dtype=bool)

    def pool(self):
        if self.cfg.env.pool == "bins":
            if self.table is None:
                raise InvalidConfig("env.pool 'bins' needs a table landscape")
            return seed_pool_by_bins(self.table, RngStream(self.cfg.seed, 2), self.cfg.env.per_bin)
        return self.wild_type[None, :]

    def env(self):
        e = self.cfg.env
        return MutationEnv(self.pool(), self.mask(), self.reward, e.max_steps, e.terminate_on_improvement,
                           e.terminal_only)

    def eval_env(self):
        e = self.cfg.env
        return MutationEnv(self.pool(), self.mask(), self.true_reward, e.max_steps, e.terminate_on_improvement,
                           e.terminal_only)

    def schedule(self):
        e = self.cfg.env
        return AnnealSchedule(e.anneal_start, e.anneal_end, e.anneal_steps)
