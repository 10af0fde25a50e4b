"""Structured run configuration: dataclass sections, TOML loading, validation.

A run is described by one config file with sections [data], [model],
[model.prior], [model.vfe], [train], [noise], [eval].  Command-line flags
override file values, file values override defaults.  Unknown keys are hard
errors, and every artifact (dataset, checkpoint, report) embeds the fully
resolved config for provenance.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field, fields
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid or inconsistent configuration. Carries all problems at once."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in problems))


@dataclass(frozen=True)
class GeneratorConfig:
    """[data] section: synthetic utterance generation and codec table sizes."""

    P: int = 40            # phoneme vocabulary
    S: int = 16            # speakers
    V: int = 64            # codebook entries per stream (MASK = V is reserved)
    frame_rate: int = 80   # codec frames per second
    dur_min: int = 2       # per-phoneme duration range, frames
    dur_max: int = 12
    table_seed: int = 1234
    n_phonemes_min: int = 6
    n_phonemes_max: int = 24
    content_offset_cap: int = 32   # within-phoneme offsets encoded distinctly
    detail_period: int = 4         # K: frame-phase period of the detail hash
    pitch_lo: float = 60.0
    pitch_hi: float = 400.0
    energy_lo: float = 0.1
    energy_hi: float = 8.0
    smoothing: int = 3             # contour box-smoothing window, frames
    timbre_dim: int = 8

    def validate(self) -> list[str]:
        probs = []
        if self.P < 2:
            probs.append(f"data.P must be >= 2, got {self.P}")
        if self.V < 4:
            probs.append(f"data.V must be >= 4, got {self.V}")
        if self.dur_min < 1 or self.dur_max < self.dur_min:
            probs.append(f"data.dur range [{self.dur_min},{self.dur_max}] is empty or non-positive")
        if self.S < 1:
            probs.append(f"data.S must be >= 1, got {self.S}")
        if self.frame_rate < 1:
            probs.append(f"data.frame_rate must be >= 1, got {self.frame_rate}")
        if self.n_phonemes_min < 1 or self.n_phonemes_max < self.n_phonemes_min:
            probs.append("data.n_phonemes range is empty")
        if self.content_offset_cap < 1:
            probs.append("data.content_offset_cap must be >= 1")
        if self.P * self.content_offset_cap >= self.V * self.V:
            probs.append(
                f"data.P * content_offset_cap = {self.P * self.content_offset_cap} must be "
                f"< V^2 = {self.V * self.V} so undecodable content pairs exist"
            )
        if self.detail_period < 1:
            probs.append("data.detail_period must be >= 1")
        if not (self.pitch_lo < self.pitch_hi):
            probs.append("data.pitch range is empty")
        if not (self.energy_lo < self.energy_hi):
            probs.append("data.energy range is empty")
        if self.smoothing < 1:
            probs.append("data.smoothing must be >= 1")
        return probs


@dataclass(frozen=True)
class BlockConfig:
    """Transformer stack dimensions, one instance per sub-network."""

    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 256
    n_layers: int = 2
    dropout: float = 0.1

    def validate(self, name: str) -> list[str]:
        probs = []
        if self.d_model < 1 or self.n_heads < 1 or self.d_ffn < 1 or self.n_layers < 0:
            probs.append(f"{name}: dimensions must be positive")
        elif self.d_model % self.n_heads != 0:
            probs.append(f"{name}: d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            probs.append(f"{name}: dropout must be in [0,1)")
        return probs


@dataclass(frozen=True)
class PriorNetConfig(BlockConfig):
    """[model.prior]: phoneme encoder + shared decoder + 6 stream-specific blocks."""

    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 256
    n_layers: int = 2          # encoder FFT blocks
    decoder_layers: int = 2    # shared decoder FFT blocks


@dataclass(frozen=True)
class VfeNetConfig(BlockConfig):
    """[model.vfe]: the velocity network over folded latents. d_model doubles as D'."""

    d_model: int = 128
    n_heads: int = 8
    d_ffn: int = 512
    n_layers: int = 4


@dataclass(frozen=True)
class ModelConfig:
    """[model] section: shared latent sizes, tau parameterization, flow variant."""

    code_dim: int = 32                 # D: embedding dim of codec tokens
    tau_mode: str = "learned_global"   # fixed | learned_global | predicted
    tau_init: float = 0.5
    tau_min: float = 1e-3
    sigma_train: float = 1.0           # stddev of noise added to prior latents
    sigma_infer: float = 0.0
    anchor_logits: str = "dot"         # dot | neg_sqdist
    flow_mode: str = "prior_onestep"   # prior_onestep | classical
    prior_latents: str = "discrete"    # discrete (embed argmax codes) | continuous
    prior: PriorNetConfig = field(default_factory=PriorNetConfig)
    vfe: VfeNetConfig = field(default_factory=VfeNetConfig)

    def validate(self) -> list[str]:
        probs = []
        if self.code_dim < 1:
            probs.append("model.code_dim must be positive")
        if self.tau_mode not in ("fixed", "learned_global", "predicted"):
            probs.append(f"model.tau_mode unknown: {self.tau_mode!r}")
        if not 0.0 < self.tau_min < 0.5:
            probs.append("model.tau_min must be in (0, 0.5)")
        if not 0.0 < self.tau_init < 1.0:
            probs.append("model.tau_init must be in (0,1)")
        if self.sigma_train < 0 or self.sigma_infer < 0:
            probs.append("model.sigma_* must be >= 0")
        if self.anchor_logits not in ("dot", "neg_sqdist"):
            probs.append(f"model.anchor_logits unknown: {self.anchor_logits!r}")
        if self.flow_mode not in ("prior_onestep", "classical"):
            probs.append(f"model.flow_mode unknown: {self.flow_mode!r}")
        if self.prior_latents not in ("discrete", "continuous"):
            probs.append(f"model.prior_latents unknown: {self.prior_latents!r}")
        probs += self.prior.validate("model.prior")
        probs += self.vfe.validate("model.vfe")
        return probs


@dataclass(frozen=True)
class TrainConfig:
    """[train] section."""

    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 1e-4
    max_steps: int = 20_000
    grad_clip: float = 1.0
    warmup_steps: int = 1000
    prompt_strategy: str = "arbitrary_segment"   # first_segment | arbitrary_segment
    prompt_min_sec: float = 1.0
    prompt_max_sec: float = 3.0
    w_prior: float = 1.0
    w_dur: float = 1.0
    w_cfm: float = 1.0
    w_anchor: float = 1.0
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 50

    def validate(self) -> list[str]:
        probs = []
        if self.batch_size < 1:
            probs.append("train.batch_size must be >= 1")
        if self.lr <= 0:
            probs.append("train.lr must be positive")
        if self.max_steps < 1:
            probs.append("train.max_steps must be >= 1")
        if self.prompt_strategy not in ("first_segment", "arbitrary_segment"):
            probs.append(f"train.prompt_strategy unknown: {self.prompt_strategy!r}")
        if not (0 < self.prompt_min_sec <= self.prompt_max_sec):
            probs.append("train.prompt range must satisfy 0 < min <= max")
        if self.checkpoint_every < 1 or self.log_every < 1:
            probs.append("train.checkpoint_every and log_every must be >= 1")
        return probs


@dataclass(frozen=True)
class NoiseConfig:
    """[noise] section: prompt-noise fine-tuning."""

    enabled: bool = False
    prob: float = 0.8
    snr_lo_db: float = 0.0
    snr_hi_db: float = 15.0

    def validate(self) -> list[str]:
        probs = []
        if not 0.0 <= self.prob <= 1.0:
            probs.append("noise.prob must be in [0,1]")
        if self.snr_hi_db < self.snr_lo_db:
            probs.append("noise SNR range is empty")
        return probs


@dataclass(frozen=True)
class EvalConfig:
    """[eval] section: benchmark protocol defaults."""

    prompt_lengths_sec: tuple[float, ...] = (1.0, 3.0, 5.0)
    snr_grid_db: tuple[float, ...] = (math.inf, 12.0, 6.0, 0.0)
    n_samples: int = 64
    seed: int = 0

    def validate(self) -> list[str]:
        probs = []
        if not self.prompt_lengths_sec or any(s <= 0 for s in self.prompt_lengths_sec):
            probs.append("eval.prompt_lengths_sec must be positive")
        if self.n_samples < 1:
            probs.append("eval.n_samples must be >= 1")
        return probs


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved view of every section."""

    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        probs = (
            self.data.validate()
            + self.model.validate()
            + self.train.validate()
            + self.noise.validate()
            + self.eval.validate()
        )
        if probs:
            raise ConfigError(probs)
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        """Canonical JSON (inf encoded as a string so it round-trips)."""
        return json.dumps(_encode_inf(self.to_dict()), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


# Paper-scale preset, selectable as model="paper" in [model]; desk sizes are the defaults.
PAPER_SCALE_MODEL = dict(
    code_dim=1024,
    prior=dict(d_model=256, n_heads=4, d_ffn=1024, n_layers=2, decoder_layers=2),
    vfe=dict(d_model=1024, n_heads=32, d_ffn=4096, n_layers=4),
)


def _encode_inf(obj):
    if isinstance(obj, dict):
        return {k: _encode_inf(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode_inf(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def _decode_inf(obj):
    if isinstance(obj, dict):
        return {k: _decode_inf(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode_inf(v) for v in obj]
    if obj == "inf":
        return math.inf
    if obj == "-inf":
        return -math.inf
    return obj


def _build_section(cls, raw: dict, prefix: str, problems: list[str], nested: dict | None = None):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if nested and key in nested:
            continue
        if key not in known:
            problems.append(f"unknown key {prefix}.{key}")
            continue
        ftype = known[key].type
        if isinstance(value, list):
            value = tuple(value)
        if isinstance(value, int) and not isinstance(value, bool) and "float" in str(ftype):
            value = float(value)
        kwargs[key] = value
    if nested:
        for key, builder in nested.items():
            if key in raw:
                kwargs[key] = builder(raw[key], problems)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        problems.append(f"section {prefix}: {exc}")
        return cls()


def config_from_dict(raw: dict[str, Any]) -> RunConfig:
    """Build a RunConfig from a nested dict, rejecting unknown keys all at once."""
    problems: list[str] = []
    raw = _decode_inf(dict(raw))
    sections = {"data", "model", "train", "noise", "eval"}
    for key in raw:
        if key not in sections:
            problems.append(f"unknown section [{key}]")

    data = _build_section(GeneratorConfig, raw.get("data", {}), "data", problems)
    model_raw = dict(raw.get("model", {}))
    preset = model_raw.pop("preset", None)
    if preset == "paper":
        merged = dict(PAPER_SCALE_MODEL)
        merged.update(model_raw)
        model_raw = merged
    elif preset not in (None, "desk"):
        problems.append(f"model.preset unknown: {preset!r}")
    model = _build_section(
        ModelConfig,
        model_raw,
        "model",
        problems,
        nested={
            "prior": lambda r, p: _build_section(PriorNetConfig, r, "model.prior", p),
            "vfe": lambda r, p: _build_section(VfeNetConfig, r, "model.vfe", p),
        },
    )
    train = _build_section(TrainConfig, raw.get("train", {}), "train", problems)
    noise = _build_section(NoiseConfig, raw.get("noise", {}), "noise", problems)
    eval_cfg = _build_section(EvalConfig, raw.get("eval", {}), "eval", problems)
    if problems:
        raise ConfigError(problems)
    return RunConfig(data=data, model=model, train=train, noise=noise, eval=eval_cfg).validate()


def load_config(path: str, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Load a TOML config file and apply dotted-key overrides (CLI flags win)."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    for dotted, value in (overrides or {}).items():
        node = raw
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return config_from_dict(raw)


def config_from_json(text: str) -> RunConfig:
    """Rebuild a RunConfig from its embedded canonical-JSON form."""
    return config_from_dict(json.loads(text))
