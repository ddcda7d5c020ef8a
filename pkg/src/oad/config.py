"""Flat key=value configuration shared by the CLI and the training loop."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


CHOICES = {
    "score_mode": ("raw", "softmax"),
    "cas_sign": ("intent", "verbatim"),
    "start_loss_norm": ("selected", "all"),
    "decay_mode": ("coupled", "decoupled"),
    "ap_interp": ("none", "11point"),
}


@dataclass
class Config:
    # model
    hidden_size: int = 64
    trunk_dim: int = 0            # 0 = same width as the input features

    # proposal generator
    kappa: int = 8                # top-k divisor: k = max(1, T // kappa)
    theta_class: float = 0.1      # video-probability gate
    theta_score: float = 0.0      # frame-score gate
    score_mode: str = "raw"
    cas_margin: float = 0.5
    cas_sign: str = "intent"
    group_gap: int = 0
    min_len: int = 1

    # recognizer
    pool_window: int = 3          # M; pools over the last M+1 hiddens
    focal_gamma: float = 2.0
    neg_ratio: int = 3
    start_loss_norm: str = "selected"
    seq_len: int = 64

    # optimization
    lr: float = 1e-4
    weight_decay: float = 5e-4
    decay_mode: str = "coupled"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    tpg_weight: float = 0.5       # lambda on the proposal losses
    refresh_interval: int = 100   # N; proposals refresh at iterations 0, N, 2N, ...
    batch_videos: int = 10
    epochs: int = 10
    seed: int = 7
    strong_ratio: float = 0.9     # ground-truth share among strong-capable videos
    strong_fraction: float = 1.0  # share of train videos that have segments at all

    # ablations
    no_tpg_loss: bool = False
    no_rnn: bool = False
    no_temporal_pool: bool = False
    no_start_head: bool = False

    # inference / evaluation
    start_threshold: float = 0.0
    ap_interp: str = "none"

    # synthetic corpus
    synth_classes: int = 4
    synth_dim: int = 16
    synth_train_per_class: int = 12
    synth_test_per_class: int = 6
    synth_len_min: int = 40
    synth_len_max: int = 120
    synth_action_ratio: float = 0.2
    synth_margin: float = 3.0
    synth_noise: float = 0.5
    synth_rate: float = 4.0
    synth_second_class_prob: float = 0.25

    def validate(self) -> "Config":
        if self.tpg_weight < 0:
            raise ConfigError("tpg_weight must be >= 0")
        if self.refresh_interval < 1:
            raise ConfigError("refresh_interval must be >= 1")
        if self.seq_len < 1 or self.batch_videos < 1:
            raise ConfigError("seq_len and batch_videos must be >= 1")
        if self.pool_window < 0:
            raise ConfigError("pool_window must be >= 0")
        if not 0.0 <= self.strong_ratio <= 1.0:
            raise ConfigError("strong_ratio must be in [0, 1]")
        if not 0.0 <= self.strong_fraction <= 1.0:
            raise ConfigError("strong_fraction must be in [0, 1]")
        for key, opts in CHOICES.items():
            if getattr(self, key) not in opts:
                raise ConfigError(f"{key} must be one of {opts}")
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not (v == v and abs(v) != float("inf")):
                raise ConfigError(f"{f.name} must be finite")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}


def _parse_value(key: str, text: str):
    f = _FIELDS[key]
    text = text.strip()
    if f.type in ("bool", bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if f.type in ("int", int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}")
    if f.type in ("float", float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}")
    return text


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse `key = value` lines; '#' starts a comment. Unknown keys error."""
    cfg = dataclasses.replace(base) if base else Config()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(
                f"line {lineno}: unknown key {key!r}; valid keys: "
                + ", ".join(sorted(_FIELDS)))
        setattr(cfg, key, _parse_value(key, value))
    return cfg.validate()


def load_config(path, base: Config | None = None) -> Config:
    return parse_config(Path(path).read_text(), base)


def serialize_config(cfg: Config) -> str:
    lines = []
    for f in dataclasses.fields(Config):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: Config, pairs) -> Config:
    """Apply `key=value` strings (CLI overrides) on top of a config."""
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = (part.strip() for part in pair.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}; valid keys: "
                              + ", ".join(sorted(_FIELDS)))
        setattr(cfg, key, _parse_value(key, value))
    return cfg.validate()


def config_hash(cfg: Config) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()
