"""Run configuration: defaults, flat key=value files, CLI overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .models import MODALITIES, ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: str = "can"
    modalities: tuple[str, ...] = ()      # empty -> visual,audio for CAN; all three for LFAN
    leader: str = "visual"
    fold: str = "0"
    seeds: tuple[int, ...] = (1,)
    fold_seed: int = 0
    window: int = 300
    hop: int = 200
    batch_size: int = 12
    lr: float = 1e-5
    min_lr: float = 1e-8
    weight_decay: float = 1e-3
    patience: int = 5
    factor: float = 0.1
    max_epoch: int = 100
    early_stop: int = 20
    warmup_epochs: int = 5
    monitor: str = "mean"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    crop: int = 40
    train_tail: bool = True
    d_attn: int = 32
    d_fused: int = 64
    tcn_levels: int = 6
    tcn_kernel: int = 3
    tcn_channels: int = 64
    dropout: float = 0.1
    backbone_channels: tuple[int, ...] = (16, 32, 64)
    n_patch: int = 4
    store: str = ""
    out: str = "runs"
    folds_file: str = ""

    @property
    def effective_modalities(self) -> tuple[str, ...]:
        if self.modalities:
            return tuple(self.modalities)
        return ("visual", "audio", "linguistic") if self.model == "lfan" else ("visual", "audio")

    def validate(self) -> "RunConfig":
        def bad(name, why):
            raise ConfigError(f"invalid config field {name!r}: {why}")

        if self.model not in ("lfan", "can"):
            bad("model", f"{self.model!r} not in lfan/can")
        for m in self.effective_modalities:
            if m not in MODALITIES:
                bad("modalities", f"unknown modality {m!r}")
        if self.model == "lfan" and len(self.effective_modalities) > 1 and self.leader not in self.effective_modalities:
            bad("leader", f"{self.leader!r} is not an active modality")
        if self.fold != "all" and not (self.fold.isdigit() and 0 <= int(self.fold) <= 5):
            bad("fold", f"{self.fold!r} is not 0-5 or 'all'")
        if not self.seeds:
            bad("seeds", "at least one seed")
        if self.window <= 0:
            bad("window", "must be positive")
        if not 0 < self.hop <= self.window:
            bad("hop", "must satisfy 0 < hop <= window")
        if not 1 <= self.batch_size:
            bad("batch_size", "must be >= 1")
        if not 0 < self.min_lr <= self.lr:
            bad("min_lr", "must satisfy 0 < min_lr <= lr")
        if not 0 < self.factor < 1:
            bad("factor", "must be in (0, 1)")
        if self.patience < 0 or self.early_stop < 1 or self.max_epoch < 1 or self.warmup_epochs < 0:
            bad("patience/early_stop/max_epoch/warmup_epochs", "out of range")
        if self.weight_decay < 0:
            bad("weight_decay", "must be >= 0")
        if self.monitor not in ("mean", "valence", "arousal"):
            bad("monitor", f"{self.monitor!r} not in mean/valence/arousal")
        if not 0 <= self.dropout < 1:
            bad("dropout", "must be in [0, 1)")
        if not 0 < self.crop <= 48:
            bad("crop", "must be in (0, 48]")
        if len(self.backbone_channels) != 3:
            bad("backbone_channels", "three stage widths")
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(model=self.model, modalities=self.effective_modalities, leader=self.leader,
                           d_attn=self.d_attn, d_fused=self.d_fused, tcn_levels=self.tcn_levels,
                           tcn_kernel=self.tcn_kernel, tcn_channels=self.tcn_channels, dropout=self.dropout,
                           backbone_channels=tuple(self.backbone_channels), visual_size=self.crop,
                           n_patch=self.n_patch)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, default, raw: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if name in ("seeds", "backbone_channels"):
                return tuple(int(x) for x in items)
            return tuple(items)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"invalid config field {name!r}: cannot parse {raw!r}") from None


def parse_overrides(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    changes = {}
    for key, raw in pairs.items():
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"invalid config field {key!r}: unknown key")
        changes[key] = _coerce(key, known[key], str(raw))
    return base.replace(**changes)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def read_config_file(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(), str(path))


def loads(text: str) -> RunConfig:
    """Inverse of ``RunConfig.dumps``."""
    return parse_overrides(parse_config_text(text)).validate()


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults < config file < explicit overrides."""
    cfg = RunConfig()
    if path:
        cfg = parse_overrides(read_config_file(path), cfg)
    if overrides:
        cfg = parse_overrides(overrides, cfg)
    return cfg.validate()
