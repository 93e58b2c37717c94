"""LFAN / CAN model assembly with layer-group tags for progressive unfreezing."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor
from .blocks import BackboneSpec, Branch, TcnSpec
from .fusion import ChannelAttention, FusionOutput, LeaderFollowerAttention, RegressionHead
from .layers import Module

MODALITIES = ("visual", "audio", "linguistic")


@dataclass(frozen=True)
class ModelConfig:
    model: str = "can"
    modalities: tuple[str, ...] = ("visual", "audio")
    leader: str = "visual"
    d_attn: int = 32
    d_fused: int = 64
    tcn_levels: int = 6
    tcn_kernel: int = 3
    tcn_channels: int = 64
    dropout: float = 0.1
    backbone_channels: tuple[int, ...] = (16, 32, 64)
    visual_size: int = 40
    mel_bins: int = 64
    n_patch: int = 4
    ling_dim: int = 768

    def __post_init__(self):
        if self.model not in ("lfan", "can"):
            raise ValueError(f"unknown model {self.model!r}")
        if not self.modalities:
            raise ValueError("at least one modality is required")
        bad = [m for m in self.modalities if m not in MODALITIES]
        if bad:
            raise ValueError(f"unknown modalities {bad}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ValueError("duplicate modality")
        if len(self.modalities) > 1 and self.model == "lfan" and self.leader not in self.modalities:
            raise ValueError(f"leader {self.leader!r} is not among the modalities")

    @property
    def ordered_modalities(self) -> list[str]:
        return [m for m in MODALITIES if m in self.modalities]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["modalities"] = tuple(d["modalities"])
        d["backbone_channels"] = tuple(d["backbone_channels"])
        return cls(**d)

    def input_shape(self, modality: str) -> tuple[int, ...]:
        if modality == "visual":
            return (3, self.visual_size, self.visual_size)
        if modality == "audio":
            return (1, self.mel_bins, self.n_patch)
        return (self.ling_dim,)


class EmotionModel(Module):
    """Branches -> fusion -> valence/arousal head.

    With a single modality the fusion block is skipped and the head reads the
    branch output directly.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        d = config.tcn_channels
        self.branches = {}
        for m in config.ordered_modalities:
            if m == "linguistic":
                tcn = TcnSpec(config.ling_dim, config.tcn_levels, config.tcn_kernel, d, config.dropout)
                self.branches[m] = Branch(tcn, rng, None, dtype)
            else:
                bb = BackboneSpec(config.input_shape(m), tuple(config.backbone_channels), d)
                tcn = TcnSpec(d, config.tcn_levels, config.tcn_kernel, d, config.dropout)
                self.branches[m] = Branch(tcn, rng, bb, dtype)
        n = len(self.branches)
        if n == 1:
            self.fusion = None
            head_in = d
        elif config.model == "lfan":
            leader = config.ordered_modalities.index(config.leader)
            self.fusion = LeaderFollowerAttention(n, d, config.d_attn, config.d_fused, leader, rng, dtype)
            head_in = config.d_fused
        else:
            self.fusion = ChannelAttention(n, d, rng, dtype)
            head_in = d
        self.head = RegressionHead(head_in, rng, dtype)

    def named_parameters(self, prefix: str = ""):
        for m, branch in self.branches.items():
            yield from branch.named_parameters(f"{prefix}{m}.")
        if self.fusion is not None:
            yield from self.fusion.named_parameters(f"{prefix}fusion.")
        yield from self.head.named_parameters(f"{prefix}head.")

    def param_groups(self) -> dict[str, int]:
        """Parameter name -> unfreeze group (0 = always trainable)."""
        groups = {name: 0 for name, _ in self.named_parameters()}
        for m, branch in self.branches.items():
            groups.update(branch.param_groups(f"{m}."))
        return groups

    def set_unfrozen(self, current_group: int) -> None:
        """Backbone groups 1..current_group train; the rest stay fixed."""
        groups = self.param_groups()
        for name, p in self.named_parameters():
            g = groups[name]
            p.requires_grad = g == 0 or g <= current_group
            if not p.requires_grad:
                p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=self.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, inputs: dict[str, np.ndarray | Tensor], training: bool = False,
                 rng: np.random.Generator | None = None) -> tuple[Tensor, FusionOutput | None]:
        feats = []
        for m, branch in self.branches.items():
            if m not in inputs:
                raise KeyError(f"model requires modality {m!r}")
            x = inputs[m]
            x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
            feats.append(branch(x, training, rng))
        if self.fusion is None:
            return self.head(feats[0]), None
        out = self.fusion(feats)
        return self.head(out.fused), out


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> EmotionModel:
    return EmotionModel(config, np.random.default_rng(seed), dtype)
