"""Per-modality branch encoders: toy 2D-CNN backbones and the TCN."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import CausalConv1d, Conv2d, Linear, Module


@dataclass(frozen=True)
class BackboneSpec:
    input_shape: tuple[int, int, int]
    channels: tuple[int, ...] = (8, 16, 32)
    output_dim: int = 64
    kernel: int = 3

    def __post_init__(self):
        if len(self.channels) != 3:
            raise ValueError("a backbone has exactly three stages (one per unfreezable group)")


@dataclass(frozen=True)
class TcnSpec:
    input_dim: int
    levels: int = 6
    kernel: int = 3
    channels: int = 64
    dropout: float = 0.1
    residual: bool = True
    dilations: tuple[int, ...] = field(default=())

    def dilation(self, level: int) -> int:
        return self.dilations[level] if self.dilations else 2 ** level

    @property
    def receptive_field(self) -> int:
        # two convolutions per level
        return 1 + sum(2 * (self.kernel - 1) * self.dilation(i) for i in range(self.levels))


class BackboneStage(Module):
    def __init__(self, c_in, c_out, k, group, rng, dtype):
        self.conv = Conv2d(c_in, c_out, k, stride=2, padding=k // 2, rng=rng, dtype=dtype)
        self.group = group

    def __call__(self, x: Tensor) -> Tensor:
        # channels-last inside the backbone
        c = self.conv
        return ad.relu(ad.conv2d_nhwc(x, c.weight, c.bias, c.stride, c.padding))


class Backbone(Module):
    """Three stride-2 conv stages, global average pool, linear projection.

    Stage 1 (input side) is group 3, stage 3 plus the projection is group 1.
    """

    def __init__(self, spec: BackboneSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        c = spec.input_shape[0]
        chans = (c,) + tuple(spec.channels)
        self.stages = [BackboneStage(chans[i], chans[i + 1], spec.kernel, 3 - i, rng, dtype) for i in range(3)]
        self.proj = Linear(chans[-1], spec.output_dim, rng, dtype)
        self.proj.group = 1

    def param_groups(self, prefix: str = "") -> dict[str, int]:
        groups = {}
        for i, stage in enumerate(self.stages):
            for name, _ in stage.named_parameters(f"{prefix}stages.{i}."):
                groups[name] = stage.group
        for name, _ in self.proj.named_parameters(f"{prefix}proj."):
            groups[name] = 1
        return groups

    def __call__(self, frames: Tensor) -> Tensor:
        if tuple(frames.shape[-3:]) != tuple(self.spec.input_shape):
            raise ValueError(f"backbone expects frames of shape {self.spec.input_shape}, got {frames.shape[-3:]}")
        lead = frames.shape[:-3]
        x = ad.reshape(frames, (-1,) + tuple(self.spec.input_shape))
        x = ad.transpose(x, (0, 2, 3, 1))
        for stage in self.stages:
            x = stage(x)
        x = ad.mean(x, axis=(1, 2))
        x = self.proj(x)
        return ad.reshape(x, lead + (self.spec.output_dim,))


class TemporalBlock(Module):
    def __init__(self, c_in, c_out, k, dilation, p, residual, rng, dtype):
        self.conv1 = CausalConv1d(c_in, c_out, k, dilation, rng, dtype)
        self.conv2 = CausalConv1d(c_out, c_out, k, dilation, rng, dtype)
        self.downsample = CausalConv1d(c_in, c_out, 1, 1, rng, dtype) if residual and c_in != c_out else None
        self.p = p
        self.residual = residual

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        h = ad.dropout(ad.relu(self.conv1(x)), self.p, training, rng)
        h = ad.dropout(ad.relu(self.conv2(h)), self.p, training, rng)
        if not self.residual:
            return h
        res = x if self.downsample is None else self.downsample(x)
        return ad.relu(h + res)


class TCN(Module):
    def __init__(self, spec: TcnSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.blocks = []
        c_in = spec.input_dim
        for i in range(spec.levels):
            self.blocks.append(TemporalBlock(c_in, spec.channels, spec.kernel, spec.dilation(i),
                                             spec.dropout, spec.residual, rng, dtype))
            c_in = spec.channels

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        if x.shape[-2] < 1:
            raise ValueError("TCN needs at least one timestep")
        for block in self.blocks:
            x = block(x, training, rng)
        return x


class Branch(Module):
    """Optional spatial backbone followed by a TCN over time.

    Linguistic branches have no backbone and take pre-extracted features.
    """

    def __init__(self, tcn_spec: TcnSpec, rng: np.random.Generator, backbone: BackboneSpec | None = None,
                 dtype=np.float32):
        self.backbone = Backbone(backbone, rng, dtype) if backbone is not None else None
        self.tcn = TCN(tcn_spec, rng, dtype)

    def param_groups(self, prefix: str = "") -> dict[str, int]:
        groups = {name: 0 for name, _ in self.named_parameters(prefix)}
        if self.backbone is not None:
            groups.update(self.backbone.param_groups(f"{prefix}backbone."))
        return groups

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        if self.backbone is None:
            if x.shape[-1] != self.tcn.spec.input_dim:
                raise ValueError(f"feature width {x.shape[-1]} != expected {self.tcn.spec.input_dim}")
        else:
            x = self.backbone(x)
        return self.tcn(x, training, rng)


def backbone_forward(frames: Tensor, backbone: Backbone) -> Tensor:
    return backbone(frames)


def tcn_forward(x: Tensor, tcn: TCN, training: bool = False, rng=None) -> Tensor:
    return tcn(x, training, rng)


def linguistic_branch_forward(tokens: Tensor, branch: Branch, training: bool = False, rng=None) -> Tensor:
    if branch.backbone is not None:
        raise ValueError("linguistic branch must not have a backbone")
    return branch(tokens, training, rng)
