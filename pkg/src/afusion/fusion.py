"""Leader-follower attention (LFAN), channel attention (CAN) and the regression head."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Linear, Module


@dataclass
class FusionOutput:
    fused: Tensor
    attention_weights: np.ndarray


def _check_branches(branches, minimum=2):
    if len(branches) < minimum:
        raise ValueError(f"fusion needs at least {minimum} branches, got {len(branches)}")
    ref = branches[0].shape
    for b in branches[1:]:
        if b.shape != ref:
            raise ValueError(f"branch shapes differ: {ref} vs {b.shape}")


class LeaderFollowerAttention(Module):
    """Leader query attends over timesteps of the cross-modal keys/values.

    Each branch gets its own query/key/value maps. Keys and values of all
    branches are regrouped (leader first, then followers in the given order)
    and concatenated along the feature axis. The leader query is tiled once
    per branch so that its score against the cross-modal keys is the sum of
    its per-branch dot products. The attended cross-modal values are joined
    with the leader's own feature and projected to the fused width.
    """

    def __init__(self, n_branches: int, d_in: int, d_attn: int, d_fused: int, leader: int,
                 rng: np.random.Generator, dtype=np.float32):
        if not 0 <= leader < n_branches:
            raise ValueError(f"leader index {leader} out of range for {n_branches} branches")
        self.leader = leader
        self.d_attn = d_attn
        self.query = [Linear(d_in, d_attn, rng, dtype) for _ in range(n_branches)]
        self.key = [Linear(d_in, d_attn, rng, dtype) for _ in range(n_branches)]
        self.value = [Linear(d_in, d_attn, rng, dtype) for _ in range(n_branches)]
        self.out = Linear(d_in + n_branches * d_attn, d_fused, rng, dtype)

    def order(self, n: int) -> list[int]:
        return [self.leader] + [i for i in range(n) if i != self.leader]

    def __call__(self, branches: list[Tensor]) -> FusionOutput:
        _check_branches(branches)
        if len(branches) != len(self.query):
            raise ValueError(f"expected {len(self.query)} branches, got {len(branches)}")
        order = self.order(len(branches))
        lead = branches[self.leader]
        q = self.query[self.leader](lead)
        keys = ad.concat([self.key[i](branches[i]) for i in order], axis=-1)
        values = ad.concat([self.value[i](branches[i]) for i in order], axis=-1)
        q_cross = ad.concat([q] * len(order), axis=-1)
        scores = ad.scale(q_cross @ ad.swapaxes(keys, -1, -2), 1.0 / math.sqrt(self.d_attn))
        weights = ad.softmax(scores, axis=-1)
        attended = weights @ values
        fused = self.out(ad.concat([lead, attended], axis=-1))
        return FusionOutput(fused, weights.data)


class ChannelAttention(Module):
    """Per-timestep softmax over modalities; fused = convex combination of branches."""

    def __init__(self, n_branches: int, d_in: int, rng: np.random.Generator, dtype=np.float32,
                 zero_init: bool = False):
        self.n = n_branches
        self.attn = Linear(n_branches * d_in, n_branches, rng, dtype, zero=zero_init)

    def __call__(self, branches: list[Tensor]) -> FusionOutput:
        _check_branches(branches)
        if len(branches) != self.n:
            raise ValueError(f"expected {self.n} branches, got {len(branches)}")
        logits = self.attn(ad.concat(branches, axis=-1))
        w = ad.softmax(logits, axis=-1)
        fused = None
        for i, b in enumerate(branches):
            term = w[..., i:i + 1] * b
            fused = term if fused is None else fused + term
        return FusionOutput(fused, w.data)


class RegressionHead(Module):
    def __init__(self, d_in: int, rng: np.random.Generator, dtype=np.float32, zero_init: bool = False):
        self.linear = Linear(d_in, 2, rng, dtype, zero=zero_init)

    def __call__(self, fused: Tensor) -> Tensor:
        return self.linear(fused)


def lfan_fuse(branches: list[Tensor], block: LeaderFollowerAttention) -> FusionOutput:
    return block(branches)


def can_fuse(branches: list[Tensor], block: ChannelAttention) -> FusionOutput:
    return block(branches)


def regression_head(fused: Tensor, head: RegressionHead) -> Tensor:
    return head(fused)


def clamp_predictions(pred: np.ndarray) -> np.ndarray:
    """Export rule: raw head outputs are clipped to [-1, 1]."""
    return np.clip(pred, -1.0, 1.0)


def write_attention_csv(path, weights: np.ndarray, labels: list[str] | None = None) -> None:
    """One row per timestep. ``weights`` is ``[T, M]`` (CAN) or ``[T, T]`` (LFAN)."""
    weights = np.asarray(weights)
    if weights.ndim != 2:
        raise ValueError(f"expected a 2-D weight matrix, got shape {weights.shape}")
    if labels is None:
        labels = [f"w{j}" for j in range(weights.shape[1])]
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", *labels])
        for t, row in enumerate(weights):
            writer.writerow([t, *(f"{v:.8g}" for v in row)])
