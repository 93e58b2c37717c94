"""Finite-difference verification of every operator and of the composed models."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .metrics import ccc_loss
from .models import EmotionModel, ModelConfig

OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_error: float
    tol: float
    instances: int
    seconds: float
    checked: int = 0
    skipped: int = 0     # elements whose +-h step crossed a ReLU kink

    @property
    def ok(self) -> bool:
        return self.max_error < self.tol


def _away_from_zero(rng, shape, lo=0.1):
    x = rng.uniform(lo, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.tsum(out * Tensor(w))


def _unary(op, positive=False):
    def make(rng):
        shape = (3, 4)
        x = Tensor(rng.uniform(0.2, 2.0, shape) if positive else _away_from_zero(rng, shape))
        w = rng.normal(size=shape)
        return (lambda: _weighted(op(x), w)), [x]
    return make


def _binary(op, positive_b=False):
    def make(rng):
        a = Tensor(rng.normal(size=(3, 4)))
        b = Tensor(rng.uniform(0.5, 2.0, (4,)) if positive_b else rng.normal(size=(4,)))  # broadcast
        w = rng.normal(size=(3, 4))
        return (lambda: _weighted(op(a, b), w)), [a, b]
    return make


def _case_softmax(rng):
    x = Tensor(rng.normal(size=(2, 3, 5)))
    w = rng.normal(size=(2, 3, 5))
    return (lambda: _weighted(ad.softmax(x, axis=-1), w)), [x]


def _case_shape(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)))
    w = rng.normal(size=(4, 6))
    return (lambda: _weighted(ad.reshape(ad.transpose(ad.swapaxes(x, 0, 1), (2, 0, 1)), (4, 6)), w)), [x]


def _case_getitem(rng):
    x = Tensor(rng.normal(size=(6, 4)))
    idx = np.array([0, 2, 2, 5])
    w1, w2 = rng.normal(size=(4, 4)), rng.normal(size=(3, 2))
    return (lambda: _weighted(ad.getitem(x, idx), w1) + _weighted(x[1:4, ::2], w2)), [x]


def _case_concat_stack(rng):
    a, b = Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(3, 4)))
    w1, w2 = rng.normal(size=(3, 6)), rng.normal(size=(2, 3, 2))
    return (lambda: _weighted(ad.concat([a, b], axis=1), w1) + _weighted(ad.stack([a, a * a], 0), w2)), [a, b]


def _case_reductions(rng):
    x = Tensor(rng.normal(size=(4, 5)))
    w1, w2 = rng.normal(size=(5,)), rng.normal(size=(4, 1))
    return (lambda: _weighted(ad.tsum(x, axis=0), w1) + _weighted(ad.mean(x, axis=1, keepdims=True), w2)
            + ad.variance(x)), [x]


def _case_matmul(rng):
    a, b = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(4, 5)))
    w = rng.normal(size=(2, 3, 5))
    return (lambda: _weighted(a @ b, w)), [a, b]


def _case_linear(rng):
    x, W, b = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=(5,)))
    w = rng.normal(size=(2, 3, 5))
    return (lambda: _weighted(ad.linear(x, W, b), w)), [x, W, b]


def _case_conv1d(rng):
    d = int(rng.integers(1, 4))
    x, K, b = Tensor(rng.normal(size=(2, 9, 3))), Tensor(rng.normal(size=(3, 3, 4))), Tensor(rng.normal(size=(4,)))
    w = rng.normal(size=(2, 9, 4))
    return (lambda: _weighted(ad.conv1d_dilated_causal(x, K, b, d), w)), [x, K, b]


def _case_conv2d(rng):
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x, K, b = Tensor(rng.normal(size=(2, 2, 6, 6))), Tensor(rng.normal(size=(3, 2, 3, 3))), Tensor(rng.normal(size=(3,)))
    out_hw = (6 + 2 * pad - 3) // stride + 1
    w = rng.normal(size=(2, 3, out_hw, out_hw))
    return (lambda: _weighted(ad.conv2d(x, K, b, stride, pad), w)), [x, K, b]


def _case_dropout(rng):
    x = Tensor(rng.normal(size=(4, 6)))
    w = rng.normal(size=(4, 6))
    seed = int(rng.integers(1 << 30))
    return (lambda: _weighted(ad.dropout(x, 0.3, True, np.random.default_rng(seed)), w)), [x]


def _case_ccc_loss(rng):
    n = int(rng.integers(4, 12))
    p = Tensor(rng.normal(size=(2, n, 2)))
    y = rng.normal(size=(2, n, 2))
    mask = rng.random((2, n)) > 0.2
    mask[0, :2] = True
    return (lambda: ccc_loss(p, y, mask)), [p]


OPERATOR_CASES: dict[str, Callable] = {
    "add": _binary(ad.add), "sub": _binary(ad.sub), "mul": _binary(ad.mul), "div": _binary(ad.div, True),
    "relu": _unary(ad.relu), "tanh": _unary(ad.tanh), "sqrt": _unary(ad.sqrt, True), "square": _unary(ad.square),
    "scale": _unary(lambda x: ad.scale(x, -1.7)),
    "softmax": _case_softmax, "reshape/swapaxes/transpose": _case_shape, "getitem": _case_getitem,
    "concat/stack": _case_concat_stack, "sum/mean/variance": _case_reductions, "matmul": _case_matmul,
    "linear": _case_linear, "conv1d_dilated_causal": _case_conv1d, "conv2d": _case_conv2d,
    "dropout": _case_dropout, "ccc_loss": _case_ccc_loss,
}


def tiny_model_config(model: str) -> ModelConfig:
    mods = ("visual", "audio", "linguistic") if model == "lfan" else ("visual", "audio")
    return ModelConfig(model=model, modalities=mods, leader="visual", d_attn=3, d_fused=4, tcn_levels=2,
                       tcn_kernel=2, tcn_channels=4, dropout=0.1, backbone_channels=(3, 3, 3), visual_size=8,
                       mel_bins=8, n_patch=2, ling_dim=5)


def composed_case(model: str, seed: int, max_elements: int = 4):
    """Closure and leaves for ``ccc_loss(model(inputs))`` with every parameter checked on a sample."""
    rng = np.random.default_rng(seed)
    cfg = tiny_model_config(model)
    net = EmotionModel(cfg, rng, np.float64)
    # zero-initialized biases leave dead units feeding exact zeros into later ReLUs
    for name, p in net.named_parameters():
        if name.endswith("bias"):
            p.data = rng.normal(0, 0.5, size=p.shape)
    B, T = 2, 5
    inputs = {m: rng.normal(size=(B, T) + cfg.input_shape(m)) for m in cfg.ordered_modalities}
    y = rng.uniform(-1, 1, size=(B, T, 2))
    drop_seed = int(rng.integers(1 << 30))

    def f():
        pred, _ = net(inputs, training=True, rng=np.random.default_rng(drop_seed))
        return ccc_loss(pred, y)

    return f, [p for _, p in net.named_parameters()], max_elements


def gradcheck_suite(instances: int = 5, seed: int = 0, h: float = 1e-4, models=("lfan", "can"),
                    log: Callable[[str], None] | None = None) -> list[CheckResult]:
    results = []
    root = np.random.SeedSequence(seed)
    for name, make in OPERATOR_CASES.items():
        t0, worst = time.perf_counter(), 0.0
        for ss in root.spawn(instances):
            f, xs = make(np.random.default_rng(ss))
            worst = max(worst, grad_check(f, xs, h))
        results.append(CheckResult(name, worst, OP_TOL, instances, time.perf_counter() - t0))
        if log:
            log(_line(results[-1]))
    for model in models:
        t0, worst, stats = time.perf_counter(), 0.0, {}
        for ss in root.spawn(instances):
            f, xs, k = composed_case(model, int(ss.generate_state(1)[0]))
            worst = max(worst, grad_check(f, xs, h, max_elements=k, rng=np.random.default_rng(ss),
                                          skip_kinks=True, stats=stats))
        results.append(CheckResult(f"{model} + ccc_loss", worst, MODEL_TOL, instances, time.perf_counter() - t0,
                                   stats["checked"], stats["skipped"]))
        if log:
            log(_line(results[-1]))
    return results


def _line(r: CheckResult) -> str:
    extra = f" checked={r.checked} kink_skips={r.skipped}" if r.checked else ""
    return (f"{'PASS' if r.ok else 'FAIL'} {r.name:<28} max_rel_err={r.max_error:.2e} tol={r.tol:.0e}"
            f"{extra} ({r.seconds:.1f}s)")
