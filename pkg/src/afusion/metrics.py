"""Concordance correlation coefficient: evaluation metric and differentiable loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOSS_EPS = 1e-8


@dataclass(frozen=True)
class CccReport:
    ccc_valence: float
    ccc_arousal: float

    @property
    def mean_ccc(self) -> float:
        return (self.ccc_valence + self.ccc_arousal) / 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_ccc"] = self.mean_ccc
        return d


def ccc(pred, target) -> float:
    """Population-statistics CCC. Two constant sequences give 0."""
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(target, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("ccc needs at least two points")
    mx, my = x.mean(), y.mean()
    # shifting by the first sample first keeps constant inputs exactly centred
    dx, dy = x - x[0], y - y[0]
    dx, dy = dx - dx.mean(), dy - dy.mean()
    cov = np.mean(dx * dy)
    denom = np.mean(dx * dx) + np.mean(dy * dy) + (mx - my) ** 2
    if denom == 0.0:
        return 0.0
    return float(2.0 * cov / denom)


def _ccc_tensor(x: Tensor, y: Tensor) -> Tensor:
    mx, my = ad.mean(x), ad.mean(y)
    cov = ad.mean((x - mx) * (y - my))
    denom = ad.variance(x) + ad.variance(y) + ad.square(mx - my) + LOSS_EPS
    return ad.scale(cov / denom, 2.0)


def ccc_loss(pred: Tensor, target, mask=None) -> Tensor:
    """``1 - mean(CCC_valence, CCC_arousal)`` over all (masked-in) rows.

    ``pred``/``target`` are ``[..., 2]``; leading axes are flattened so a
    batch of windows is scored as one concatenated sequence.
    """
    target = ad.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.shape[-1] != 2:
        raise ValueError("expected two output columns (valence, arousal)")
    p = ad.reshape(pred, (-1, 2))
    t = target.data.reshape(-1, 2)
    if mask is not None:
        idx = np.flatnonzero(np.asarray(mask).reshape(-1))
        if idx.size < 2:
            raise ValueError("ccc_loss needs at least two valid rows")
        p = ad.getitem(p, idx)
        t = t[idx]
    t = ad.Tensor(t)
    cv = _ccc_tensor(p[:, 0], t[:, 0])
    ca = _ccc_tensor(p[:, 1], t[:, 1])
    return 1.0 - ad.scale(cv + ca, 0.5)


def masked_eval(pred, target, mask) -> CccReport:
    """CCC over masked-in frames, all trials of a partition concatenated."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 2)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if not mask.any():
        raise ValueError("masked_eval: no valid frames")
    p, t = pred[mask], target[mask]
    return CccReport(ccc(p[:, 0], t[:, 0]), ccc(p[:, 1], t[:, 1]))
