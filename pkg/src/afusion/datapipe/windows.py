"""Window resampling, batching, visual augmentation and prediction stitching."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .records import FeatureNorm, TrialRecord

WINDOW = 300
HOP = 200
CROP = 40


@dataclass(frozen=True)
class Window:
    trial_id: str
    start: int
    valid: int  # frames of real data; the rest of the window is zero padding


@dataclass
class WindowBatch:
    inputs: dict[str, np.ndarray]
    labels: np.ndarray      # [B, W, 2]
    masks: np.ndarray       # [B, W] label-valid and not padding
    pad_masks: np.ndarray   # [B, W] True on real frames
    provenance: list[tuple[str, int]]

    def __len__(self) -> int:
        return self.labels.shape[0]


def window_starts(n: int, window: int = WINDOW, hop: int = HOP, tail: bool = True) -> list[int]:
    if window <= 0 or not 0 < hop <= window:
        raise ValueError(f"need window > 0 and 0 < hop <= window, got {window}, {hop}")
    if n <= window:
        return [0]
    starts = list(range(0, n - window + 1, hop))
    if tail and (n - window) % hop != 0:
        starts.append(n - window)
    return starts


def make_windows(trial: TrialRecord, window: int = WINDOW, hop: int = HOP, eval_mode: bool = True,
                 train_tail: bool = True) -> list[Window]:
    """Evaluation always anchors a last window at N - W so every frame is covered."""
    tail = True if eval_mode else train_tail
    n = trial.n
    return [Window(trial.trial_id, s, min(window, n - s)) for s in window_starts(n, window, hop, tail)]


def augment_and_normalize(frames: np.ndarray, training: bool, rng: np.random.Generator | None = None,
                          crop: int = CROP) -> np.ndarray:
    """``[T, 3, H, W]`` in [0, 1] -> ``[T, 3, crop, crop]`` normalized to (x - 0.5) / 0.5.

    Training draws one flip and one crop offset for the whole window.
    """
    h, w = frames.shape[-2:]
    if training:
        if rng is None:
            raise ValueError("training augmentation needs a generator")
        if rng.random() < 0.5:
            frames = frames[..., ::-1]
        oy, ox = rng.integers(0, h - crop + 1), rng.integers(0, w - crop + 1)
    else:
        oy, ox = (h - crop) // 2, (w - crop) // 2
    out = frames[..., oy:oy + crop, ox:ox + crop]
    return ((out - 0.5) / 0.5).astype(np.float32)


def _cut(arr: np.ndarray, start: int, window: int) -> np.ndarray:
    piece = arr[start:start + window]
    if piece.shape[0] == window:
        return piece
    pad = np.zeros((window - piece.shape[0],) + arr.shape[1:], dtype=arr.dtype)
    return np.concatenate([piece, pad], axis=0)


def assemble_batch(records: dict[str, TrialRecord], windows: list[Window], modalities, training: bool,
                   rng: np.random.Generator | None = None, window: int = WINDOW, crop: int = CROP,
                   n_patch: int = 4, ling_norm: FeatureNorm | None = None) -> WindowBatch:
    inputs = {m: [] for m in modalities}
    labels, masks, pads, prov = [], [], [], []
    for win in windows:
        rec = records[win.trial_id]
        pad = np.zeros(window, dtype=bool)
        pad[:win.valid] = True
        if "visual" in inputs:
            frames = _cut(rec.frames, win.start, window).transpose(0, 3, 1, 2).astype(np.float32) / 255.0
            frames = augment_and_normalize(frames, training, rng, crop)
            frames[~pad] = 0.0
            inputs["visual"].append(frames)
        if "audio" in inputs:
            rows = np.arange(win.start, win.start + win.valid)[:, None] + np.arange(-n_patch + 1, 1)
            patches = rec.logmel[np.clip(rows, 0, rec.n - 1)].transpose(0, 2, 1)[:, None]
            inputs["audio"].append(_cut(patches, 0, window))
        if "linguistic" in inputs:
            feats = rec.linguistic[win.start:win.start + window]
            if ling_norm is not None:
                feats = ling_norm(feats)
            inputs["linguistic"].append(_cut(feats, 0, window))
        lab = _cut(rec.labels, win.start, window).copy()
        valid = _cut(rec.valid_mask, win.start, window) & pad
        lab[~valid] = 0.0
        labels.append(lab)
        masks.append(valid)
        pads.append(pad)
        prov.append((win.trial_id, win.start))
    return WindowBatch({m: np.stack(v).astype(np.float32) for m, v in inputs.items()},
                       np.stack(labels).astype(np.float32), np.stack(masks), np.stack(pads), prov)


def iterate_batches(records: dict[str, TrialRecord], windows: list[Window], modalities, batch_size: int,
                    training: bool, rng: np.random.Generator | None = None, **kw) -> Iterator[WindowBatch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(windows))
    if training:
        order = rng.permutation(len(windows))
    for i in range(0, len(order), batch_size):
        chunk = [windows[j] for j in order[i:i + batch_size]]
        yield assemble_batch(records, chunk, modalities, training, rng, **kw)


def stitch_predictions(outputs: list[tuple[int, np.ndarray]], n: int) -> np.ndarray:
    """Average overlapping window outputs back onto ``n`` frames; padding is dropped."""
    total = None
    count = np.zeros(n, dtype=np.int64)
    for start, out in outputs:
        out = np.asarray(out, dtype=np.float64)
        if total is None:
            total = np.zeros((n,) + out.shape[1:])
        stop = min(n, start + out.shape[0])
        if start < 0 or start >= n:
            raise ValueError(f"window start {start} outside [0, {n})")
        total[start:stop] += out[:stop - start]
        count[start:stop] += 1
    if total is None or (count == 0).any():
        gap = np.flatnonzero(count == 0)
        raise ValueError(f"windows leave frames uncovered (first gap at {gap[0] if gap.size else 0})")
    return total / count.reshape((n,) + (1,) * (total.ndim - 1))
