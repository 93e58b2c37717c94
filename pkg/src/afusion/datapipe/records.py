"""Per-trial synchronization: frames, log-mel, word features and labels on one time base."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import formats
from .formats import FormatError, ManifestEntry, atomic_write_bytes, atomic_write_text
from .logmel import audio_patches, extract_logmel

FRAME_SIZE = 48


@dataclass
class WordSpan:
    word: str
    start_sec: float
    end_sec: float
    feature: np.ndarray

    def __post_init__(self):
        if not self.start_sec < self.end_sec:
            raise ValueError(f"word {self.word!r}: start {self.start_sec} !< end {self.end_sec}")


@dataclass
class TrialRecord:
    trial_id: str
    subject_id: str
    split: str
    fps: float
    frames: np.ndarray       # [N, 48, 48, 3] uint8, zero where the jpg is missing
    logmel: np.ndarray       # [N, 64] float32
    linguistic: np.ndarray   # [N, 768] float32
    labels: np.ndarray       # [N, 2] float32, raw (sentinel rows kept)
    valid_mask: np.ndarray   # [N] bool

    def __post_init__(self):
        n = self.frames.shape[0]
        for name in ("logmel", "linguistic", "labels", "valid_mask"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{self.trial_id}: {name} has {getattr(self, name).shape[0]} rows, expected {n}")

    @property
    def n(self) -> int:
        return self.frames.shape[0]

    @property
    def visual(self) -> np.ndarray:
        """``[N, 3, 48, 48]`` float32 in [0, 1]."""
        return self.frames.transpose(0, 3, 1, 2).astype(np.float32) / 255.0

    def audio(self, n_patch: int) -> np.ndarray:
        return audio_patches(self.logmel, n_patch)


def fit_length(features: np.ndarray, n: int) -> np.ndarray:
    """Pad by repeating the last row, or trim rows from the rear, to exactly ``n`` rows."""
    m = features.shape[0]
    if m == 0:
        raise ValueError("fit_length: empty feature matrix")
    if m == n:
        return features
    if m > n:
        return features[:n]
    tail = np.repeat(features[-1:], n - m, axis=0)
    return np.concatenate([features, tail], axis=0)


def align_words_to_frames(spans: list[WordSpan], n: int, fps: float, dim: int = formats.LING_DIM) -> np.ndarray:
    """Frame i (starting at i/fps) takes the feature of the span whose [start, end) contains i/fps."""
    out = np.zeros((n, dim), dtype=np.float32)
    starts = np.arange(n) / fps
    prev_end = -np.inf
    for span in spans:
        if span.start_sec < prev_end:
            raise ValueError(f"word spans overlap or are unsorted at {span.word!r} ({span.start_sec}s)")
        prev_end = span.end_sec
        hit = (starts >= span.start_sec) & (starts < span.end_sec)
        out[hit] = span.feature
    return out


def load_frames(frames_dir, n: int) -> np.ndarray:
    """Zero buffer of ``n`` frames; frame i is filled from ``{i+1:05d}.jpg`` when present."""
    buf = np.zeros((n, FRAME_SIZE, FRAME_SIZE, 3), dtype=np.uint8)
    frames_dir = Path(frames_dir)
    if not frames_dir.is_dir():
        raise FileNotFoundError(f"frames directory not found: {frames_dir}")
    present = set(p.name for p in frames_dir.iterdir())
    for i in range(n):
        name = f"{i + 1:05d}.jpg"
        if name in present:
            with Image.open(frames_dir / name) as im:
                im = im.convert("RGB")
                if im.size != (FRAME_SIZE, FRAME_SIZE):
                    im = im.resize((FRAME_SIZE, FRAME_SIZE), Image.BILINEAR)
                buf[i] = np.asarray(im)
    return buf


def count_frames(frames_dir) -> int:
    idx = [int(p.stem) for p in Path(frames_dir).glob("*.jpg") if p.stem.isdigit()]
    return max(idx) if idx else 0


def load_word_spans(words_csv, linguistic_bin) -> list[WordSpan]:
    words = formats.read_words_csv(words_csv)
    feats = formats.read_linguistic_bin(linguistic_bin)
    if feats.shape[0] != len(words):
        raise FormatError(f"{linguistic_bin}: {feats.shape[0]} feature rows for {len(words)} words")
    return [WordSpan(w, s, e, f) for (w, s, e), f in zip(words, feats)]


def preprocess_trial(entry: ManifestEntry) -> TrialRecord:
    ann = entry.path("annotation_csv")
    if ann is not None and ann.exists():
        labels, mask = formats.parse_annotations(ann)
    elif entry.split == "test":
        n = entry.n_frames if entry.n_frames is not None else count_frames(entry.path("frames_dir"))
        labels, mask = np.zeros((n, 2), np.float32), np.zeros(n, dtype=bool)
    else:
        raise FileNotFoundError(f"{entry.trial_id}: annotation file missing")
    n = labels.shape[0]
    if n == 0:
        raise FormatError(f"{entry.trial_id}: zero frames")

    frames = load_frames(entry.path("frames_dir"), n)

    wav_path = entry.path("wav")
    if wav_path is None or not wav_path.exists():
        raise FileNotFoundError(f"{entry.trial_id}: wav missing ({wav_path})")
    logmel = fit_length(extract_logmel(formats.read_wav(wav_path), entry.fps), n)

    words, bins = entry.path("words_csv"), entry.path("linguistic_bin")
    if words is not None and bins is not None and words.exists() and bins.exists():
        linguistic = align_words_to_frames(load_word_spans(words, bins), n, entry.fps)
    else:
        linguistic = np.zeros((n, formats.LING_DIM), dtype=np.float32)

    return TrialRecord(entry.trial_id, entry.subject_id, entry.split, entry.fps,
                       frames, logmel, linguistic, labels, mask)


# --- preprocessed store -------------------------------------------------------

_ARRAYS = ("frames", "logmel", "linguistic", "labels", "valid_mask")


def _npy_bytes(arr: np.ndarray) -> bytes:
    import io
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_record(store, record: TrialRecord) -> Path:
    d = Path(store) / "records" / record.trial_id
    for name in _ARRAYS:
        atomic_write_bytes(d / f"{name}.npy", _npy_bytes(getattr(record, name)))
    meta = {"trial_id": record.trial_id, "subject_id": record.subject_id, "split": record.split,
            "fps": record.fps, "n": record.n}
    atomic_write_text(d / "meta.json", json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return d


def load_record(store, trial_id: str) -> TrialRecord:
    d = Path(store) / "records" / trial_id
    meta = json.loads((d / "meta.json").read_text())
    arrays = {name: np.load(d / f"{name}.npy", allow_pickle=False) for name in _ARRAYS}
    return TrialRecord(meta["trial_id"], meta["subject_id"], meta["split"], meta["fps"], **arrays)


def list_records(store) -> list[str]:
    root = Path(store) / "records"
    if not root.is_dir():
        return []
    return sorted(p.name for p in root.iterdir() if (p / "meta.json").exists())


# --- linguistic normalization -----------------------------------------------

@dataclass
class FeatureNorm:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: list[np.ndarray]) -> "FeatureNorm":
        allf = np.concatenate([np.asarray(f, dtype=np.float64) for f in features], axis=0)
        mean = allf.mean(axis=0)
        std = allf.std(axis=0)
        return cls(mean.astype(np.float32), std.astype(np.float32))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        # zero-variance dimensions are only shifted
        scale = np.where(self.std > 0, self.std, 1.0).astype(np.float32)
        return ((x - self.mean) / scale).astype(np.float32)


def normalize_linguistic(train_features: list[np.ndarray], others: list[np.ndarray] | None = None):
    """Standardize with statistics of the training partition only."""
    norm = FeatureNorm.fit(train_features)
    return norm, [norm(f) for f in train_features], [norm(f) for f in (others or [])]
