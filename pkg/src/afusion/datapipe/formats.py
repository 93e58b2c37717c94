"""Readers and writers for the on-disk corpus formats."""
from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
SENTINEL = -5.0
LING_MAGIC = b"LFEA"
LING_DIM = 768


class FormatError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# --- manifest -------------------------------------------------------------

PATH_KEYS = ("frames_dir", "wav", "words_csv", "linguistic_bin", "annotation_csv")


@dataclass
class ManifestEntry:
    trial_id: str
    subject_id: str
    split: str
    fps: float
    paths: dict[str, str]
    n_frames: int | None = None
    root: Path = field(default=Path("."), repr=False, compare=False)

    def path(self, key: str) -> Path | None:
        value = self.paths.get(key)
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.root / p

    def to_json(self) -> str:
        d = {"trial_id": self.trial_id, "subject_id": self.subject_id, "split": self.split,
             "fps": self.fps, "paths": self.paths}
        if self.n_frames is not None:
            d["n_frames"] = self.n_frames
        return json.dumps(d, sort_keys=True)


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    seen = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            entry = ManifestEntry(str(d["trial_id"]), str(d["subject_id"]), d["split"], float(d["fps"]),
                                  dict(d.get("paths", {})), d.get("n_frames"), path.parent)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: bad manifest entry ({exc})") from None
        if entry.split not in ("train", "val", "test"):
            raise FormatError(f"{path}:{lineno}: split must be train/val/test, got {entry.split!r}")
        if entry.fps <= 0:
            raise FormatError(f"{path}:{lineno}: fps must be positive")
        if entry.trial_id in seen:
            raise FormatError(f"{path}:{lineno}: duplicate trial_id {entry.trial_id!r}")
        seen.add(entry.trial_id)
        entries.append(entry)
    return entries


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    atomic_write_text(path, "".join(e.to_json() + "\n" for e in entries))


# --- wav ------------------------------------------------------------------

def read_wav(path) -> np.ndarray:
    """16-bit mono PCM at 16 kHz as float64 in [-1, 1). Anything else is rejected."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise FormatError(f"{path}: expected mono, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise FormatError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        if wf.getframerate() != SAMPLE_RATE:
            raise FormatError(f"{path}: sample rate {wf.getframerate()} != {SAMPLE_RATE} (no resampling)")
        raw = wf.readframes(wf.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, samples: np.ndarray) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(pcm.tobytes())
    atomic_write_bytes(path, buf.getvalue())


# --- linguistic features ---------------------------------------------------

def read_linguistic_bin(path, expected_cols: int = LING_DIM) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != LING_MAGIC:
        raise FormatError(f"{path}: missing LFEA header")
    rows, cols = struct.unpack_from("<II", data, 4)
    if cols != expected_cols:
        raise FormatError(f"{path}: expected {expected_cols} columns, got {cols}")
    need = 12 + rows * cols * 4
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} bytes for {rows}x{cols}, got {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(rows, cols).astype(np.float32)


def write_linguistic_bin(path, features: np.ndarray) -> None:
    features = np.asarray(features, dtype="<f4")
    if features.ndim != 2:
        raise FormatError("linguistic features must be a 2-D matrix")
    header = LING_MAGIC + struct.pack("<II", *features.shape)
    atomic_write_bytes(path, header + features.tobytes())


# --- words -------------------------------------------------------------------

def read_words_csv(path) -> list[tuple[str, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["word", "start_sec", "end_sec"]:
            raise FormatError(f"{path}: header must be word,start_sec,end_sec")
        words = []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                word, start, end = row
                words.append((word, float(start), float(end)))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: malformed row {row!r}") from None
    return words


def write_words_csv(path, words) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["word", "start_sec", "end_sec"])
    for word, start, end in words:
        writer.writerow([word, f"{start:.3f}", f"{end:.3f}"])
    atomic_write_text(path, buf.getvalue())


# --- annotations ------------------------------------------------------------

def parse_annotations(path) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame valence/arousal. Rows holding the -5 sentinel in either column are masked out."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or [h.strip() for h in lines[0].split(",")] != ["valence", "arousal"]:
        raise FormatError(f"{path}:1: header must be valence,arousal")
    rows = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            if len(parts) != 2:
                raise ValueError
            v, a = float(parts[0]), float(parts[1])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed row {line!r}") from None
        for x in (v, a):
            if x != SENTINEL and not -1.0 <= x <= 1.0:
                raise FormatError(f"{path}:{lineno}: label {x} outside [-1, 1]")
        rows.append((v, a))
    labels = np.array(rows, dtype=np.float32).reshape(-1, 2)
    mask = ~(labels == SENTINEL).any(axis=1)
    return labels, mask


def write_annotations(path, labels: np.ndarray) -> None:
    def fmt(x):
        return "-5" if x == SENTINEL else f"{x:.4f}"

    lines = ["valence,arousal"]
    lines += [f"{fmt(v)},{fmt(a)}" for v, a in np.asarray(labels)]
    atomic_write_text(path, "\n".join(lines) + "\n")


# --- predictions -------------------------------------------------------------

def write_predictions(path, pred: np.ndarray) -> None:
    pred = np.clip(np.asarray(pred, dtype=np.float64), -1.0, 1.0)
    lines = ["frame,valence,arousal"]
    lines += [f"{i},{v:.6f},{a:.6f}" for i, (v, a) in enumerate(pred)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_predictions(path) -> np.ndarray:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return arr[:, 1:3]
