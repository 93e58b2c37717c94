"""Synthetic corpus with planted, learnable audio-visual-linguistic signals.

Valence drives the mean luminance of every frame and leaks into the word
features; arousal sets the log amplitude of a harmonic tone. Each subject
gets its own pitch, face texture and colour tint, so subject identity is
visible but carries no label information.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .datapipe import formats
from .datapipe.formats import ManifestEntry

FRAME = 48
VOCAB = 24


@dataclass(frozen=True)
class SynthSpec:
    trials: int = 4
    subjects: int = 4
    n_frames: int = 400
    fps: float = 25.0
    seed: int = 0
    val_subjects: int | None = None     # default: subjects // 4
    lengths: tuple[int, ...] = ()       # per-trial override of n_frames
    sentinel_rate: float = 0.02         # fraction of rows replaced by -5 (one block per trial)
    missing_rate: float = 0.01          # fraction of jpgs left out
    test_trials: int = 0                # extra unannotated trials in the test split
    noise: float = 0.05

    def length(self, i: int) -> int:
        return self.lengths[i] if i < len(self.lengths) else self.n_frames

    @property
    def n_val_subjects(self) -> int:
        return self.subjects // 4 if self.val_subjects is None else self.val_subjects


@dataclass
class PlantedTrial:
    trial_id: str
    subject_id: str
    split: str
    labels: np.ndarray          # clean [N, 2]
    annotated: np.ndarray       # with sentinel rows
    missing: list[int] = field(default_factory=list)


def _smooth_signal(rng, n: int, fps: float) -> np.ndarray:
    """Sum of two slow sinusoids scaled into roughly [-0.85, 0.85]."""
    t = np.arange(n) / fps
    p1, p2 = rng.uniform(6.0, 12.0), rng.uniform(2.5, 5.0)
    s = np.sin(2 * np.pi * t / p1 + rng.uniform(0, 2 * np.pi)) + 0.4 * np.sin(2 * np.pi * t / p2 + rng.uniform(0, 2 * np.pi))
    return 0.85 * s / 1.4


def _subject_look(rng) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:FRAME, 0:FRAME] / FRAME
    tex = np.zeros((FRAME, FRAME))
    for _ in range(3):
        fx, fy, ph = rng.uniform(1, 4), rng.uniform(1, 4), rng.uniform(0, 2 * np.pi)
        tex += np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
    tint = rng.uniform(-15, 15, size=3)
    return 12.0 * tex / 3.0, tint


def _frames(rng, valence: np.ndarray, look, noise: float) -> np.ndarray:
    tex, tint = look
    base = 128.0 + 80.0 * valence
    img = base[:, None, None, None] + tex[None, :, :, None] + tint[None, None, None, :]
    img = img + rng.normal(0, 255 * noise * 0.1, size=img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _audio(rng, arousal: np.ndarray, fps: float, pitch: float, noise: float) -> np.ndarray:
    sr = formats.SAMPLE_RATE
    n_samples = int(round(arousal.size * sr / fps))
    t = np.arange(n_samples) / sr
    # log amplitude is linear in arousal
    log_amp = np.log(0.03) + 1.6 * np.interp(t, np.arange(arousal.size) / fps, arousal)
    tone = sum(np.sin(2 * np.pi * k * pitch * t) / k for k in range(1, 6)) / 1.6
    tone = np.exp(log_amp) * tone
    return tone + rng.normal(0, 0.02 * noise, size=n_samples)


def _words(rng, valence: np.ndarray, fps: float, embed: np.ndarray, axis: np.ndarray):
    dur = valence.size / fps
    words, feats = [], []
    t = rng.uniform(0.0, 0.3)
    while True:
        length = rng.uniform(0.25, 0.7)
        if t + length > dur:
            break
        k = int(rng.integers(VOCAB))
        i0, i1 = int(t * fps), max(int(t * fps) + 1, int((t + length) * fps))
        v = float(valence[i0:i1].mean())
        words.append((f"w{k:02d}", t, t + length))
        feats.append(embed[k] + 2.0 * v * axis)
        t += length + rng.uniform(0.0, 0.3)
    feats = np.array(feats, dtype=np.float32).reshape(-1, formats.LING_DIM)
    return words, feats


def _save_jpg(path: Path, frame: np.ndarray) -> None:
    import io
    buf = io.BytesIO()
    Image.fromarray(frame).save(buf, format="JPEG", quality=95)
    formats.atomic_write_bytes(path, buf.getvalue())


def synthesize(spec: SynthSpec, out_dir) -> tuple[list[ManifestEntry], list[PlantedTrial]]:
    """Write a corpus under ``out_dir`` and its ``manifest.jsonl``. Same spec, same bytes."""
    if spec.trials < 1 or spec.subjects < 1:
        raise ValueError("need at least one trial and one subject")
    if spec.n_val_subjects >= spec.subjects and spec.subjects > 1:
        raise ValueError("val_subjects must leave at least one training subject")
    out = Path(out_dir)
    root = np.random.SeedSequence(spec.seed)
    subj_ss, world_ss, trial_ss = root.spawn(3)

    world = np.random.default_rng(world_ss)
    embed = world.normal(0, 0.5, size=(VOCAB, formats.LING_DIM)).astype(np.float32)
    axis = world.normal(size=formats.LING_DIM)
    axis = (axis / np.linalg.norm(axis) * np.sqrt(formats.LING_DIM) * 0.25).astype(np.float32)

    subjects = [f"s{i:02d}" for i in range(spec.subjects)]
    srng = np.random.default_rng(subj_ss)
    looks = {s: _subject_look(srng) for s in subjects}
    pitch = {s: float(srng.uniform(180.0, 320.0)) for s in subjects}
    val_set = set(subjects[spec.subjects - spec.n_val_subjects:]) if spec.subjects > 1 else set()

    entries, planted = [], []
    total = spec.trials + spec.test_trials
    for i, rng_ss in enumerate(trial_ss.spawn(total)):
        rng = np.random.default_rng(rng_ss)
        tid, sid = f"t{i:03d}", subjects[i % spec.subjects]
        split = "test" if i >= spec.trials else ("val" if sid in val_set else "train")
        n = spec.length(i) if i < spec.trials else spec.n_frames
        valence = _smooth_signal(rng, n, spec.fps)
        arousal = _smooth_signal(rng, n, spec.fps)
        labels = np.stack([valence, arousal], axis=1)

        tdir = out / "trials" / tid
        frames = _frames(rng, valence, looks[sid], spec.noise)
        n_missing = int(round(spec.missing_rate * n))
        missing = sorted(int(j) for j in rng.choice(n, size=n_missing, replace=False)) if n_missing else []
        gone = set(missing)
        for j in range(n):
            if j not in gone:
                _save_jpg(tdir / "frames" / f"{j + 1:05d}.jpg", frames[j])
        formats.write_wav(tdir / "audio.wav", _audio(rng, arousal, spec.fps, pitch[sid], spec.noise))
        words, feats = _words(rng, valence, spec.fps, embed, axis)
        formats.write_words_csv(tdir / "words.csv", words)
        formats.write_linguistic_bin(tdir / "words.lfea", feats)

        annotated = np.round(labels, 4)
        n_sent = int(round(spec.sentinel_rate * n))
        if n_sent:
            start = int(rng.integers(0, n - n_sent + 1))
            annotated[start:start + n_sent] = formats.SENTINEL
            annotated[int(rng.integers(n)), int(rng.integers(2))] = formats.SENTINEL
        paths = {"frames_dir": f"trials/{tid}/frames", "wav": f"trials/{tid}/audio.wav",
                 "words_csv": f"trials/{tid}/words.csv", "linguistic_bin": f"trials/{tid}/words.lfea"}
        n_frames = None
        if split == "test":
            n_frames = n
        else:
            formats.write_annotations(tdir / "annotations.csv", annotated)
            paths["annotation_csv"] = f"trials/{tid}/annotations.csv"
        entries.append(ManifestEntry(tid, sid, split, spec.fps, paths, n_frames, out))
        planted.append(PlantedTrial(tid, sid, split, labels.astype(np.float32), annotated.astype(np.float32), missing))
    formats.write_manifest(out / "manifest.jsonl", entries)
    return entries, planted
