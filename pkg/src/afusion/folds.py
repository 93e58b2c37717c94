"""Subject-independent 6-fold cross-validation (fold 0 = the original partition)."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .datapipe.formats import ManifestEntry, atomic_write_text

N_GENERATED = 5


@dataclass(frozen=True)
class FoldSpec:
    fold_index: int
    train_trials: tuple[str, ...]
    val_trials: tuple[str, ...]
    seed: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_trials"] = list(self.train_trials)
        d["val_trials"] = list(self.val_trials)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSpec":
        return cls(int(d["fold_index"]), tuple(d["train_trials"]), tuple(d["val_trials"]), int(d["seed"]))


def _subjects(manifest: list[ManifestEntry], split: str) -> dict[str, list[str]]:
    out: dict[str, list[str]] = defaultdict(list)
    for e in manifest:
        if e.split == split:
            out[e.subject_id].append(e.trial_id)
    return out


def build_folds(manifest: list[ManifestEntry], seed: int) -> list[FoldSpec]:
    """Fold 0 is the manifest's train/val split; folds 1-5 each validate on one subject bin.

    Training subjects are shuffled with ``seed`` and assigned greedily to the
    bin with the fewest trials so far (lowest index on ties).
    """
    train_subj = _subjects(manifest, "train")
    val_subj = _subjects(manifest, "val")
    shared = sorted(set(train_subj) & set(val_subj))
    if shared:
        raise ValueError(f"subjects present in both train and val splits: {shared}")
    if not val_subj:
        raise ValueError("manifest has no validation trials")
    if len(train_subj) < N_GENERATED:
        raise ValueError(f"need at least {N_GENERATED} training subjects, got {len(train_subj)}")

    train_trials = tuple(e.trial_id for e in manifest if e.split == "train")
    val_trials = tuple(e.trial_id for e in manifest if e.split == "val")
    folds = [FoldSpec(0, train_trials, val_trials, seed)]

    rng = np.random.default_rng(seed)
    order = [sorted(train_subj)[i] for i in rng.permutation(len(train_subj))]
    bins: list[list[str]] = [[] for _ in range(N_GENERATED)]
    counts = [0] * N_GENERATED
    for subj in order:
        k = int(np.argmin(counts))
        bins[k].append(subj)
        counts[k] += len(train_subj[subj])

    subject = {e.trial_id: e.subject_id for e in manifest}
    for k in range(N_GENERATED):
        held = set(bins[k])
        val = tuple(t for t in train_trials if subject[t] in held)
        train = tuple(t for t in train_trials if subject[t] not in held) + val_trials
        folds.append(FoldSpec(k + 1, train, val, seed))
    return folds


def audit_folds(folds: list[FoldSpec], manifest: list[ManifestEntry]) -> list[str]:
    """Human-readable violations of the fold invariants; empty when all hold."""
    subject = {e.trial_id: e.subject_id for e in manifest}
    problems = []
    orig_train = [e.trial_id for e in manifest if e.split == "train"]
    orig_val = [e.trial_id for e in manifest if e.split == "val"]

    by_index = {f.fold_index: f for f in folds}
    if sorted(by_index) != list(range(N_GENERATED + 1)):
        problems.append(f"fold indices {sorted(by_index)} != 0..{N_GENERATED}")
    if 0 in by_index:
        f0 = by_index[0]
        if sorted(f0.val_trials) != sorted(orig_val):
            problems.append("fold 0 validation trials differ from the original val split")
        if sorted(f0.train_trials) != sorted(orig_train):
            problems.append("fold 0 training trials differ from the original train split")

    for f in folds:
        unknown = [t for t in f.train_trials + f.val_trials if t not in subject]
        if unknown:
            problems.append(f"fold {f.fold_index}: unknown trials {unknown}")
            continue
        overlap = {subject[t] for t in f.train_trials} & {subject[t] for t in f.val_trials}
        for s in sorted(overlap):
            problems.append(f"fold {f.fold_index}: subject {s} in both train and val")
        if not f.val_trials:
            problems.append(f"fold {f.fold_index}: empty validation set")

    seen: dict[str, int] = {}
    for f in folds:
        if f.fold_index == 0:
            continue
        for t in f.val_trials:
            if t in seen:
                problems.append(f"trial {t} validated in folds {seen[t]} and {f.fold_index}")
            seen[t] = f.fold_index
    for t in orig_train:
        if t not in seen:
            problems.append(f"trial {t} is in no generated validation fold")
    for t in seen:
        if t not in orig_train:
            problems.append(f"trial {t} validated in a generated fold but not an original training trial")
    return problems


def save_folds(path, folds: list[FoldSpec]) -> None:
    atomic_write_text(path, json.dumps([f.to_dict() for f in folds], indent=1, sort_keys=True) + "\n")


def load_folds(path) -> list[FoldSpec]:
    return [FoldSpec.from_dict(d) for d in json.loads(Path(path).read_text())]
