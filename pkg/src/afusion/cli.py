"""Command-line entry point: synth, preprocess, train, predict, report, gradcheck.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

from .config import ConfigError, RunConfig, load_config, loads
from .datapipe.formats import FormatError, ManifestEntry, atomic_write_text, read_manifest, write_predictions
from .datapipe.records import list_records, load_record, preprocess_trial, save_record
from .folds import FoldSpec, audit_folds, build_folds, load_folds, save_folds

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def worker_count() -> int:
    raw = os.environ.get("AFUSION_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"AFUSION_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("AFUSION_THREADS must be >= 1")
    return n


def _say(msg: str) -> None:
    print(msg, flush=True)


# --- synth ------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import SynthSpec, synthesize
    lengths = tuple(int(x) for x in args.lengths.split(",") if x.strip()) if args.lengths else ()
    spec = SynthSpec(trials=args.trials, subjects=args.subjects, n_frames=args.n_frames, fps=args.fps,
                     seed=args.seed, val_subjects=args.val_subjects, lengths=lengths,
                     sentinel_rate=args.sentinel_rate, missing_rate=args.missing_rate, test_trials=args.test_trials)
    try:
        entries, _ = synthesize(spec, args.out)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    splits = {s: sum(e.split == s for e in entries) for s in ("train", "val", "test")}
    _say(f"wrote {len(entries)} trials to {args.out} (train {splits['train']}, val {splits['val']}, "
         f"test {splits['test']}); manifest {Path(args.out) / 'manifest.jsonl'}")
    return EXIT_OK


# --- preprocess -------------------------------------------------------------

def cmd_preprocess(args) -> int:
    entries = read_manifest(args.manifest)
    failures = []
    totals = {"trials": 0, "frames": 0, "masked": 0}

    def one(entry: ManifestEntry):
        rec = preprocess_trial(entry)
        save_record(args.out, rec)
        return rec.n, int((~rec.valid_mask).sum())

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        futures = [(e, pool.submit(one, e)) for e in entries]
        for entry, fut in futures:
            try:
                n, masked = fut.result()
            except Exception as exc:  # isolate per-trial failures
                failures.append(entry.trial_id)
                _say(f"FAILED {entry.trial_id}: {exc}")
                continue
            totals["trials"] += 1
            totals["frames"] += n
            totals["masked"] += masked
    _say(f"preprocessed {totals['trials']} trials, {totals['frames']} frames, {totals['masked']} masked frames"
         + (f"; {len(failures)} failed: {', '.join(failures)}" if failures else ""))
    return EXIT_RUNTIME if failures else EXIT_OK


# --- train ------------------------------------------------------------------

def store_entries(store) -> list[ManifestEntry]:
    entries = []
    for tid in list_records(store):
        meta = json.loads((Path(store) / "records" / tid / "meta.json").read_text())
        entries.append(ManifestEntry(meta["trial_id"], meta["subject_id"], meta["split"], meta["fps"], {}))
    return entries


def resolve_folds(config: RunConfig, entries: list[ManifestEntry]) -> list[FoldSpec]:
    if config.folds_file:
        folds = load_folds(config.folds_file)
    else:
        try:
            folds = build_folds(entries, config.fold_seed)
        except ValueError:
            if config.fold != "0":
                raise
            # fold 0 is just the original partition and needs no subject binning
            train = tuple(e.trial_id for e in entries if e.split == "train")
            val = tuple(e.trial_id for e in entries if e.split == "val")
            folds = [FoldSpec(0, train, val, config.fold_seed)]
    wanted = range(6) if config.fold == "all" else [int(config.fold)]
    by_index = {f.fold_index: f for f in folds}
    missing = [k for k in wanted if k not in by_index]
    if missing:
        raise ConfigError(f"invalid config field 'fold': folds {missing} are not available")
    return [by_index[k] for k in wanted]


def cmd_train(args) -> int:
    from .train.loop import method_label, run_fold, select_best, write_selection
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name, None) is not None}
    config = load_config(args.config, overrides)
    if not config.store:
        raise ConfigError("invalid config field 'store': a preprocessed store is required")
    entries = store_entries(config.store)
    if not entries:
        raise ConfigError(f"invalid config field 'store': no records under {config.store}")
    folds = resolve_folds(config, entries)
    problems = audit_folds(folds, entries) if len(folds) == 6 else []
    if problems:
        raise ConfigError("fold audit failed: " + "; ".join(problems))
    needed = sorted({t for f in folds for t in f.train_trials + f.val_trials})
    if not all(f.train_trials and f.val_trials for f in folds):
        raise ConfigError("invalid config field 'fold': empty train or validation partition")
    records = {t: load_record(config.store, t) for t in needed}

    root = Path(config.out) / method_label(config)
    atomic_write_text(root / "config.txt", config.dumps())
    if not config.folds_file:
        save_folds(root / "folds.json", folds)

    jobs = [(f, s) for f in folds for s in config.seeds]

    def one(job):
        fold, seed = job
        out = root / f"fold{fold.fold_index}" / f"seed{seed}"
        atomic_write_text(out / "config.txt", config.dumps())
        progress = (lambda row: _say(f"fold{fold.fold_index} seed{seed} " + " ".join(f"{k}={v}" for k, v in row.items()))
                    if args.verbose else None)
        return run_fold(fold, records, config, seed, out, progress=progress)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(one, jobs))
    for fold in folds:
        runs = [r for r in results if r.fold_index == fold.fold_index]
        best = select_best(runs)
        write_selection(root / f"fold{fold.fold_index}", fold.fold_index, runs, best)
        for r in runs:
            rep = r.best_report
            _say(f"{method_label(config)} fold{r.fold_index} seed{r.seed}: best epoch {r.best_epoch}, "
                 f"val CCC valence {rep.ccc_valence:.4f} arousal {rep.ccc_arousal:.4f}"
                 + ("  <- selected" if r is best else ""))
    return EXIT_OK


# --- predict ----------------------------------------------------------------

def cmd_predict(args) -> int:
    from .train.checkpoint import load_checkpoint
    from .train.loop import model_from_checkpoint, predict_trials
    record = load_checkpoint(args.checkpoint)
    model, norm = model_from_checkpoint(record)
    config = loads(record.state["run_config"])
    entries = read_manifest(args.manifest)
    needs = {"visual": ("frames_dir",), "audio": ("wav",), "linguistic": ("words_csv", "linguistic_bin")}
    for e in entries:
        for m in model.config.ordered_modalities:
            for key in needs[m]:
                p = e.path(key)
                if p is None or not p.exists():
                    raise ConfigError(f"{e.trial_id}: checkpoint needs modality {m!r} but {key} is missing")
    records = {}
    for e in entries:
        records[e.trial_id] = preprocess_trial(e)
    preds = predict_trials(model, records, [e.trial_id for e in entries], config, norm)
    out = Path(args.out)
    for tid, p in preds.items():
        write_predictions(out / f"{tid}.csv", p)
    _say(f"wrote predictions for {len(preds)} trials to {out}")
    return EXIT_OK


# --- report -----------------------------------------------------------------

def cmd_report(args) -> int:
    from .report import build_grid, collect_results, grid_csv, grid_text
    results = collect_results(args.runs)
    if not results:
        raise ConfigError("no completed runs found under " + ", ".join(args.runs))
    header, rows = build_grid(results)
    text = grid_text(header, rows)
    if args.out:
        atomic_write_text(Path(args.out) / "report.csv", grid_csv(header, rows))
        atomic_write_text(Path(args.out) / "report.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


# --- gradcheck --------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .verify import gradcheck_suite
    results = gradcheck_suite(instances=args.instances, seed=args.seed, log=_say)
    bad = [r.name for r in results if not r.ok]
    _say(f"{len(results) - len(bad)}/{len(results)} checks passed")
    return EXIT_RUNTIME if bad else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="afusion", description="Audio-visual-linguistic continuous emotion regression.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic corpus with planted signals")
    s.add_argument("--out", required=True)
    s.add_argument("--trials", type=int, default=4)
    s.add_argument("--subjects", type=int, default=4)
    s.add_argument("--n-frames", type=int, default=400)
    s.add_argument("--fps", type=float, default=25.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--val-subjects", type=int, default=None)
    s.add_argument("--test-trials", type=int, default=0)
    s.add_argument("--lengths", default="", help="comma-separated per-trial frame counts")
    s.add_argument("--sentinel-rate", type=float, default=0.02)
    s.add_argument("--missing-rate", type=float, default=0.01)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="build the per-trial record store")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train (fold, seed) runs")
    s.add_argument("--config", default=None, help="flat key = value file")
    s.add_argument("--verbose", action="store_true", help="print every epoch log row")
    for f in fields(RunConfig):
        s.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None, metavar="VALUE")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="per-frame predictions from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("report", help="cross-validation results grid")
    s.add_argument("runs", nargs="+")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("gradcheck", help="finite-difference check of the autodiff engine")
    s.add_argument("--instances", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
