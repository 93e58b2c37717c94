"""Fold training: warmup, plateau decay, progressive unfreezing, best-state reload."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..autodiff import no_grad
from ..config import RunConfig
from ..datapipe.formats import atomic_write_text
from ..datapipe.records import FeatureNorm, TrialRecord
from ..datapipe.windows import iterate_batches, make_windows, stitch_predictions
from ..folds import FoldSpec
from ..metrics import CccReport, ccc_loss, masked_eval
from ..models import EmotionModel, ModelConfig
from .checkpoint import CheckpointRecord, save_checkpoint
from .optim import OptimizerState, adam_step
from .scheduler import SchedulerConfig, SchedulerState, batch_lr, scheduler_tick

LOG_FIELDS = ("epoch", "phase", "lr", "groups", "train_ccc_valence", "train_ccc_arousal", "train_ccc_mean",
              "val_ccc_valence", "val_ccc_arousal", "val_ccc_mean", "best_val", "plateau_counter",
              "early_stop_counter", "action")


def method_label(config: RunConfig) -> str:
    default = RunConfig(model=config.model).effective_modalities
    mods = config.effective_modalities
    name = config.model.upper()
    return name if tuple(mods) == default else f"{name}[{'+'.join(mods)}]"


def scheduler_config(config: RunConfig) -> SchedulerConfig:
    return SchedulerConfig(lr=config.lr, min_lr=config.min_lr, factor=config.factor, patience=config.patience,
                           warmup_epochs=config.warmup_epochs, early_stop=config.early_stop,
                           max_epoch=config.max_epoch)


def monitored(report: CccReport, monitor: str) -> float:
    if monitor == "valence":
        return report.ccc_valence
    if monitor == "arousal":
        return report.ccc_arousal
    return report.mean_ccc


def _streams(seed: int) -> tuple[np.random.Generator, ...]:
    init, data, drop = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(data), np.random.default_rng(drop)


def _batch_kw(config: RunConfig, ling_norm: FeatureNorm | None) -> dict:
    return dict(window=config.window, crop=config.crop, n_patch=config.n_patch, ling_norm=ling_norm)


def predict_trials(model: EmotionModel, records: dict[str, TrialRecord], trial_ids, config: RunConfig,
                   ling_norm: FeatureNorm | None = None) -> dict[str, np.ndarray]:
    """Stitched ``[N, 2]`` eval-mode predictions for each trial."""
    modalities = model.config.ordered_modalities
    windows = [w for t in trial_ids for w in make_windows(records[t], config.window, config.hop, eval_mode=True)]
    pieces: dict[str, list] = {t: [] for t in trial_ids}
    with no_grad():
        for batch in iterate_batches(records, windows, modalities, config.batch_size, False,
                                     **_batch_kw(config, ling_norm)):
            pred, _ = model(batch.inputs, training=False)
            for (tid, start), out in zip(batch.provenance, pred.data):
                pieces[tid].append((start, out))
    return {t: stitch_predictions(pieces[t], records[t].n) for t in trial_ids}


def evaluate(model: EmotionModel, records: dict[str, TrialRecord], trial_ids, config: RunConfig,
             ling_norm: FeatureNorm | None = None) -> tuple[CccReport, dict[str, np.ndarray]]:
    preds = predict_trials(model, records, trial_ids, config, ling_norm)
    p = np.concatenate([preds[t] for t in trial_ids])
    y = np.concatenate([records[t].labels for t in trial_ids])
    m = np.concatenate([records[t].valid_mask for t in trial_ids])
    return masked_eval(p, y, m), preds


@dataclass
class RunResult:
    fold_index: int
    seed: int
    best_report: CccReport
    best_epoch: int
    log: list[dict]
    scheduler: SchedulerState
    model: EmotionModel
    ling_norm: FeatureNorm | None
    checkpoint: CheckpointRecord
    out_dir: Path | None = None
    extra: dict = field(default_factory=dict)

    @property
    def best_score(self) -> float:
        return self.checkpoint.state["best_score"]


def log_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _make_checkpoint(model, opt, sched, rngs, rows, norm, config, fold, seed, best_report, best_epoch,
                     best_score) -> CheckpointRecord:
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    for k in sorted(opt.m):
        tensors[f"adam_m/{k}"] = opt.m[k]
        tensors[f"adam_v/{k}"] = opt.v[k]
    if norm is not None:
        tensors["ling_norm/mean"] = norm.mean
        tensors["ling_norm/std"] = norm.std
    state = {
        "kind": "afusion-run",
        "fold_index": fold.fold_index,
        "seed": seed,
        "model_config": model.config.to_dict(),
        "run_config": config.dumps(),
        "fold": fold.to_dict(),
        "scheduler": sched.to_dict(),
        "optimizer": {"lr": opt.lr, "weight_decay": opt.weight_decay, "betas": list(opt.betas), "eps": opt.eps,
                      "step_count": opt.step_count, "steps": opt.steps},
        "rng": [g.bit_generator.state for g in rngs],
        "log": rows,
        "best_report": best_report.to_dict() if best_report else None,
        "best_epoch": best_epoch,
        "best_score": best_score,
    }
    return CheckpointRecord(tensors, state)


def model_from_checkpoint(record: CheckpointRecord, dtype=np.float32) -> tuple[EmotionModel, FeatureNorm | None]:
    cfg = ModelConfig.from_dict(record.state["model_config"])
    model = EmotionModel(cfg, np.random.default_rng(0), dtype)
    model.load_state_dict(record.params())
    norm = None
    if "ling_norm/mean" in record.tensors:
        norm = FeatureNorm(record.tensors["ling_norm/mean"], record.tensors["ling_norm/std"])
    return model, norm


def run_fold(fold: FoldSpec, records: dict[str, TrialRecord], config: RunConfig, seed: int,
             out_dir=None, resume: CheckpointRecord | None = None, stop_after: int | None = None,
             stop_when: Callable[[dict], bool] | None = None,
             progress: Callable[[dict], None] | None = None) -> RunResult:
    """Train one (fold, seed) run until the scheduler stops it.

    ``stop_after`` ends the call after that many epochs in total (for resume
    tests); ``stop_when`` ends it once a log row satisfies the predicate.
    The parameters of the returned model are the best validation snapshot.
    """
    if not fold.train_trials or not fold.val_trials:
        raise ValueError(f"fold {fold.fold_index}: empty train or validation partition")
    missing = [t for t in fold.train_trials + fold.val_trials if t not in records]
    if missing:
        raise KeyError(f"fold {fold.fold_index}: no preprocessed record for {missing[:5]}")
    config.validate()
    mcfg = config.model_config()
    modalities = mcfg.ordered_modalities
    init_rng, data_rng, drop_rng = _streams(seed)
    model = EmotionModel(mcfg, init_rng)
    norm = None
    if "linguistic" in modalities:
        norm = FeatureNorm.fit([records[t].linguistic for t in fold.train_trials])
    scfg = scheduler_config(config)
    opt = OptimizerState(config.lr, config.weight_decay, (config.adam_beta1, config.adam_beta2), config.adam_eps)
    sched = SchedulerState.initial(scfg)
    rows: list[dict] = []
    best_report, best_epoch, best_score = None, -1, None

    if resume is not None:
        st = resume.state
        if st.get("model_config") != mcfg.to_dict() or st.get("seed") != seed:
            raise ValueError("checkpoint was written by a different model config or seed")
        model.load_state_dict(resume.params())
        for k, v in resume.tensors.items():
            if k.startswith("adam_m/"):
                opt.m[k[7:]] = v.copy()
            elif k.startswith("adam_v/"):
                opt.v[k[7:]] = v.copy()
        o = st["optimizer"]
        opt.step_count, opt.steps = o["step_count"], {k: int(v) for k, v in o["steps"].items()}
        sched = SchedulerState.from_dict(st["scheduler"])
        for g, s in zip((init_rng, data_rng, drop_rng), st["rng"]):
            g.bit_generator.state = s
        rows = [dict(r) for r in st["log"]]
        if st["best_report"] is not None:
            br = st["best_report"]
            best_report = CccReport(br["ccc_valence"], br["ccc_arousal"])
        best_epoch, best_score = st["best_epoch"], st["best_score"]
    best_state = model.state_dict()
    model.set_unfrozen(sched.current_group)

    out = Path(out_dir) if out_dir is not None else None
    train_windows = [w for t in fold.train_trials
                     for w in make_windows(records[t], config.window, config.hop, eval_mode=False,
                                           train_tail=config.train_tail)]
    params = list(model.named_parameters())
    kw = _batch_kw(config, norm)

    def checkpoint():
        return _make_checkpoint(model, opt, sched, (init_rng, data_rng, drop_rng), rows, norm, config, fold,
                                seed, best_report, best_epoch, best_score)

    while not sched.stopped and (stop_after is None or sched.epoch < stop_after):
        epoch, phase = sched.epoch, sched.phase
        groups = "".join(str(g) for g in sched.unfrozen_groups)
        n_batches = -(-len(train_windows) // config.batch_size)
        tp, ty, tm = [], [], []
        for b, batch in enumerate(iterate_batches(records, train_windows, modalities, config.batch_size, True,
                                                  data_rng, **kw)):
            if batch.masks.sum() < 2:
                continue
            pred, _ = model(batch.inputs, training=True, rng=drop_rng)
            loss = ccc_loss(pred, batch.labels, batch.masks)
            model.zero_grad()
            loss.backward()
            adam_step(params, opt, batch_lr(scfg, sched, b, n_batches))
            tp.append(pred.data)
            ty.append(batch.labels)
            tm.append(batch.masks)
        train_report = masked_eval(np.concatenate(tp), np.concatenate(ty), np.concatenate(tm)) if tp else None
        val_report, _ = evaluate(model, records, fold.val_trials, config, norm)
        score = monitored(val_report, config.monitor)
        lr_used = sched.lr
        sched, actions = scheduler_tick(sched, score, scfg)
        if actions.improved:
            best_state = model.state_dict()
            best_report, best_epoch, best_score = val_report, epoch, score
        model.load_state_dict(best_state)
        if actions.unfrozen_group is not None:
            model.set_unfrozen(sched.current_group)
        row = {
            "epoch": epoch, "phase": phase, "lr": lr_used, "groups": groups,
            "train_ccc_valence": train_report.ccc_valence if train_report else float("nan"),
            "train_ccc_arousal": train_report.ccc_arousal if train_report else float("nan"),
            "train_ccc_mean": train_report.mean_ccc if train_report else float("nan"),
            "val_ccc_valence": val_report.ccc_valence, "val_ccc_arousal": val_report.ccc_arousal,
            "val_ccc_mean": val_report.mean_ccc, "best_val": sched.best_val,
            "plateau_counter": sched.epochs_since_best, "early_stop_counter": sched.early_stop_counter,
            "action": actions.describe(),
        }
        rows.append(row)
        if progress is not None:
            progress(row)
        if out is not None:
            atomic_write_text(out / "epoch_log.csv", log_csv(rows))
            save_checkpoint(out / "last.ackp", checkpoint())
            if actions.improved:
                save_checkpoint(out / "best.ackp", checkpoint())
        if stop_when is not None and stop_when(row):
            break

    record = checkpoint()
    if out is not None:
        report = {"fold_index": fold.fold_index, "seed": seed, "best_epoch": best_epoch,
                  "method": method_label(config), "best_score": best_score,
                  "epochs_run": len(rows), "stopped": sched.stopped,
                  "best_report": best_report.to_dict() if best_report else None}
        atomic_write_text(out / "report.json", json.dumps(report, indent=1, sort_keys=True) + "\n")
    return RunResult(fold.fold_index, seed, best_report, best_epoch, rows, sched, model, norm, record, out)


def select_best(results: list[RunResult]) -> RunResult:
    """Highest best-validation score; the earliest seed wins ties."""
    if not results:
        raise ValueError("no runs to select from")
    best = results[0]
    for r in results[1:]:
        if r.best_score > best.best_score:
            best = r
    return best


def run_seeds(fold: FoldSpec, records: dict[str, TrialRecord], config: RunConfig, seeds=None,
              out_dir=None, executor=None) -> tuple[RunResult, list[RunResult]]:
    """Train one run per seed and pick the best; writes ``selection.json`` under ``out_dir``."""
    seeds = list(seeds if seeds is not None else config.seeds)
    root = Path(out_dir) if out_dir is not None else None

    def one(s):
        return run_fold(fold, records, config, s, root / f"seed{s}" if root else None)

    if executor is None:
        results = [one(s) for s in seeds]
    else:
        results = list(executor.map(one, seeds))
    best = select_best(results)
    if root is not None:
        write_selection(root, fold.fold_index, results, best)
    return best, results


def write_selection(root, fold_index: int, results: list[RunResult], best: RunResult) -> None:
    sel = {"fold_index": fold_index, "selected_seed": best.seed,
           "scores": {str(r.seed): r.best_score for r in results},
           "best_report": best.best_report.to_dict()}
    atomic_write_text(Path(root) / "selection.json", json.dumps(sel, indent=1, sort_keys=True) + "\n")
