"""Warmup / reduce-on-plateau / progressive-unfreezing state machine.

Epoch-level rules, applied by ``scheduler_tick`` after each epoch's validation:

* Warmup epochs (the first ``warmup_epochs`` and the one epoch after every
  unfreeze) ramp the lr per batch from ``min_lr`` to ``lr``. They track the
  best score but never count towards a plateau.
* Plateau epochs: a strictly higher score resets the counter, anything else
  increments it. When the lr sits at ``min_lr`` and the counter reaches
  ``patience`` the next backbone group is unfrozen and the lr returns to
  ``lr``; with no group left the run is marked exhausted instead. Otherwise
  a counter above ``patience`` multiplies the lr by ``factor`` (floored at
  ``min_lr``) and resets the counter.
* Once exhausted, every non-improving epoch increments the early-stop
  counter (an improvement resets it); reaching ``early_stop`` stops the run,
  as does reaching ``max_epoch``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace


@dataclass(frozen=True)
class SchedulerConfig:
    lr: float = 1e-5
    min_lr: float = 1e-8
    factor: float = 0.1
    patience: int = 5
    warmup_epochs: int = 5
    early_stop: int = 20
    max_epoch: int = 100
    n_groups: int = 3


@dataclass(frozen=True)
class SchedulerState:
    epoch: int = 0                  # the epoch about to run (or just finished, before the tick)
    phase: str = "warmup"
    current_group: int = 1
    lr: float = 1e-5
    decays: int = 0                 # decades below the base lr since the last reset
    best_val: float | None = None
    epochs_since_best: int = 0
    early_stop_counter: int = 0
    groups_exhausted: bool = False
    stopped: bool = False

    @classmethod
    def initial(cls, cfg: SchedulerConfig) -> "SchedulerState":
        phase = "warmup" if cfg.warmup_epochs > 0 else "plateau"
        return cls(phase=phase, lr=cfg.lr)

    @property
    def unfrozen_groups(self) -> tuple[int, ...]:
        return tuple(range(1, self.current_group + 1))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SchedulerState":
        return cls(**d)


@dataclass(frozen=True)
class TickActions:
    improved: bool = False
    decayed: bool = False
    unfrozen_group: int | None = None
    exhausted: bool = False
    stop: bool = False

    def describe(self) -> str:
        parts = []
        if self.improved:
            parts.append("best")
        if self.decayed:
            parts.append("decay")
        if self.unfrozen_group is not None:
            parts.append(f"unfreeze:{self.unfrozen_group}")
        if self.exhausted:
            parts.append("exhausted")
        if self.stop:
            parts.append("stop")
        return "|".join(parts)


def _lr_for(cfg: SchedulerConfig, decays: int) -> float:
    lr = float(f"{cfg.lr * cfg.factor ** decays:.12g}")
    if lr <= cfg.min_lr * (1 + 1e-9):
        return cfg.min_lr
    return lr


def at_floor(cfg: SchedulerConfig, state: SchedulerState) -> bool:
    return state.lr <= cfg.min_lr * (1 + 1e-9)


def warmup_lr(cfg: SchedulerConfig, state: SchedulerState, batch: int, n_batches: int) -> float:
    """Per-batch lr inside a warmup epoch: linear from min_lr to the target, hitting it on the last batch."""
    frac = (batch + 1) / max(n_batches, 1)
    return cfg.min_lr + (state.lr - cfg.min_lr) * frac


def batch_lr(cfg: SchedulerConfig, state: SchedulerState, batch: int, n_batches: int) -> float:
    if state.phase == "warmup":
        return warmup_lr(cfg, state, batch, n_batches)
    return state.lr


def scheduler_tick(state: SchedulerState, val_score: float, cfg: SchedulerConfig) -> tuple[SchedulerState, TickActions]:
    if state.stopped:
        raise RuntimeError("scheduler_tick called after the run stopped")
    improved = state.best_val is None or val_score > state.best_val
    best = val_score if improved else state.best_val
    counter = state.epochs_since_best
    early = state.early_stop_counter
    group, decays, lr = state.current_group, state.decays, state.lr
    exhausted = state.groups_exhausted
    decayed = newly_exhausted = False
    unfrozen = None

    if state.phase == "warmup":
        counter = 0
    else:
        counter = 0 if improved else counter + 1
        if exhausted:
            early = 0 if improved else early + 1
        if not exhausted and at_floor(cfg, state) and counter >= cfg.patience:
            if group < cfg.n_groups:
                group += 1
                unfrozen = group
                decays, lr, counter = 0, cfg.lr, 0
            else:
                exhausted = newly_exhausted = True
        elif counter > cfg.patience and not at_floor(cfg, state):
            decays += 1
            lr = _lr_for(cfg, decays)
            counter = 0
            decayed = True

    next_epoch = state.epoch + 1
    phase = "warmup" if (next_epoch < cfg.warmup_epochs or unfrozen is not None) else "plateau"
    stop = early >= cfg.early_stop or next_epoch >= cfg.max_epoch
    new = replace(state, epoch=next_epoch, phase=phase, current_group=group, lr=lr, decays=decays,
                  best_val=best, epochs_since_best=counter, early_stop_counter=early,
                  groups_exhausted=exhausted, stopped=stop)
    return new, TickActions(improved, decayed, unfrozen, newly_exhausted, stop)
