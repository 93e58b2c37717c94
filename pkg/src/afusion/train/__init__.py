"""Optimizer, scheduler, checkpoints and the fold training loop."""
from .checkpoint import CheckpointError, CheckpointRecord, load_checkpoint, save_checkpoint
from .loop import evaluate, model_from_checkpoint, predict_trials, run_fold, run_seeds, select_best
from .optim import Adam, OptimizerState, adam_step
from .scheduler import SchedulerConfig, SchedulerState, TickActions, scheduler_tick
