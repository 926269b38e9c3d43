"""Two-phase training loop and its callback state machines.

Phases run in order (warm-up with a frozen backbone, then fine-tuning
with everything except normalization parameters unfrozen).  The
optimizer and learning rate reset at the phase boundary to the phase's
configured values; the early-stop patience counter carries across the
boundary.  After every epoch the callbacks run in a fixed order:
best-checkpoint retention (monitoring validation accuracy), LR reduction
on plateau, then early stopping (both monitoring validation loss by
default).  The per-epoch history is appended to a CSV incrementally so a
diverged run still leaves every completed epoch on disk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .augment import AugmentConfig, augment_image
from .checkpoint import save_checkpoint
from .loss import ClassWeights, LossConfig, batch_loss, smooth_targets
from .model import CapabilityError, TrainableModel
from .optim import STEP_FUNCTIONS, OptimConfig, OptimState
from .seeding import DROPOUT_TAG, SHUFFLE_TAG, keyed_rng

HISTORY_HEADER = "epoch,phase,lr,train_loss,train_acc,val_loss,val_acc"
FREEZE_POLICIES = ("freeze_backbone", "unfreeze_all_except_normalization")

EvaluateFn = Callable[[TrainableModel, np.ndarray, np.ndarray], tuple[float, float]]


class DivergenceError(RuntimeError):
    """Non-finite training loss; carries the completed-epoch history."""

    def __init__(self, message: str, history: list["EpochRecord"]) -> None:
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class PhaseConfig:
    name: str
    epochs: int
    optimizer: OptimConfig
    optimizer_kind: str = "adam"
    freeze_policy: str = "freeze_backbone"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer_kind not in STEP_FUNCTIONS:
            raise ValueError(f"unknown optimizer kind {self.optimizer_kind!r}")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ValueError(f"unknown freeze policy {self.freeze_policy!r}")


@dataclass(frozen=True)
class EarlyStopConfig:
    monitor: str = "val_loss"
    patience: int = 3
    min_delta: float = 0.0


@dataclass(frozen=True)
class PlateauConfig:
    monitor: str = "val_loss"
    factor: float = 0.3
    patience: int = 2
    min_delta: float = 0.0
    min_lr: float = 1e-7

    def __post_init__(self) -> None:
        if not 0.0 < self.factor < 1.0:
            raise ValueError("factor must be in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass(frozen=True)
class CallbackConfig:
    early_stop: EarlyStopConfig = EarlyStopConfig()
    plateau: PlateauConfig = PlateauConfig()


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    phase: str
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float

    def csv_row(self) -> str:
        return (
            f"{self.epoch},{self.phase},{self.lr!r},{self.train_loss!r},"
            f"{self.train_acc!r},{self.val_loss!r},{self.val_acc!r}"
        )


@dataclass
class TrainLoopState:
    global_epoch: int = 0
    current_lr: float = 0.0
    best_val_acc: float = -math.inf
    best_val_loss: float = math.inf
    es_wait: int = 0
    plateau_wait: int = 0
    best_epoch: int = 0
    history: list[EpochRecord] = field(default_factory=list)


@dataclass
class SplitData:
    train_images: np.ndarray  # (N, 48, 48)
    train_labels: np.ndarray  # (N,)
    val_images: np.ndarray
    val_labels: np.ndarray


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_val_acc: float
    best_params: dict[str, np.ndarray]
    stopped_early: bool


def _monitored(record: EpochRecord, monitor: str) -> float:
    if monitor not in ("val_loss", "val_acc"):
        raise ValueError(f"unknown monitor {monitor!r}")
    return getattr(record, monitor)


def _improved(monitor: str, current: float, best_prev: float, min_delta: float) -> bool:
    if monitor == "val_acc":  # higher is better
        return current > best_prev + min_delta
    return current < best_prev - min_delta


def _best_previous(history: Sequence[EpochRecord], monitor: str) -> float:
    values = [_monitored(r, monitor) for r in history[:-1]]
    if not values:
        return -math.inf if monitor == "val_acc" else math.inf
    return max(values) if monitor == "val_acc" else min(values)


def plateau_update(
    history: Sequence[EpochRecord],
    plateau_wait: int,
    current_lr: float,
    factor: float = 0.3,
    patience: int = 2,
    min_delta: float = 0.0,
    *,
    min_lr: float = 1e-7,
    monitor: str = "val_loss",
) -> tuple[float, int]:
    """LR-on-plateau step after the latest epoch in ``history``.

    Returns the learning rate for the next epoch and the new wait
    counter.  A reduction multiplies by ``factor``, clamps at ``min_lr``,
    and resets the wait.
    """
    current = _monitored(history[-1], monitor)
    if _improved(monitor, current, _best_previous(history, monitor), min_delta):
        return current_lr, 0
    wait = plateau_wait + 1
    if wait >= patience:
        return max(current_lr * factor, min_lr), 0
    return current_lr, wait


def early_stop_update(
    history: Sequence[EpochRecord],
    es_wait: int,
    patience: int = 3,
    min_delta: float = 0.0,
    *,
    monitor: str = "val_loss",
) -> tuple[bool, int]:
    """Early-stopping step: stop after ``patience`` epochs without improvement."""
    current = _monitored(history[-1], monitor)
    if _improved(monitor, current, _best_previous(history, monitor), min_delta):
        return False, 0
    wait = es_wait + 1
    return wait >= patience, wait


def apply_freeze_policy(model: TrainableModel, policy: str) -> None:
    """Set per-group trainable flags; idempotent."""
    if policy not in FREEZE_POLICIES:
        raise ValueError(f"unknown freeze policy {policy!r}")
    for group in model.parameter_groups():
        if group.role not in ("backbone", "head", "normalization"):
            raise CapabilityError(f"unknown role tag {group.role!r} on group {group.name!r}")
        if policy == "freeze_backbone":
            group.trainable = group.role == "head"
        else:
            group.trainable = group.role != "normalization"


def evaluate_model(
    model: TrainableModel,
    images: np.ndarray,
    labels: np.ndarray,
    loss_cfg: LossConfig,
    batch_size: int = 512,
) -> tuple[float, float]:
    """Unweighted smoothed-CE loss and accuracy, preprocessing only."""
    labels = np.asarray(labels)
    total_loss = 0.0
    correct = 0
    for start in range(0, len(labels), batch_size):
        batch_labels = labels[start : start + batch_size]
        inputs = model.prepare(images[start : start + batch_size])
        probs = model.forward(inputs, training=False)
        targets = smooth_targets(batch_labels, loss_cfg.epsilon, loss_cfg.num_classes)
        total_loss += batch_loss(probs, targets, np.ones(len(batch_labels))) * len(batch_labels)
        correct += int(np.sum(np.argmax(probs, axis=1) == batch_labels))
    n = len(labels)
    return total_loss / n, correct / n


def _decay_exempt(name: str, role: str) -> bool:
    # Bias vectors and normalization parameters are excluded from decay.
    return name.endswith("bias") or role == "normalization"


def _train_epoch(
    model: TrainableModel,
    data: SplitData,
    epoch: int,
    phase: PhaseConfig,
    current_lr: float,
    opt_states: dict[str, OptimState],
    *,
    loss_cfg: LossConfig,
    class_weights: ClassWeights,
    augment_cfg: AugmentConfig,
    batch_size: int,
    seed: int,
    normalize_by_weight_sum: bool,
) -> tuple[float, float]:
    n = len(data.train_labels)
    order = keyed_rng(seed, SHUFFLE_TAG, epoch).permutation(n)
    step_fn = STEP_FUNCTIONS[phase.optimizer_kind]
    groups = {g.name: g for g in model.parameter_groups()}

    loss_sum = 0.0
    correct = 0
    for batch_index, start in enumerate(range(0, n, batch_size)):
        batch = order[start : start + batch_size]
        augmented = np.stack(
            [
                augment_image(data.train_images[i], augment_cfg, (seed, epoch, int(i)))
                for i in batch
            ]
        )
        labels = data.train_labels[batch]
        inputs = model.prepare(augmented)
        targets = smooth_targets(labels, loss_cfg.epsilon, loss_cfg.num_classes)
        weights = class_weights.for_labels(labels)

        loss, probs, grads = model.loss_and_grads(
            inputs,
            targets,
            weights,
            rng_key=(seed, DROPOUT_TAG, epoch, batch_index),
            normalize_by_weight_sum=normalize_by_weight_sum,
        )
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at epoch {epoch}", [])

        loss_sum += loss * len(batch)
        correct += int(np.sum(np.argmax(probs, axis=1) == labels))

        for name, grad in grads.items():
            group = groups[name]
            if not group.trainable:
                continue
            cfg = replace(
                phase.optimizer,
                learning_rate=current_lr,
                weight_decay=0.0
                if _decay_exempt(name, group.role)
                else phase.optimizer.weight_decay,
            )
            group.values, opt_states[name] = step_fn(group.values, grad, opt_states[name], cfg)

    return loss_sum / n, correct / n


def run_training(
    model: TrainableModel,
    data: SplitData,
    phases: Sequence[PhaseConfig],
    callbacks: CallbackConfig = CallbackConfig(),
    *,
    loss_cfg: LossConfig,
    class_weights: ClassWeights,
    augment_cfg: AugmentConfig = AugmentConfig(),
    batch_size: int = 32,
    seed: int = 42,
    normalize_by_weight_sum: bool = False,
    history_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    checkpoint_metadata: dict | None = None,
    evaluate_fn: EvaluateFn | None = None,
) -> TrainResult:
    """Execute the phases and callbacks; return the best checkpoint and history.

    ``evaluate_fn`` defaults to evaluate_model and exists so callback
    behavior can be driven by scripted validation metrics in tests.
    Raises DivergenceError on a non-finite training loss, preserving the
    completed-epoch history (and the partial CSV, which is flushed row
    by row).
    """
    if not phases:
        raise ValueError("phases must be nonempty")
    if evaluate_fn is None:
        evaluate_fn = lambda m, x, y: evaluate_model(m, x, y, loss_cfg)  # noqa: E731

    state = TrainLoopState()
    best_params = model.get_parameters()
    history_file = open(history_path, "w") if history_path is not None else None
    if history_file is not None:
        history_file.write(HISTORY_HEADER + "\n")
        history_file.flush()

    def save_best(record: EpochRecord) -> None:
        if checkpoint_path is None:
            return
        metadata = dict(checkpoint_metadata or {})
        metadata.update(
            {"epoch": record.epoch, "val_acc": record.val_acc, "val_loss": record.val_loss}
        )
        save_checkpoint(checkpoint_path, best_params, metadata)

    stopped = False
    try:
        for phase in phases:
            apply_freeze_policy(model, phase.freeze_policy)
            opt_states = {
                g.name: OptimState.zeros_like(g.values)
                for g in model.parameter_groups()
                if g.trainable
            }
            state.current_lr = phase.optimizer.learning_rate
            state.plateau_wait = 0

            for _ in range(phase.epochs):
                state.global_epoch += 1
                try:
                    train_loss, train_acc = _train_epoch(
                        model,
                        data,
                        state.global_epoch,
                        phase,
                        state.current_lr,
                        opt_states,
                        loss_cfg=loss_cfg,
                        class_weights=class_weights,
                        augment_cfg=augment_cfg,
                        batch_size=batch_size,
                        seed=seed,
                        normalize_by_weight_sum=normalize_by_weight_sum,
                    )
                except DivergenceError as exc:
                    raise DivergenceError(str(exc), state.history) from None

                val_loss, val_acc = evaluate_fn(model, data.val_images, data.val_labels)
                record = EpochRecord(
                    epoch=state.global_epoch,
                    phase=phase.name,
                    lr=float(state.current_lr),
                    train_loss=float(train_loss),
                    train_acc=float(train_acc),
                    val_loss=float(val_loss),
                    val_acc=float(val_acc),
                )
                state.history.append(record)
                if history_file is not None:
                    history_file.write(record.csv_row() + "\n")
                    history_file.flush()

                # Callbacks, fixed order: checkpoint -> plateau -> early stop.
                if record.val_acc > state.best_val_acc:  # ties keep the earlier epoch
                    state.best_val_acc = record.val_acc
                    state.best_val_loss = record.val_loss
                    state.best_epoch = record.epoch
                    best_params = model.get_parameters()
                    save_best(record)

                state.current_lr, state.plateau_wait = plateau_update(
                    state.history,
                    state.plateau_wait,
                    state.current_lr,
                    callbacks.plateau.factor,
                    callbacks.plateau.patience,
                    callbacks.plateau.min_delta,
                    min_lr=callbacks.plateau.min_lr,
                    monitor=callbacks.plateau.monitor,
                )
                stopped, state.es_wait = early_stop_update(
                    state.history,
                    state.es_wait,
                    callbacks.early_stop.patience,
                    callbacks.early_stop.min_delta,
                    monitor=callbacks.early_stop.monitor,
                )
                if stopped:
                    model.set_parameters(best_params)
                    break
            if stopped:
                break
    finally:
        if history_file is not None:
            history_file.close()

    return TrainResult(
        history=state.history,
        best_epoch=state.best_epoch,
        best_val_acc=state.best_val_acc,
        best_params=best_params,
        stopped_early=stopped,
    )
