"""The two-stage training procedure over a model hierarchy.

Stage order is fixed: optional supervised pretraining of the top model
(to mint the frozen teacher), joint training of all slots with live
masks, an optional pass with the masks pinned, then student fine-tuning
with teacher promotion. Every batch is one optimizer step; metrics go
to a CSV with one row per (batch, participating slot).
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .arch import count_stats
from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentConfig, Dataset, batches
from .distill import DistillConfig, slot_loss
from .hierarchy import ModelHierarchy, SlotForward
from .optim import LRSchedule, ScoreOptimizer, SGDNesterov, lr_at


class TrainingError(RuntimeError):
    pass


CSV_HEADER = ("step,epoch,stage,slot,loss,task_loss,kd_loss,hint_loss,"
              "accuracy,lr,kept_filters_total,flops,params")

STAGES = ("pretrain", "joint", "intermediate_finetune", "student_finetune")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    base_lr: float = 0.008
    cycle_len_epochs: int = 5
    cycle_decay: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0004
    score_lr: float = 0.01
    score_optimizer: str = "sgd"
    distill: DistillConfig = field(default_factory=DistillConfig)
    augment: AugmentConfig | None = None
    promotion_patience: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.promotion_patience < 1:
            raise ValueError(f"promotion_patience must be >= 1, got "
                             f"{self.promotion_patience}")
        if self.score_lr < 0:
            raise ValueError(f"score_lr must be >= 0, got {self.score_lr}")


@dataclass
class TrainState:
    epoch: int = 0          # completed epochs, global across stages
    step: int = 0           # completed optimizer steps
    stage: str = "pretrain"
    teacher_index: int = 1  # slot teaching the student; len(slots) = frozen
    streak: int = 0         # consecutive epochs the student beat its teacher
    seed: int = 0
    val_history: dict = field(default_factory=dict)


def apply_promotion(state: TrainState, student_acc: float, teacher_acc: float,
                    patience: int, slot_count: int) -> bool:
    """Record one epoch's validation accuracies and advance the teacher
    index after `patience` consecutive student wins. The index never
    decreases and stops at slot_count, which stands for the frozen
    teacher. Returns whether a promotion happened."""
    state.val_history.setdefault("student", []).append(float(student_acc))
    state.val_history.setdefault("teacher", []).append(float(teacher_acc))
    state.streak = state.streak + 1 if student_acc > teacher_acc else 0
    if state.streak >= patience:
        state.streak = 0
        if state.teacher_index < slot_count:
            state.teacher_index += 1
            return True
    return False


def evaluate(h: ModelHierarchy, slot_index: int, ds: Dataset,
             batch_size: int = 256,
             augment: AugmentConfig | None = None) -> float:
    """Deterministic top-1 accuracy of one slot over a split."""
    correct = 0
    for images, one_hot in batches(ds, batch_size, seed=0, epoch=0,
                                   augment=augment, shuffle=False):
        with ad.no_grad():
            fwd = h.forward_slot(slot_index, images, mode="eval")
        correct += int((fwd.logits.data.argmax(axis=1)
                        == one_hot.argmax(axis=1)).sum())
    return correct / ds.n


def evaluate_frozen(h: ModelHierarchy, ds: Dataset, batch_size: int = 256,
                    augment: AugmentConfig | None = None) -> float:
    correct = 0
    for images, one_hot in batches(ds, batch_size, seed=0, epoch=0,
                                   augment=augment, shuffle=False):
        fwd = h.forward_frozen(images)
        correct += int((fwd.logits.data.argmax(axis=1)
                        == one_hot.argmax(axis=1)).sum())
    return correct / ds.n


class MetricsWriter:
    """Appends CSV rows; keeps them in memory as dicts for inspection."""

    def __init__(self, path: str | None):
        self.path = path
        self.rows: list[dict] = []
        self._fh = None
        if path is not None:
            fresh = not os.path.exists(path) or os.path.getsize(path) == 0
            self._fh = open(path, "a")
            if fresh:
                self._fh.write(CSV_HEADER + "\n")
                self._fh.flush()

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh is not None:
            cells = []
            for key in CSV_HEADER.split(","):
                v = row[key]
                cells.append(repr(v) if isinstance(v, float) else str(v))
            self._fh.write(",".join(cells) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class Trainer:
    """Owns the hierarchy, optimizers, stage bookkeeping, and metrics."""

    def __init__(self, h: ModelHierarchy, train_data: Dataset,
                 cfg: TrainConfig, val_data: Dataset | None = None,
                 out_dir: str | None = None):
        self.h = h
        self.data = train_data
        self.val_data = val_data
        self.cfg = cfg
        self.out_dir = out_dir
        steps = math.ceil(train_data.n / cfg.batch_size)
        self.schedule = LRSchedule(cfg.base_lr, cfg.cycle_len_epochs,
                                   cfg.cycle_decay, steps)
        self.weight_opt = SGDNesterov(h.all_parameters(), cfg.momentum,
                                      cfg.weight_decay)
        self.score_opt = ScoreOptimizer(cfg.score_optimizer)
        self.state = TrainState(seed=cfg.seed)
        self.eval_augment = None
        if cfg.augment is not None and cfg.augment.normalization is not None:
            self.eval_augment = AugmentConfig(
                normalization=cfg.augment.normalization)
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
        self.metrics = MetricsWriter(
            os.path.join(out_dir, "metrics.csv") if out_dir else None)

    # -- stage bookkeeping --------------------------------------------------

    def _enter_stage(self, stage: str) -> None:
        if STAGES.index(stage) < STAGES.index(self.state.stage):
            raise TrainingError(f"stage can only move forward, not "
                                f"{self.state.stage} -> {stage}")
        self.state.stage = stage

    def _hint_ids(self):
        return self.cfg.distill.hint_layers

    def _needs_teacher(self) -> bool:
        d = self.cfg.distill
        return d.lambda_kd > 0 or (d.lambda_hint > 0 and len(self._hint_ids()) > 0)

    @staticmethod
    def _maps(fwd: SlotForward):
        return [fwd.hint_maps[k] for k in sorted(fwd.hint_maps)]

    def _emit(self, slot_index: int, loss: float, parts: dict, acc: float,
              lr: float) -> None:
        mask = self.h.slots[slot_index].state.mask
        stats = count_stats(self.h.arch, mask)
        self.metrics.write({
            "step": self.state.step, "epoch": self.state.epoch,
            "stage": self.state.stage, "slot": slot_index,
            "loss": float(loss), "task_loss": parts["task"],
            "kd_loss": parts["kd"], "hint_loss": parts["hint"],
            "accuracy": float(acc), "lr": float(lr),
            "kept_filters_total": mask.kept_total(),
            "flops": stats.total_flops, "params": stats.total_params,
        })

    @staticmethod
    def _batch_accuracy(logits: np.ndarray, one_hot: np.ndarray) -> float:
        return float((logits.argmax(axis=1)
                      == one_hot.argmax(axis=1)).mean())

    def _epoch_batches(self):
        return batches(self.data, self.cfg.batch_size, self.state.seed,
                       self.state.epoch, augment=self.cfg.augment,
                       shuffle=True)

    # -- pretraining of the top model ---------------------------------------

    def pretrain_top(self, epochs: int) -> None:
        """Supervised training of the top slot only, then freeze it as
        the permanent teacher. Must precede the joint stage when any
        distillation weight is nonzero."""
        self._enter_stage("pretrain")
        top = len(self.h.slots) - 1
        names = {p.name for p in self.h.shared_parameters()} \
            | {p.name for p in self.h.slot_parameters(top)}
        for _ in range(epochs):
            for images, one_hot in self._epoch_batches():
                fwd = self.h.forward_slot(top, images, mode="train")
                loss = ad.softmax_cross_entropy(fwd.logits, one_hot)
                ad.backward(loss)
                lr = lr_at(self.schedule, self.state.step)
                self.weight_opt.step(lr, include=names)
                self.weight_opt.zero_grad()
                self._emit(top, float(loss.data),
                           {"task": float(loss.data), "kd": 0.0, "hint": 0.0},
                           self._batch_accuracy(fwd.logits.data, one_hot), lr)
                self.state.step += 1
            self.state.epoch += 1
        self.h.freeze_teacher()

    # -- joint and intermediate stages --------------------------------------

    def joint_epoch(self) -> None:
        self._enter_stage("joint")
        if self.h.frozen is None and self._needs_teacher():
            raise TrainingError("the top slot distills from a frozen teacher; "
                                "run pretrain_top() or load one first")
        self._cascade_epoch(update_scores=True)
        self.state.epoch += 1

    def intermediate_epoch(self) -> None:
        """Joint training with the masks pinned: no score or mask updates."""
        self._enter_stage("intermediate_finetune")
        self._cascade_epoch(update_scores=False)
        self.state.epoch += 1

    def _cascade_epoch(self, update_scores: bool) -> None:
        h, cfg = self.h, self.cfg
        hint_ids = self._hint_ids()
        slots = len(h.slots)
        for images, one_hot in self._epoch_batches():
            forwards = h.forward_all(images, mode="train", hint_ids=hint_ids,
                                     want_context=update_scores)
            frozen_fwd = None
            if self._needs_teacher():
                frozen_fwd = h.forward_frozen(images, hint_ids=hint_ids)
            total = None
            slot_records = []
            for i in range(slots):
                teacher = forwards[i + 1] if i + 1 < slots else frozen_fwd
                t_logits = teacher.logits if teacher is not None else None
                t_maps = self._maps(teacher) if teacher is not None else \
                    self._maps(forwards[i])
                loss, parts = slot_loss(forwards[i].logits, one_hot, t_logits,
                                        self._maps(forwards[i]), t_maps,
                                        cfg.distill)
                total = loss if total is None else ad.add(total, loss)
                acc = self._batch_accuracy(forwards[i].logits.data, one_hot)
                slot_records.append((float(loss.data), parts, acc))
            ad.backward(total)
            lr = lr_at(self.schedule, self.state.step)
            self.weight_opt.step(lr)
            self.weight_opt.zero_grad()
            if update_scores and cfg.score_lr > 0:
                grads = h.route_gamma_gradients(forwards)
                self.score_opt.step(
                    {i: h.slots[i].scores for i in grads}, grads, cfg.score_lr)
                h.refresh_masks()
            for i, (loss_v, parts, acc) in enumerate(slot_records):
                self._emit(i, loss_v, parts, acc, lr)
            self.state.step += 1

    # -- student fine-tuning -------------------------------------------------

    def _teacher_logits_and_maps(self, images, hint_ids):
        t = self.state.teacher_index
        if t >= len(self.h.slots):
            fwd = self.h.forward_frozen(images, hint_ids=hint_ids)
        else:
            with ad.no_grad():
                fwd = self.h.forward_slot(t, images, mode="eval",
                                          hint_ids=hint_ids)
        return fwd.logits, self._maps(fwd)

    def finetune_epoch(self) -> None:
        """Train the student alone against its current teacher; the
        masks and scores stay fixed, and only student-reachable
        parameters (shared kernels, slot-0 stem/BN/heads) move."""
        self._enter_stage("student_finetune")
        h, cfg = self.h, self.cfg
        if self.state.teacher_index >= len(h.slots) and h.frozen is None:
            raise TrainingError("teacher index points at the frozen model "
                                "but none exists")
        hint_ids = self._hint_ids()
        names = {p.name for p in h.shared_parameters()} \
            | {p.name for p in h.slot_parameters(0)}
        for images, one_hot in self._epoch_batches():
            fwd = h.forward_slot(0, images, mode="train", hint_ids=hint_ids)
            if self._needs_teacher():
                t_logits, t_maps = self._teacher_logits_and_maps(images,
                                                                 hint_ids)
            else:
                t_logits, t_maps = None, self._maps(fwd)
            loss, parts = slot_loss(fwd.logits, one_hot, t_logits,
                                    self._maps(fwd), t_maps, cfg.distill)
            ad.backward(loss)
            lr = lr_at(self.schedule, self.state.step)
            self.weight_opt.step(lr, include=names)
            self.weight_opt.zero_grad()
            self._emit(0, float(loss.data), parts,
                       self._batch_accuracy(fwd.logits.data, one_hot), lr)
            self.state.step += 1
        self.state.epoch += 1
        if self.val_data is not None:
            self._promote_if_due()

    def _promote_if_due(self) -> None:
        student_acc = evaluate(self.h, 0, self.val_data,
                               augment=self.eval_augment)
        t = self.state.teacher_index
        if t >= len(self.h.slots):
            teacher_acc = evaluate_frozen(self.h, self.val_data,
                                          augment=self.eval_augment)
        else:
            teacher_acc = evaluate(self.h, t, self.val_data,
                                   augment=self.eval_augment)
        apply_promotion(self.state, student_acc, teacher_acc,
                        self.cfg.promotion_patience, len(self.h.slots))

    # -- stage runners -------------------------------------------------------

    def run_joint(self, epochs: int) -> None:
        for _ in range(epochs):
            self.joint_epoch()

    def run_intermediate(self, epochs: int) -> None:
        for _ in range(epochs):
            self.intermediate_epoch()

    def run_finetune(self, epochs: int) -> None:
        for _ in range(epochs):
            self.finetune_epoch()

    # -- persistence ---------------------------------------------------------

    def save(self, path: str) -> None:
        tensors = dict(self.h.named_tensors())
        tensors.update(self.weight_opt.state_tensors("opt"))
        tensors.update(self.score_opt.state_tensors("scoreopt"))
        meta = {
            "kind": "cascade-train",
            "arch": self.h.arch.name,
            "keep_ratios": self.h.keep_ratios,
            "state": asdict(self.state),
        }
        save_checkpoint(path, tensors, meta)

    def load(self, path: str) -> None:
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "cascade-train":
            raise TrainingError(f"{path}: not a training checkpoint")
        if meta.get("keep_ratios") != self.h.keep_ratios:
            raise TrainingError(f"checkpoint keep ratios "
                                f"{meta.get('keep_ratios')} do not match the "
                                f"hierarchy's {self.h.keep_ratios}")
        model = {k: v for k, v in tensors.items()
                 if not k.startswith(("opt.", "scoreopt."))}
        self.h.load_named_tensors(model)
        self.weight_opt.load_state_tensors("opt", tensors)
        self.score_opt.load_state_tensors("scoreopt", tensors)
        self.state = TrainState(**meta["state"])

    def close(self) -> None:
        self.metrics.close()
