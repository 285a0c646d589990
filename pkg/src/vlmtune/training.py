"""Training loop: language-modeling objective, AdamW, cosine schedule.

Mini-batches are shuffled per epoch with seeds derived from (seed, epoch),
losses are averaged over the batch by summing per-sample losses, and
checkpoints carry full optimizer state so an interrupted run resumes
bit-identically. Two-stage training (ordinary data, then instruction-format
data) restarts the optimizer and the schedule for the second stage.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import GradTape, backward
from .checkpoint import load_model, optimizer_state_from, save_model
from .errors import ConfigError, PlanError, TrainingDivergedError
from .model import VLModel
from .optim import AdamW

PARADIGMS = ("origin", "instruct", "origin_then_instruct")


@dataclass
class TrainConfig:
    """Optimization settings; defaults follow the published recipe.

    The published run used base_lr 2e-5, weight decay 0.05, min_lr 0,
    130 epochs, batch size 20. Epochs and batch size default to desk-scale
    values; everything is overridable.
    """

    base_lr: float = 2e-5
    weight_decay: float = 0.05
    min_lr: float = 0.0
    epochs: int = 50
    batch_size: int = 4
    seed: int = 0
    paradigm: str = "origin"
    plan: str = "T,T,T"
    train_path: str = ""
    instruct_path: str = ""
    bench_path: str = ""
    image_root: str = ""
    out_dir: str = ""
    checkpoint_interval: int = 0  # epochs between periodic checkpoints; 0 = final only
    max_answer_len: int = 24

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ConfigError(f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepLog:
    step: int
    stage: str
    lr: float
    loss: float


@dataclass
class RunLog:
    """Per-step records plus per-epoch means and the final checkpoint path."""

    steps: list = field(default_factory=list)
    epoch_means: list = field(default_factory=list)  # (stage, epoch, mean_loss)
    wall_clock: float = 0.0
    final_checkpoint: str = ""

    def losses(self, stage: Optional[str] = None) -> list[float]:
        return [s.loss for s in self.steps if stage is None or s.stage == stage]

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "stage", "lr", "loss"])
            for s in self.steps:
                w.writerow([s.step, s.stage, f"{s.lr:.10g}", f"{s.loss:.8g}"])


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 7919, epoch]).permutation(n)


def _batch_loss(model: VLModel, batch) -> ag.Tensor:
    total = None
    for s in batch:
        loss = model.lm_loss(s.image, s.question_ids, s.answer_ids)
        total = loss if total is None else ag.add(total, loss)
    return ag.scale(total, 1.0 / len(batch))


def train(model: VLModel, samples, cfg: TrainConfig, stage: str = "origin",
          log: Optional[RunLog] = None, out_dir=None,
          resume_from=None) -> RunLog:
    """Train ``model`` on ``samples``; returns (and appends to) the run log.

    A non-finite loss aborts with :class:`TrainingDivergedError`; the most
    recent periodic checkpoint stays on disk.
    """
    if model.applied_plan is None:
        raise PlanError("apply a tuning plan before training")
    if not samples:
        raise ConfigError("training dataset is empty")
    log = log if log is not None else RunLog()
    out_dir = Path(out_dir) if out_dir else (Path(cfg.out_dir) if cfg.out_dir else None)

    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    trainables = list(model.trainable_parameters())
    opt = AdamW(trainables, base_lr=cfg.base_lr, weight_decay=cfg.weight_decay,
                min_lr=cfg.min_lr, total_steps=total_steps) if trainables else None

    start_epoch = 0
    global_step = len([s for s in log.steps if s.stage == stage])
    if resume_from is not None:
        extras, tensors = load_model(resume_from, model)
        start_epoch = int(extras["epoch"])
        global_step = int(extras["global_step"])
        if opt is not None:
            opt.load_state(optimizer_state_from(tensors), extras.get("optimizer"))

    last_checkpoint = None
    t0 = time.perf_counter()
    for epoch in range(start_epoch, cfg.epochs):
        order = _epoch_order(cfg.seed, epoch, len(samples))
        epoch_losses = []
        for b in range(steps_per_epoch):
            batch = [samples[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            with GradTape():
                loss = _batch_loss(model, batch)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDivergedError(
                    f"non-finite loss at stage {stage!r} epoch {epoch} step {global_step}",
                    last_checkpoint=last_checkpoint)
            lr = opt.lr_for_next_step() if opt is not None else 0.0
            if opt is not None:
                backward(loss)
                opt.step()
            log.steps.append(StepLog(global_step, stage, lr, loss_val))
            epoch_losses.append(loss_val)
            global_step += 1
        log.epoch_means.append((stage, epoch, float(np.mean(epoch_losses))))
        if out_dir and cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0:
            last_checkpoint = out_dir / f"ckpt_{stage}_ep{epoch + 1:04d}.ckpt"
            save_model(last_checkpoint, model, optimizer=opt,
                       extras={"epoch": epoch + 1, "global_step": global_step,
                               "stage": stage})
    log.wall_clock += time.perf_counter() - t0
    if out_dir:
        final = out_dir / f"final_{stage}.ckpt"
        save_model(final, model, optimizer=opt,
                   extras={"epoch": cfg.epochs, "global_step": global_step,
                           "stage": stage})
        log.final_checkpoint = str(final)
        log.write_csv(out_dir / "loss.csv")
    return log


def train_two_stage(model: VLModel, origin_cfg: TrainConfig, instruct_cfg: TrainConfig,
                    origin_samples, instruct_samples, out_dir=None) -> RunLog:
    """Ordinary-data fine-tuning followed by instruction-tuning.

    Stage two starts from the stage-one weights with a fresh optimizer state
    and a fresh cosine schedule; both stages share one run log, marked by
    their stage names.
    """
    log = RunLog()
    train(model, origin_samples, origin_cfg, stage="origin", log=log, out_dir=out_dir)
    train(model, instruct_samples, instruct_cfg, stage="instruct", log=log, out_dir=out_dir)
    return log
