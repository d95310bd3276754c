"""Training loop: Adam with cosine annealing over a fixed step budget.

The loop is deliberately plain — no weight decay, no gradient clipping,
no augmentation — so that ordering-based comparisons between strategies
measure the strategies, not the tricks.  Everything is deterministic
given the config seed.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .engine import Parameter
from .memory import MemoryReport, predict_retained
from .strategies import ModelSpec

LOSS_KINDS = ("cross_entropy", "l1", "mse")


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 12          # one cosine period
    loss: str = "cross_entropy"
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    memory: MemoryReport | None = None

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_metric"]
        for i, (tl, vl, vm) in enumerate(zip(self.train_loss, self.val_loss,
                                             self.val_metric), start=1):
            lines.append(f"{i},{tl:.8g},{vl:.8g},{vm:.8g}")
        return "\n".join(lines) + "\n"


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """lr at step t of a cosine schedule: lr0 * 0.5 * (1 + cos(pi*t/T))."""
    if t < 0 or t > total:
        raise ValueError(f"step {t} outside 0..{total}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


class AdamState:
    """First/second moment buffers keyed by parameter name."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def state_elems(self) -> int:
        return sum(a.size for a in self.m.values()) \
            + sum(a.size for a in self.v.values())


def adam_step(params: list[Parameter], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1=0.9, beta2=0.999,
              eps=1e-8) -> None:
    """Bias-corrected Adam update, applied only to trainable parameters.

    Frozen parameters are never touched, whatever the grads map holds.
    Moments update even at lr=0 (the schedule endpoint).
    """
    state.step += 1
    t = state.step
    for p in params:
        if not p.trainable:
            continue
        g = grads.get(p.name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise E.ShapeError(
                f"gradient shape {g.shape} != parameter shape "
                f"{p.data.shape} for {p.name}")
        g = g.astype(np.float32, copy=False)
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[p.name] = m
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(np.float32)


def make_loss(loss_kind: str, logits: E.Tensor, labels: np.ndarray,
              n_classes: int, tape: E.Tape) -> E.Tensor:
    """Attach the configured loss to a tape.

    Cross-entropy consumes integer labels; the regression losses target
    the one-hot encoding so every loss kind runs on the same tasks.
    """
    if loss_kind == "cross_entropy":
        return E.cross_entropy(logits, labels)
    onehot = np.zeros((labels.shape[0], n_classes), np.float32)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    target = tape.leaf(onehot)
    if loss_kind == "l1":
        return E.l1_loss(logits, target)
    return E.mse_loss(logits, target)


def evaluate(model: ModelSpec, x: np.ndarray, y: np.ndarray,
             loss_kind: str, n_classes: int, batch_size: int):
    """Mean loss and accuracy over a split, in fixed batch order."""
    losses = []
    correct = 0
    for lo in range(0, len(y), batch_size):
        hi = min(lo + batch_size, len(y))
        tape = E.Tape()
        logits, _ = model.forward(tape, tape.leaf(x[lo:hi]))
        loss = make_loss(loss_kind, logits, y[lo:hi], n_classes, tape)
        losses.append(float(loss.data) * (hi - lo))
        correct += int((logits.data.argmax(axis=1) == y[lo:hi]).sum())
    return sum(losses) / len(y), correct / len(y)


def param_checksum(params) -> str:
    """Order-independent digest of parameter names and contents."""
    h = hashlib.sha256()
    for p in sorted(params, key=lambda p: p.name):
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return h.hexdigest()


def train(model: ModelSpec, data, cfg: TrainConfig) -> TrainLog:
    """Fit ``model`` on ``data`` (a task_suite Dataset); returns the log.

    Deterministic given ``cfg.seed``: batch order is drawn from a
    dedicated generator, evaluation runs after every epoch, and the
    memory report is taken from the first step's tape.
    """
    log = TrainLog()
    if cfg.epochs == 0:
        return log
    n = len(data.y_train)
    if n < cfg.batch_size:
        raise ValueError("training split smaller than one batch")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = AdamState()
    steps_per_epoch = n // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    started = time.perf_counter()
    step = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_losses = []
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            tape = E.Tape()
            logits, _ = model.forward(tape, tape.leaf(data.x_train[idx]))
            loss = make_loss(cfg.loss, logits, data.y_train[idx],
                             data.n_classes, tape)
            if log.memory is None:
                log.memory = predict_retained(tape, loss)
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                raise TrainingDiverged(
                    f"non-finite loss {loss_value} at step {step}")
            tape.drop_unretained(keep=[loss])
            grads = tape.backward(loss)
            lr = cosine_lr(step, total_steps, cfg.lr0)
            log.lr_trace.append(lr)
            adam_step(params, grads, state, lr,
                      beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
            epoch_losses.append(loss_value)
            step += 1
        val_loss, val_acc = evaluate(model, data.x_val, data.y_val,
                                     cfg.loss, data.n_classes,
                                     cfg.batch_size)
        log.train_loss.append(sum(epoch_losses) / len(epoch_losses))
        log.val_loss.append(val_loss)
        log.val_metric.append(val_acc)
    log.wall_time = time.perf_counter() - started
    return log
