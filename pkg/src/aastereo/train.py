"""Adam training loop over stereo pairs with multi-prediction masked supervision."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tape, Tensor
from .data_io import StereoPair
from .head import MetricsReport, masked_loss, total_loss
from .model import StereoModel, default_loss_weights

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step, self.loss = step, loss


class Adam:
    def __init__(self, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise ValueError(f"Adam betas must lie in (0, 1), got {beta1}, {beta2}")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    steps_per_epoch: int | None = None  # default: one pass over the data
    batch_size: int = 4
    halve_at: list[int] | None = None  # epochs at which lr halves; default 60%, 75%, 90%
    loss_weights: list[float] | None = None
    final_only: bool = False
    seed: int = 0

    def milestones(self) -> list[int]:
        if self.halve_at is not None:
            return sorted(self.halve_at)
        return sorted({int(round(self.epochs * f)) for f in (0.6, 0.75, 0.9)} - {0})

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        return self.lr * 0.5 ** sum(1 for m in self.milestones() if epoch >= m)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_epe: float
    val_bad1: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.train_loss!r}\t{self.val_epe!r}\t{self.val_bad1!r}"


@dataclass
class TrainResult:
    log: list[EpochRecord] = field(default_factory=list)
    optimizer: Adam | None = None

    def text(self) -> str:
        return "".join(r.line() + "\n" for r in self.log)


def _stack(pairs: Sequence[StereoPair]):
    left = np.stack([p.left for p in pairs])
    right = np.stack([p.right for p in pairs])
    gt = np.stack([p.gt.values for p in pairs])
    mask = np.stack([p.gt.mask() for p in pairs])
    pseudo = None
    if all(p.pseudo is not None for p in pairs):
        pseudo = np.stack([p.pseudo.values for p in pairs])
    return left, right, gt, mask, pseudo


def batch_loss(model: StereoModel, pairs: Sequence[StereoPair], weights=None, final_only=False) -> Tensor:
    """Weighted sum of masked losses over the final and per-scale predictions."""
    left, right, gt, mask, pseudo = _stack(pairs)
    height, width = gt.shape[1:]
    output = model.forward(left, right, training=not final_only)
    preds = model.upsampled_predictions(output, height, width)
    if weights is None:
        weights = [1.0] if final_only else default_loss_weights(model.config.scales)
    if len(weights) != len(preds):
        raise ValueError(f"{len(weights)} loss weights for {len(preds)} predictions")
    losses = [masked_loss(p, gt, pseudo, mask) for p in preds]
    return total_loss(losses, weights)


def validate(model: StereoModel, pairs: Sequence[StereoPair], batch_size: int = 8) -> MetricsReport:
    """Metrics pooled over every valid pixel of ``pairs``."""
    errors, gts = [], []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        left, right, gt, mask, _ = _stack(chunk)
        pred = model.forward(left, right, training=False).final.data
        errors.append(np.abs(pred - gt)[mask])
        gts.append(gt[mask])
    err = np.concatenate(errors)
    g = np.concatenate(gts)
    if err.size == 0:
        raise ValueError("validate: no valid pixels")
    return MetricsReport(float(err.mean()), 100.0 * np.count_nonzero(err > 1) / err.size,
                         100.0 * np.count_nonzero((err > 3) & (err > 0.05 * g)) / err.size, int(err.size))


def train(model: StereoModel, dataset: Sequence[StereoPair], config: TrainerConfig,
          val: Sequence[StereoPair] | None = None, optimizer: Adam | None = None,
          on_epoch=None) -> TrainResult:
    """Deterministic Adam training; the data order is drawn from ``config.seed``."""
    if not dataset:
        raise ValueError("train: dataset is empty")
    params = model.parameters()
    opt = optimizer or Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    bs = min(config.batch_size, len(dataset))
    per_epoch = config.steps_per_epoch or max(len(dataset) // bs, 1)
    order: list[int] = []
    result = TrainResult(optimizer=opt)
    step = 0
    for epoch in range(config.epochs):
        opt.lr = config.lr_at(epoch)
        losses = []
        for _ in range(per_epoch):
            if len(order) < bs:
                order.extend(rng.permutation(len(dataset)).tolist())
            batch = [dataset[i] for i in order[:bs]]
            del order[:bs]
            with Tape() as tape:
                loss = batch_loss(model, batch, config.loss_weights, config.final_only)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(step, value)
            opt.step(tape.gradient(loss, params))
            losses.append(value)
            step += 1
        metrics = validate(model, val) if val else None
        record = EpochRecord(epoch, float(np.mean(losses)),
                             metrics.epe if metrics else float("nan"),
                             metrics.bad1 if metrics else float("nan"))
        result.log.append(record)
        log.info("epoch %d loss %.4f val_epe %.4f", epoch, record.train_loss, record.val_epe)
        if on_epoch is not None:
            on_epoch(record)
    return result
