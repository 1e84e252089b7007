"""Adam and the epoch loop with a two-stage learning-rate schedule.

The schedule starts at ``lr``; when validation loss has not improved for
``patience`` epochs the rate drops to ``lr_reduced``, and after another
``patience`` epochs without improvement training stops.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from trajforecast.dataset import Batch
from trajforecast.model import ModelParams, NetSpec, ShapeMismatch, forward, init_params, loss_and_grad

log = logging.getLogger(__name__)


class EmptyManifest(ValueError):
    pass


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-5
    lr_reduced: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    decoupled: bool = False


@dataclass
class AdamState:
    step: int = 0
    lr: float = 1e-5
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: ModelParams, cfg: AdamConfig) -> "AdamState":
        return cls(0, cfg.lr, {k: np.zeros_like(a) for k, a in params.arrays.items()},
                   {k: np.zeros_like(a) for k, a in params.arrays.items()})


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
              cfg: AdamConfig = AdamConfig()) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; weight decay is added to the gradient
    unless ``cfg.decoupled``, in which case it shrinks the weights directly."""
    if grads.keys() != params.arrays.keys():
        raise ShapeMismatch("gradient names do not match parameters")
    step = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** step
    bc2 = 1.0 - cfg.beta2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.arrays.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{k}: gradient {g.shape} vs parameter {p.shape}")
        if cfg.weight_decay and not cfg.decoupled:
            g = g + cfg.weight_decay * p
        m = cfg.beta1 * state.m.get(k, 0.0) + (1 - cfg.beta1) * g
        v = cfg.beta2 * state.v.get(k, 0.0) + (1 - cfg.beta2) * g * g
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if cfg.weight_decay and cfg.decoupled:
            update = update + state.lr * cfg.weight_decay * p
        new_p[k] = (p - update).astype(p.dtype, copy=False)
        new_m[k], new_v[k] = m, v
    return ModelParams(params.spec, new_p), AdamState(step, state.lr, new_m, new_v)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    min_delta: float = 0.0


@dataclass
class HistoryRow:
    epoch: int
    split: str
    loss: float
    lr: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[HistoryRow]
    best_epoch: int
    steps: int

    def losses(self, split: str) -> list[float]:
        return [r.loss for r in self.history if r.split == split]

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "split", "loss", "lr"])
        for r in self.history:
            w.writerow([r.epoch, r.split, repr(float(r.loss)), repr(float(r.lr))])
        return buf.getvalue()


def dataset_loss(params: ModelParams, data: Batch, batch_size: int = 256) -> float:
    """Mean squared error of predicted vs target corrections over a whole set."""
    total, count = 0.0, 0
    for i in range(0, len(data), batch_size):
        pred = forward(params, data.flow[i:i + batch_size]).astype(np.float64)
        diff = pred - data.target[i:i + batch_size]
        total += float(np.sum(diff * diff))
        count += diff.size
    return total / count


def train(data: Batch, spec: NetSpec, adam: AdamConfig = AdamConfig(), cfg: TrainConfig = TrainConfig(),
          val: Batch | None = None, init: ModelParams | None = None, label: str = "train") -> TrainResult:
    """Fit corrections on ``data``; returns the params of the best validation epoch.

    Epoch 0 in the history is the loss before any update. Without ``val`` the
    schedule watches the training loss.
    """
    if data is None or len(data) == 0:
        raise EmptyManifest("no training samples")
    if data.flow is None:
        raise ValueError("training needs flow stacks")
    params = init.copy() if init is not None else init_params(spec, cfg.seed)
    if params.spec != spec:
        raise ShapeMismatch("initial params were built for a different NetSpec")
    state = AdamState.fresh(params, adam)
    rng = np.random.default_rng(cfg.seed)
    flow = data.flow.astype(spec.dtype, copy=False)
    target = data.target.reshape(len(data), -1)

    def evaluate(p):
        tr = dataset_loss(p, data)
        return tr, (dataset_loss(p, val) if val is not None and len(val) else tr)

    tr_loss, watch = evaluate(params)
    history = [HistoryRow(0, "train", tr_loss, state.lr)]
    if val is not None and len(val):
        history.append(HistoryRow(0, "val", watch, state.lr))
    best, best_params, best_epoch, stale, reduced, steps = watch, params, 0, 0, False, 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(data))
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            loss, grads = loss_and_grad(params, flow[idx], target[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            params, state = adam_step(params, grads, state, adam)
            steps += 1
        tr_loss, watch = evaluate(params)
        history.append(HistoryRow(epoch, "train", tr_loss, state.lr))
        if val is not None and len(val):
            history.append(HistoryRow(epoch, "val", watch, state.lr))
        log.debug("%s epoch %d train %.6g watch %.6g lr %g", label, epoch, tr_loss, watch, state.lr)
        if watch < best - cfg.min_delta:
            best, best_params, best_epoch, stale = watch, params, epoch, 0
            continue
        stale += 1
        if stale >= cfg.patience:
            if reduced:
                log.info("%s: stopping at epoch %d (best %d)", label, epoch, best_epoch)
                break
            reduced, stale = True, 0
            state.lr = adam.lr_reduced
            log.info("%s: lr -> %g at epoch %d", label, state.lr, epoch)
    return TrainResult(best_params, history, best_epoch, steps)
