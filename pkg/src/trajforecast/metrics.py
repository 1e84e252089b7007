"""Forecast metrics and cross-fold aggregation.

Predictions and truths are ``(N, n, 2)`` arrays of centroids in pixels.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats


class TooFewFolds(ValueError):
    pass


def _aligned(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} vs truth {truth.shape}")
    if pred.ndim == 2:
        pred, truth = pred[None], truth[None]
    if pred.ndim != 3 or pred.shape[2] != 2 or pred.size == 0:
        raise ValueError("expected non-empty (N, n, 2) arrays")
    return pred, truth


def mse_metric(pred, truth, per_coordinate: bool = False) -> float:
    """Mean squared centroid error over every (sample, step).

    By default each term is the squared Euclidean distance; ``per_coordinate``
    also averages over x and y, which halves the value.
    """
    pred, truth = _aligned(pred, truth)
    sq = ((pred - truth) ** 2).sum(axis=2)
    value = math.fsum(sq.ravel()) / sq.size
    return value / 2 if per_coordinate else value


def de_at(pred, truth, t: int) -> float:
    """Mean Euclidean distance at horizon step ``t`` (1-based)."""
    pred, truth = _aligned(pred, truth)
    if not 1 <= t <= pred.shape[1]:
        raise ValueError(f"step {t} outside 1..{pred.shape[1]}")
    d = np.sqrt(((pred[:, t - 1] - truth[:, t - 1]) ** 2).sum(axis=1))
    return math.fsum(d) / len(d)


def de_curve(pred, truth) -> list[float]:
    pred, truth = _aligned(pred, truth)
    return [de_at(pred, truth, t) for t in range(1, pred.shape[1] + 1)]


def aggregate_folds(values, confidence: float = 0.95) -> tuple[float, float]:
    """Mean and Student-t confidence half-width over fold values."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.size < 2:
        raise TooFewFolds("need at least two fold values")
    mean = math.fsum(vals) / vals.size
    sd = math.sqrt(math.fsum((vals - mean) ** 2) / (vals.size - 1))
    hw = stats.t.ppf(0.5 + confidence / 2, vals.size - 1) * sd / math.sqrt(vals.size)
    return mean, float(hw)


def format_ci(mean: float, half_width: float, digits: int = 1) -> str:
    return f"{mean:.{digits}f} ± {half_width:.{digits}f}"


@dataclass
class EvalReport:
    """Per-model, per-fold metric values; rows keyed ``(model, metric)``."""

    horizon: int
    values: dict[tuple[str, str], list[float]] = field(default_factory=dict)
    models: list[str] = field(default_factory=list)

    def add(self, model: str, pred, truth, per_coordinate: bool = False) -> None:
        if model not in self.models:
            self.models.append(model)
        metrics = {"MSE": mse_metric(pred, truth, per_coordinate)}
        for t, d in enumerate(de_curve(pred, truth), start=1):
            metrics[f"DE@{t}"] = d
        for name, v in metrics.items():
            self.values.setdefault((model, name), []).append(v)

    def metric_names(self) -> list[str]:
        return ["MSE"] + [f"DE@{t}" for t in range(1, self.horizon + 1)]

    def folds(self, model: str) -> int:
        return len(self.values.get((model, "MSE"), []))

    def summary(self, model: str, metric: str):
        vals = self.values[(model, metric)]
        if len(vals) < 2:
            return vals[0], None
        return aggregate_folds(vals)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "metric", "fold", "value"])
        for model in self.models:
            for metric in self.metric_names():
                vals = self.values[(model, metric)]
                for i, v in enumerate(vals):
                    w.writerow([model, metric, i, repr(v)])
                if len(vals) >= 2:
                    mean, hw = aggregate_folds(vals)
                    w.writerow([model, metric, "mean", repr(mean)])
                    w.writerow([model, metric, "ci95", repr(hw)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        out = {"horizon": self.horizon, "models": {}}
        for model in self.models:
            entry = {}
            for metric in self.metric_names():
                vals = self.values[(model, metric)]
                row = {"folds": vals}
                if len(vals) >= 2:
                    mean, hw = aggregate_folds(vals)
                    row.update(mean=mean, ci95=hw, text=format_ci(mean, hw))
                else:
                    row.update(mean=vals[0], ci95=None, text=f"{vals[0]:.1f}")
                entry[metric] = row
            out["models"][model] = entry
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
