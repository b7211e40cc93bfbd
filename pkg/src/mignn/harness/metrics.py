"""Pooled accuracy / micro-F1 and Student-t confidence intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from ..errors import ContractError


@dataclass
class Counts:
    correct: int = 0
    decisions: int = 0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, pred: np.ndarray, truth: np.ndarray, multi_label: bool, num_categories: int) -> None:
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise ContractError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
        if multi_label:
            p, t = pred.astype(bool), truth.astype(bool)
        else:
            # one (node, class) decision per node: predicted class vs true class
            p = np.zeros((len(pred), num_categories), dtype=bool)
            t = np.zeros_like(p)
            p[np.arange(len(pred)), pred.astype(np.int64)] = True
            t[np.arange(len(truth)), truth.astype(np.int64)] = True
        self.correct += int((pred == truth).sum())
        self.decisions += int(truth.size)
        self.tp += int((p & t).sum())
        self.fp += int((p & ~t).sum())
        self.fn += int((~p & t).sum())

    @property
    def accuracy(self) -> float:
        return self.correct / self.decisions if self.decisions else float("nan")

    @property
    def micro_f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else float("nan")


def micro_f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else float("nan")


def confidence_interval(values: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    """Mean and two-sided Student-t half-width."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ContractError("a confidence interval needs at least two values")
    mean = float(v.mean())
    sd = float(v.std(ddof=1))
    if sd == 0.0:
        return mean, 0.0
    t = float(stats.t.ppf(0.5 + level / 2, v.size - 1))
    return mean, t * sd / math.sqrt(v.size)


@dataclass
class Metrics:
    accuracy: float
    accuracy_hw: float
    micro_f1: float
    micro_f1_hw: float
    per_seed_accuracy: list = field(default_factory=list)
    per_seed_micro_f1: list = field(default_factory=list)
    runtime: float = 0.0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_runs(cls, accs: Sequence[float], f1s: Sequence[float], runtime: float = 0.0,
                  extra: dict | None = None) -> "Metrics":
        if len(accs) >= 2:
            a, ahw = confidence_interval(accs)
            f, fhw = confidence_interval(f1s)
        else:
            a, ahw = float(np.mean(accs)), 0.0
            f, fhw = float(np.mean(f1s)), 0.0
        return cls(a, ahw, f, fhw, [float(x) for x in accs], [float(x) for x in f1s], runtime, extra or {})

    def row(self) -> str:
        return (f"acc {100 * self.accuracy:6.2f} +- {100 * self.accuracy_hw:5.2f}   "
                f"micro-F1 {100 * self.micro_f1:6.2f} +- {100 * self.micro_f1_hw:5.2f}")
