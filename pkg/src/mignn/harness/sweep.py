"""Grid sweeps over the regularization weight or the number of inner steps."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from ..encoders import EncoderSpec
from ..errors import ConfigError
from ..meta import HyperParams
from .baselines import BaselineOptions, RunResult, Splits, run_seeds
from .metrics import Metrics

SWEEP_PARAMS = {"lambda": "lam", "inner_steps": "inner_steps"}


@dataclass
class SweepRow:
    value: float
    metrics: Metrics
    results: list[RunResult] = field(default_factory=list, repr=False)

    @property
    def film_norm(self) -> float:
        return self.metrics.extra.get("film_norm", float("nan"))


def sweep(param: str, values, splits: Splits, spec: EncoderSpec, hp: HyperParams, seeds,
          method: str = "mignn", options: BaselineOptions | None = None, workers: int = 1) -> list[SweepRow]:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {', '.join(SWEEP_PARAMS)}, got {param!r}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    rows = []
    for v in values:
        v = int(v) if param == "inner_steps" else float(v)
        run_hp = hp.replace(**{SWEEP_PARAMS[param]: v})
        metrics, results = run_seeds(method, splits, spec, run_hp, seeds, options, workers)
        rows.append(SweepRow(v, metrics, results))
    return rows


def sweep_csv(param: str, rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([param, "accuracy", "accuracy_hw", "micro_f1", "micro_f1_hw", "film_norm"])
    for r in rows:
        m = r.metrics
        w.writerow([repr(r.value), repr(m.accuracy), repr(m.accuracy_hw), repr(m.micro_f1), repr(m.micro_f1_hw),
                    repr(r.film_norm)])
    return buf.getvalue()
