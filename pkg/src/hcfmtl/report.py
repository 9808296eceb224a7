"""Run results and their on-disk form (CSV tables plus a JSON summary)."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from hcfmtl.metrics import Direction, TaskMetric

METRICS_FILE = "metrics.csv"
HYPER_FILE = "hyper_weights.csv"
SUMMARY_FILE = "summary.json"

METRIC_HEADER = ("round", "client", "task", "metric", "value", "lower_is_better")
HYPER_HEADER = ("round", "client", "task", "layer", "weight", "value")


@dataclass(frozen=True)
class MetricRow:
    round: int
    client: str
    task: str
    metric: str
    value: float
    direction: Direction


@dataclass(frozen=True)
class HyperRow:
    round: int
    client: str
    task: str  # empty for encoder weights
    layer: str  # empty for encoder weights
    weight: str  # "alpha" or "beta"
    value: float


@dataclass
class RunResult:
    config: dict[str, Any]
    rounds: int
    metric_rows: list[MetricRow] = field(default_factory=list)
    hyper_rows: list[HyperRow] = field(default_factory=list)
    manifest: dict[str, Any] = field(default_factory=dict)
    wall_time: float = 0.0
    delta_m: float | None = None

    def final_metrics(self) -> dict[str, TaskMetric]:
        """Metrics of the last evaluated round keyed ``"<client>/<task>"``."""
        if not self.metric_rows:
            return {}
        last = max(r.round for r in self.metric_rows)
        return {
            f"{r.client}/{r.task}": TaskMetric(f"{r.client}/{r.task}", r.value, r.direction, r.metric)
            for r in self.metric_rows
            if r.round == last
        }

    def metrics_at(self, round_: int) -> dict[str, TaskMetric]:
        return {
            f"{r.client}/{r.task}": TaskMetric(f"{r.client}/{r.task}", r.value, r.direction, r.metric)
            for r in self.metric_rows
            if r.round == round_
        }


def _fmt(x: float) -> str:
    return repr(float(x))


def emit(result: RunResult, out_dir: str | Path) -> dict[str, Path]:
    """Write metrics.csv, hyper_weights.csv and summary.json into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "metrics": out / METRICS_FILE,
            "hyper": out / HYPER_FILE,
            "summary": out / SUMMARY_FILE,
        }
        with paths["metrics"].open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_HEADER)
            for r in result.metric_rows:
                w.writerow([r.round, r.client, r.task, r.metric, _fmt(r.value), int(r.direction)])
        with paths["hyper"].open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HYPER_HEADER)
            for r in result.hyper_rows:
                w.writerow([r.round, r.client, r.task, r.layer, r.weight, _fmt(r.value)])
        summary = {
            "rounds": result.rounds,
            "delta_m_percent": None if result.delta_m is None else result.delta_m,
            "delta_m_display": None if result.delta_m is None else f"{result.delta_m:+.2f}",
            "final_metrics": {
                k: {"value": m.value, "metric": m.name, "lower_is_better": int(m.direction)}
                for k, m in sorted(result.final_metrics().items())
            },
            "wall_time_seconds": result.wall_time,
            "config": result.config,
            "manifest": result.manifest,
        }
        paths["summary"].write_text(
            json.dumps(summary, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise OSError(f"failed writing results to {out}: {exc}") from exc
    return paths


def load_metrics(path: str | Path) -> list[MetricRow]:
    """Read back a metrics.csv (a file or the run directory containing it)."""
    path = Path(path)
    if path.is_dir():
        path = path / METRICS_FILE
    with path.open(newline="", encoding="utf-8") as fh:
        return [
            MetricRow(
                int(row["round"]),
                row["client"],
                row["task"],
                row["metric"],
                float(row["value"]),
                Direction(int(row["lower_is_better"])),
            )
            for row in csv.DictReader(fh)
        ]


def final_metrics_from_rows(rows: list[MetricRow]) -> dict[str, TaskMetric]:
    return RunResult(config={}, rounds=0, metric_rows=rows).final_metrics()
