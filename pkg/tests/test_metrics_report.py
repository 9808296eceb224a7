import csv
import json

import pytest

from hcfmtl.metrics import DeltaMError, Direction, TaskMetric, delta_m
from hcfmtl.reference import TABLES, recompute
from hcfmtl.report import MetricRow, RunResult, emit, final_metrics_from_rows, load_metrics
from hcfmtl.federation import run_experiment
from hcfmtl.verify import tiny_config
from oracles import delta_m_by_hand

H, L = Direction.HIGHER_BETTER, Direction.LOWER_BETTER

# benchmark rows (9 tasks each), lower-is-better flags per column
FLAGS_1 = [0, 0, 0, 1, 0, 0, 1, 1, 0]
LOCAL_1 = [51.69, 49.94, 80.91, 15.76, 71.95, 41.86, 0.6487, 20.59, 76.46]
OURS_1 = [57.55, 52.30, 80.71, 15.60, 72.08, 41.47, 0.6281, 20.53, 76.50]
FEDAVG_1 = [39.98, 37.33, 77.56, 18.27, 69.17, 38.94, 0.7858, 21.62, 75.77]
FLAGS_2 = [0, 1, 1, 0, 0, 0, 0, 1, 0]
LOCAL_2 = [33.59, 0.7129, 23.22, 75.02, 65.80, 55.01, 83.23, 14.21, 71.89]
OURS_2 = [34.95, 0.7018, 23.19, 75.03, 65.81, 55.01, 83.18, 14.08, 71.97]


def metrics(values, flags):
    return [TaskMetric(k, v, Direction(f)) for k, (v, f) in enumerate(zip(values, flags))]


@pytest.mark.parametrize(
    "fed,local,flags,reported",
    [(OURS_1, LOCAL_1, FLAGS_1, 2.18), (FEDAVG_1, LOCAL_1, FLAGS_1, -11.76), (OURS_2, LOCAL_2, FLAGS_2, 0.75)],
)
def test_benchmark_rows(fed, local, flags, reported):
    got = delta_m(metrics(fed, flags), metrics(local, flags))
    assert got == pytest.approx(reported, abs=0.01)
    assert got == pytest.approx(delta_m_by_hand(fed, local, flags), rel=1e-12)


def test_reference_tables_recompute():
    for table, spec in TABLES.items():
        for method in spec["methods"]:
            got, reported = recompute(table, method)
            assert abs(got - reported) <= 0.01, (table, method, got)


def test_identical_rows_give_zero():
    assert delta_m(metrics(LOCAL_1, FLAGS_1), metrics(LOCAL_1, FLAGS_1)) == 0.0


def test_sign_follows_direction():
    assert delta_m([TaskMetric("a", 0.9, L)], [TaskMetric("a", 1.0, L)]) == pytest.approx(10.0)
    assert delta_m([TaskMetric("a", 1.1, H)], [TaskMetric("a", 1.0, H)]) == pytest.approx(10.0)
    assert delta_m([TaskMetric("a", 1.1, L)], [TaskMetric("a", 1.0, L)]) == pytest.approx(-10.0)


def test_reorder_and_mapping_inputs():
    fed, loc = metrics(OURS_1, FLAGS_1), metrics(LOCAL_1, FLAGS_1)
    base = delta_m(fed, loc)
    assert delta_m(fed[::-1], loc) == base
    assert delta_m({m.task_id: m for m in fed}, loc) == base


def test_errors():
    a = [TaskMetric("a", 1.0, H)]
    with pytest.raises(DeltaMError):
        delta_m(a, [TaskMetric("b", 1.0, H)])
    with pytest.raises(DeltaMError):
        delta_m(a, [TaskMetric("a", 0.0, H)])
    with pytest.raises(DeltaMError):
        delta_m(a, [TaskMetric("a", 1.0, L)])
    with pytest.raises(DeltaMError):
        delta_m(a * 2, a * 2)
    with pytest.raises(DeltaMError):
        delta_m([], [])


def test_emit_empty_result_writes_headers(tmp_path):
    paths = emit(RunResult(config={}, rounds=0), tmp_path)
    assert paths["metrics"].read_text() == "round,client,task,metric,value,lower_is_better\n"
    assert paths["hyper"].read_text() == "round,client,task,layer,weight,value\n"
    assert json.loads(paths["summary"].read_text())["delta_m_percent"] is None


def test_emit_rows_and_reload(tmp_path):
    cfg = tiny_config(rounds=2)
    res = run_experiment(cfg)
    res.delta_m = 1.234
    paths = emit(res, tmp_path)
    # 4 client-task pairs per round
    assert len(res.metric_rows) == 2 * 4
    with paths["metrics"].open() as fh:
        assert len(list(csv.reader(fh))) == 1 + 8
    assert load_metrics(tmp_path) == res.metric_rows
    assert final_metrics_from_rows(load_metrics(tmp_path)) == res.final_metrics()
    summary = json.loads(paths["summary"].read_text())
    assert summary["delta_m_display"] == "+1.23"
    assert set(summary["final_metrics"]) == {"a/seg", "b/normals", "c/seg", "c/depth"}
    # one alpha per client plus one beta per (client, task, decoder layer) per round
    assert len(res.hyper_rows) == 2 * (3 + 4 * 4)


def test_emit_is_byte_stable(tmp_path):
    res = run_experiment(tiny_config(rounds=1))
    emit(res, tmp_path / "a")
    emit(res, tmp_path / "b")
    for name in ("metrics.csv", "hyper_weights.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_final_metrics_uses_last_round():
    rows = [MetricRow(1, "a", "t", "rmse", 2.0, L), MetricRow(3, "a", "t", "rmse", 1.0, L)]
    assert final_metrics_from_rows(rows)["a/t"].value == 1.0
