"""Published per-task results for the two mixed single-/multi-task benchmarks.

Each table lists its tasks with a lower-is-better flag, the local baseline row, and
for each method the per-task values plus the reported average relative change (%).
"""

from __future__ import annotations

from hcfmtl.metrics import Direction, TaskMetric, delta_m

H, L = Direction.HIGHER_BETTER, Direction.LOWER_BETTER

TABLES = {
    "pascal_st5_nyud_mt4": {
        "tasks": [
            ("pascal/semseg", H), ("pascal/parts", H), ("pascal/sal", H), ("pascal/normals", L),
            ("pascal/edge", H), ("nyud/semseg", H), ("nyud/depth", L), ("nyud/normals", L), ("nyud/edge", H),
        ],
        "local": [51.69, 49.94, 80.91, 15.76, 71.95, 41.86, 0.6487, 20.59, 76.46],
        "methods": {
            "FedAvg": ([39.98, 37.33, 77.56, 18.27, 69.17, 38.94, 0.7858, 21.62, 75.77], -11.76),
            "FedProx": ([44.42, 38.10, 77.26, 18.03, 69.39, 39.19, 0.8068, 21.52, 76.03], -10.68),
            "FedPer": ([54.51, 46.56, 78.85, 16.95, 71.00, 44.02, 0.6467, 21.19, 76.61], -1.11),
            "Ditto": ([46.23, 39.69, 77.99, 17.52, 69.77, 41.49, 0.6508, 20.60, 76.45], -5.57),
            "FedAMP": ([55.98, 52.05, 80.79, 15.74, 72.02, 41.67, 0.6428, 20.54, 76.40], 1.47),
            "MaT-FL": ([57.45, 48.63, 79.26, 17.26, 71.23, 40.99, 0.6352, 20.65, 76.59], -0.46),
            "hca2": ([57.55, 52.30, 80.71, 15.60, 72.08, 41.47, 0.6281, 20.53, 76.50], 2.18),
            "hca2 encoder only": ([58.38, 51.64, 80.44, 15.65, 72.09, 41.21, 0.6377, 20.55, 76.50], 1.89),
            "hca2 decoder only": ([57.39, 51.65, 80.75, 15.69, 72.06, 41.48, 0.6344, 20.56, 76.41], 1.80),
        },
    },
    "nyud_st4_pascal_mt5": {
        "tasks": [
            ("nyud/semseg", H), ("nyud/depth", L), ("nyud/normals", L), ("nyud/edge", H),
            ("pascal/semseg", H), ("pascal/parts", H), ("pascal/sal", H), ("pascal/normals", L), ("pascal/edge", H),
        ],
        "local": [33.59, 0.7129, 23.22, 75.02, 65.80, 55.01, 83.23, 14.21, 71.89],
        "methods": {
            "FedAvg": ([25.80, 0.8295, 24.85, 75.31, 64.63, 52.88, 81.08, 15.56, 68.95], -7.56),
            "FedProx": ([25.96, 0.8316, 25.20, 75.34, 64.97, 50.78, 81.29, 15.83, 69.81], -8.12),
            "FedPer": ([35.93, 0.7460, 23.75, 75.53, 67.78, 54.75, 82.50, 14.75, 71.90], -0.16),
            "Ditto": ([28.15, 0.7482, 23.96, 75.42, 65.99, 51.45, 81.74, 15.29, 69.96], -4.67),
            "FedAMP": ([34.75, 0.7103, 23.31, 75.03, 66.08, 54.10, 83.35, 14.20, 71.88], 0.27),
            "MaT-FL": ([35.05, 0.7504, 23.39, 75.33, 67.90, 54.78, 82.84, 14.58, 71.94], -0.16),
            "hca2": ([34.95, 0.7018, 23.19, 75.03, 65.81, 55.01, 83.18, 14.08, 71.97], 0.75),
        },
    },
}


def row_metrics(table: str, values: list[float]) -> list[TaskMetric]:
    tasks = TABLES[table]["tasks"]
    return [TaskMetric(name, v, d) for (name, d), v in zip(tasks, values)]


def recompute(table: str, method: str) -> tuple[float, float]:
    """``(recomputed, reported)`` average relative change for one method row."""
    t = TABLES[table]
    values, reported = t["methods"][method]
    return delta_m(row_metrics(table, values), row_metrics(table, t["local"])), reported
