"""Per-task metrics and the average relative performance change against a local baseline."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence


class Direction(enum.IntEnum):
    """Value is the sign exponent: (-1)**direction flips lower-is-better metrics."""

    HIGHER_BETTER = 0
    LOWER_BETTER = 1


@dataclass(frozen=True)
class TaskMetric:
    task_id: Hashable
    value: float
    direction: Direction
    name: str = ""


class DeltaMError(ValueError):
    pass


def delta_m(
    fed: Sequence[TaskMetric] | Mapping[Hashable, TaskMetric],
    local: Sequence[TaskMetric] | Mapping[Hashable, TaskMetric],
) -> float:
    """Mean signed relative change of ``fed`` over ``local``, in percent.

    Tasks are matched by ``task_id``, so input order does not matter.
    """
    fed_by_id = _index(fed)
    local_by_id = _index(local)
    if set(fed_by_id) != set(local_by_id):
        raise DeltaMError(
            f"mismatched task sets: {sorted(map(str, fed_by_id))} vs {sorted(map(str, local_by_id))}"
        )
    if not local_by_id:
        raise DeltaMError("no tasks to compare")
    total = 0.0
    for task_id in sorted(local_by_id, key=str):
        f, m = fed_by_id[task_id], local_by_id[task_id]
        if f.direction != m.direction:
            raise DeltaMError(f"direction flag differs for task {task_id!r}")
        if m.value == 0:
            raise DeltaMError(f"local metric for task {task_id!r} is zero")
        sign = -1.0 if m.direction == Direction.LOWER_BETTER else 1.0
        total += sign * (f.value - m.value) / m.value
    return 100.0 * total / len(local_by_id)


def _index(metrics) -> dict:
    if isinstance(metrics, Mapping):
        items = list(metrics.values())
    else:
        items = list(metrics)
    out = {}
    for m in items:
        if m.task_id in out:
            raise DeltaMError(f"duplicate task id {m.task_id!r}")
        out[m.task_id] = m
    return out
