"""Synthetic heterogeneous multi-task scenarios.

Generative model, per scenario seed:

* ``G`` (latent_dim x input_dim) is one latent map shared by every task and domain.
* Domain ``d`` draws features ``x = mu_d + A_d @ z`` with ``z ~ N(0, I)``.  Domains are
  ranked by sorted id; domain of rank ``k`` has ``mu_d = k * domain_shift`` on the
  first half of the coordinates and zero elsewhere.
* Task ``t`` reads the latent features ``u = tanh(G x + b_t)`` through a task vector
  ``v_t``: regression targets are ``v_t . u + noise``, classification labels are
  ``1[v_t . u + noise > 0]``. Regression targets are scaled to roughly unit
  variance, calibrated on standard-normal inputs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from pydantic import Field, field_validator, model_validator

from hcfmtl.base import StrictModel
from hcfmtl.models import Batch, TaskKind
from hcfmtl.seeding import stream

# samples used to calibrate regression target scale
_CALIBRATION_SAMPLES = 4096


class ClientSpec(StrictModel):
    id: str
    tasks: tuple[str, ...]
    domain: str = "A"
    n_train: int = Field(64, ge=1)
    n_test: int = Field(400, ge=1)
    local_epochs: int | None = Field(None, ge=1)

    @field_validator("tasks")
    @classmethod
    def _nonempty(cls, v):
        if len(v) == 0:
            raise ValueError("every client needs at least one task")
        if len(set(v)) != len(v):
            raise ValueError("duplicate task ids on one client")
        return v


def default_task_kinds() -> dict[str, TaskKind]:
    return {
        "seg": TaskKind.CLASSIFICATION,
        "parts": TaskKind.CLASSIFICATION,
        "sal": TaskKind.CLASSIFICATION,
        "normals": TaskKind.REGRESSION,
        "edge": TaskKind.CLASSIFICATION,
        "depth": TaskKind.REGRESSION,
    }


def default_clients() -> tuple[ClientSpec, ...]:
    """Five single-task clients on domain A and one four-task client on domain B."""
    single = [
        ClientSpec(id=f"st_{t}", tasks=(t,), domain="A")
        for t in ("seg", "parts", "sal", "normals", "edge")
    ]
    multi = ClientSpec(id="mt", tasks=("seg", "depth", "normals", "edge"), domain="B")
    return (*single, multi)


class ScenarioConfig(StrictModel):
    clients: tuple[ClientSpec, ...] = Field(default_factory=default_clients)
    task_kinds: dict[str, TaskKind] = Field(default_factory=default_task_kinds)
    input_dim: int = Field(16, ge=1)
    latent_dim: int = Field(8, ge=1)
    domain_shift: float = Field(1.0, ge=0.0)
    noise_std: float = Field(0.1, ge=0.0)
    seed: int | None = None

    @model_validator(mode="after")
    def _check(self):
        if not self.clients:
            raise ValueError("scenario needs at least one client")
        ids = [c.id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ValueError("client ids must be unique")
        for c in self.clients:
            for t in c.tasks:
                if t not in self.task_kinds:
                    raise ValueError(f"client {c.id!r} uses task {t!r} missing from task_kinds")
        if len(self.clients) >= 2:
            used = {t for c in self.clients for t in c.tasks}
            if len({self.task_kinds[t] for t in used}) < 2:
                raise ValueError("a federation of >= 2 clients needs at least 2 distinct task kinds")
        return self

    @property
    def domains(self) -> list[str]:
        return sorted({c.domain for c in self.clients})


@dataclass
class Domain:
    domain_id: str
    mean: np.ndarray
    mixing: np.ndarray


@dataclass
class ClientDataset:
    client_id: str
    tasks: dict[str, TaskKind]
    domain: Domain
    train_x: np.ndarray
    train_y: dict[str, np.ndarray]
    test_x: np.ndarray
    test_y: dict[str, np.ndarray]

    @property
    def n_train(self) -> int:
        return self.train_x.shape[0]

    def train_batch(self, idx: np.ndarray | None = None) -> Batch:
        if idx is None:
            return Batch(self.train_x, dict(self.train_y))
        return Batch(self.train_x[idx], {t: y[idx] for t, y in self.train_y.items()})


@dataclass
class _TaskMap:
    kind: TaskKind
    offset: np.ndarray
    weights: np.ndarray
    scale: float


def _make_domain(cfg: ScenarioConfig, seed: int, domain_id: str, rank: int) -> Domain:
    rng = stream(seed, "domain", domain_id)
    d = cfg.input_dim
    mean = np.zeros(d)
    mean[: math.ceil(d / 2)] = rank * cfg.domain_shift
    mixing = np.eye(d) + (0.3 / math.sqrt(d)) * rng.standard_normal((d, d))
    return Domain(domain_id, mean, mixing)


def _make_task_map(cfg: ScenarioConfig, seed: int, task_id: str, latent: np.ndarray) -> _TaskMap:
    rng = stream(seed, "task", task_id)
    kind = cfg.task_kinds[task_id]
    offset = 0.5 * rng.standard_normal(cfg.latent_dim)
    weights = rng.standard_normal(cfg.latent_dim) / math.sqrt(cfg.latent_dim)
    scale = 1.0
    if kind is TaskKind.REGRESSION:
        x = stream(seed, "calibration").standard_normal((_CALIBRATION_SAMPLES, cfg.input_dim))
        raw = np.tanh(x @ latent.T + offset) @ weights
        scale = float(np.std(raw)) or 1.0
    return _TaskMap(kind, offset, weights, scale)


def _labels(tmap: _TaskMap, latent: np.ndarray, x: np.ndarray, noise: np.ndarray) -> np.ndarray:
    raw = np.tanh(x @ latent.T + tmap.offset) @ tmap.weights / tmap.scale
    if tmap.kind is TaskKind.REGRESSION:
        return raw + noise
    return (raw + noise > 0).astype(np.float64)


def scenario_seed(cfg: ScenarioConfig, fallback: int = 0) -> int:
    return fallback if cfg.seed is None else cfg.seed


def make_scenario(cfg: ScenarioConfig, seed: int | None = None) -> list[ClientDataset]:
    """Generate one dataset per client. ``seed`` is used only when ``cfg.seed`` is None."""
    seed = scenario_seed(cfg, 0 if seed is None else seed)
    latent = stream(seed, "latent_map").standard_normal((cfg.latent_dim, cfg.input_dim))
    latent /= math.sqrt(cfg.input_dim)
    domains = {dom: _make_domain(cfg, seed, dom, rank) for rank, dom in enumerate(cfg.domains)}
    used_tasks = sorted({t for c in cfg.clients for t in c.tasks})
    task_maps = {t: _make_task_map(cfg, seed, t, latent) for t in used_tasks}

    out = []
    for c in cfg.clients:
        dom = domains[c.domain]
        rng = stream(seed, "client_data", c.id)
        splits = {}
        for split, n in (("train", c.n_train), ("test", c.n_test)):
            z = rng.standard_normal((n, cfg.input_dim))
            x = dom.mean + z @ dom.mixing.T
            ys = {}
            for t in c.tasks:
                noise = cfg.noise_std * rng.standard_normal(n)
                ys[t] = _labels(task_maps[t], latent, x, noise)
            splits[split] = (x, ys)
        out.append(
            ClientDataset(
                client_id=c.id,
                tasks={t: cfg.task_kinds[t] for t in c.tasks},
                domain=dom,
                train_x=splits["train"][0],
                train_y=splits["train"][1],
                test_x=splits["test"][0],
                test_y=splits["test"][1],
            )
        )
    return out


def sample_batches(dataset: ClientDataset, batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
    """One epoch of mini-batches: a fresh permutation, split into consecutive chunks.

    Every training index appears exactly once per epoch; the final batch may be short.
    """
    n = dataset.n_train
    if n == 0:
        raise ValueError(f"client {dataset.client_id!r} has no training data")
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must be in [1, {n}], got {batch_size}")
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield dataset.train_batch(perm[start : start + batch_size])


def dump_dataset(dataset: ClientDataset, path: str | Path) -> Path:
    """Write a client's train and test rows as CSV (split, x0.., y_<task>..)."""
    path = Path(path)
    tasks = list(dataset.tasks)
    d = dataset.train_x.shape[1]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", *[f"x{k}" for k in range(d)], *[f"y_{t}" for t in tasks]])
        for split, x, ys in (
            ("train", dataset.train_x, dataset.train_y),
            ("test", dataset.test_x, dataset.test_y),
        ):
            for n in range(x.shape[0]):
                w.writerow([split, *map(repr, x[n].tolist()), *(repr(float(ys[t][n])) for t in tasks)])
    return path
