"""Round loop: local client training followed by server-side aggregation.

Modes:

``local``
    no aggregation; each client keeps ``theta_prev + delta``.
``fedavg``
    parameter averaging of encoders over all clients and of decoders over all
    decoders in the federation (heads stay local).
``hca2``
    conflict-averse encoder update plus layer-wise cross-attention decoder update,
    each blended in through learned hyper weights.
``enc_only`` / ``dec_only``
    the ``hca2`` rule on one part only; the other part stays local.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Mapping

import numpy as np
from pydantic import Field, model_validator

from hcfmtl.aggregation import (
    ConflictAverseConfig,
    HyperConfig,
    HyperWeights,
    aggregate_decoders,
    apply_personalized_update,
    solve_conflict_averse,
)
from hcfmtl.base import StrictModel
from hcfmtl.data import ClientDataset, ScenarioConfig, make_scenario, sample_batches
from hcfmtl.metrics import Direction, delta_m
from hcfmtl.models import (
    ArchSpec,
    ClientModel,
    Batch,
    DivergenceError,
    TaskKind,
    evaluate,
    init_model,
    loss_and_grad,
    sgd_step,
    task_encoder_grads,
)
from hcfmtl.params import ParamTree, flatten, tree_mean, unflatten
from hcfmtl.report import HyperRow, MetricRow, RunResult
from hcfmtl.seeding import derive_seed, stream

log = logging.getLogger(__name__)

Mode = Literal["local", "fedavg", "hca2", "enc_only", "dec_only"]
MODES: tuple[str, ...] = ("local", "fedavg", "hca2", "enc_only", "dec_only")
CHECKPOINT_VERSION = 1


class ExperimentConfig(StrictModel):
    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    arch: ArchSpec = Field(default_factory=ArchSpec)
    rounds: int = Field(50, ge=1)
    local_epochs: int = Field(1, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(0.05, gt=0.0)
    mode: Mode = "hca2"
    conflict_averse: ConflictAverseConfig = Field(default_factory=ConflictAverseConfig)
    hyper_weights: HyperConfig = Field(default_factory=HyperConfig)
    seed: int = 0
    eval_every: int = Field(1, ge=1)
    workers: int = Field(1, ge=1)
    shared_init: bool = True

    @model_validator(mode="before")
    @classmethod
    def _arch_input_dim(cls, data):
        # the architecture's input width follows the scenario unless stated
        if isinstance(data, dict):
            scenario = data.get("scenario")
            arch = data.get("arch")
            if isinstance(scenario, ScenarioConfig):
                in_dim = scenario.input_dim
            elif isinstance(scenario, dict):
                in_dim = scenario.get("input_dim", ScenarioConfig.model_fields["input_dim"].default)
            else:
                in_dim = None
            if in_dim is not None and (arch is None or isinstance(arch, dict)):
                arch = dict(arch or {})
                arch.setdefault("input_dim", in_dim)
                data = {**data, "arch": arch}
        return data

    @model_validator(mode="after")
    def _check(self):
        if self.arch.input_dim != self.scenario.input_dim:
            raise ValueError(
                f"arch.input_dim={self.arch.input_dim} must equal scenario.input_dim={self.scenario.input_dim}"
            )
        for c in self.scenario.clients:
            if self.batch_size > c.n_train:
                raise ValueError(f"batch_size={self.batch_size} exceeds n_train={c.n_train} of client {c.id!r}")
        return self

    def epochs_for(self, client_id: str) -> int:
        for c in self.scenario.clients:
            if c.id == client_id and c.local_epochs is not None:
                return c.local_epochs
        return self.local_epochs


@dataclass
class RoundState:
    """Server view at the start of aggregation for round ``round``."""

    round: int
    models: dict[str, ClientModel]
    hyper: HyperWeights
    deltas: dict[str, ClientModel] = field(default_factory=dict)
    info: dict = field(default_factory=dict)


class RoundError(RuntimeError):
    def __init__(self, round_: int, message: str):
        super().__init__(f"round {round_}: {message}")
        self.round = round_


# ---------------------------------------------------------------- client side

def client_update(
    model: ClientModel,
    dataset: ClientDataset,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[ClientModel, ClientModel]:
    """Run ``epochs`` of mini-batch SGD on the summed task losses.

    Returns ``(delta, trained)`` where ``delta = trained - model`` part by part.
    """
    missing = set(model.task_ids) - set(dataset.tasks)
    if missing:
        raise ValueError(f"dataset of {dataset.client_id!r} lacks tasks {sorted(missing)}")
    trained = model.copy()
    for epoch in range(epochs):
        for batch in sample_batches(dataset, batch_size, rng):
            try:
                _, grad = loss_and_grad(trained, batch)
            except DivergenceError as exc:
                raise DivergenceError(f"client {dataset.client_id!r}, epoch {epoch}: {exc}") from exc
            trained = sgd_step(trained, grad, lr)
    delta = trained.map2(model, lambda a, b: a - b)
    return delta, trained


def mtl_reference_step(model: ClientModel, batch: Batch, lr: float) -> ParamTree:
    """Shared-encoder update of one plain SGD step on the summed task losses: ``-lr * sum_i g_i``."""
    grads = task_encoder_grads(model, batch)
    total = {k: np.zeros_like(v) for k, v in model.encoder.items()}
    for g in grads.values():
        for k in total:
            total[k] = total[k] + g[k]
    return {k: -lr * v for k, v in total.items()}


# ---------------------------------------------------------------- server side

def _uses_encoder_agg(mode: str) -> bool:
    return mode in ("hca2", "enc_only")


def _uses_decoder_agg(mode: str) -> bool:
    return mode in ("hca2", "dec_only")


def server_round(state: RoundState, cfg: ExperimentConfig, mode: str | None = None) -> RoundState:
    """Aggregate the gathered deltas and produce every client's next parameters."""
    mode = mode or cfg.mode
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    missing = set(state.models) - set(state.deltas)
    if missing:
        raise RoundError(state.round, f"missing client reports: {sorted(missing)}")
    prev, deltas = state.models, state.deltas
    cids = list(prev)
    local = {c: prev[c].map2(deltas[c], lambda p, d: p + d) for c in cids}
    hyper = state.hyper.copy()
    info: dict = {}

    if mode == "local":
        return RoundState(state.round + 1, local, hyper, {}, info)

    if mode == "fedavg":
        enc = tree_mean([local[c].encoder for c in cids])
        dec_keys = [(c, t) for c in cids for t in local[c].decoders]
        dec = tree_mean([local[c].decoders[t] for c, t in dec_keys])
        new = {}
        for c in cids:
            m = local[c].copy()
            m.encoder = {k: v.copy() for k, v in enc.items()}
            m.decoders = {t: {k: v.copy() for k, v in dec.items()} for t in m.decoders}
            new[c] = m
        return RoundState(state.round + 1, new, hyper, {}, info)

    enc_agg, dec_agg = _uses_encoder_agg(mode), _uses_decoder_agg(mode)
    if enc_agg:
        enc_updates = [flatten(deltas[c].encoder) for c in cids]
        ca = solve_conflict_averse(enc_updates, cfg.conflict_averse)
        u_tilde = unflatten(ca.update)
        info["conflict_weights"] = dict(zip(cids, ca.weights.tolist()))
    if dec_agg:
        dec_updates = {(c, t): deltas[c].decoders[t] for c in cids for t in deltas[c].decoders}
        a_tilde = aggregate_decoders(dec_updates)

    def update_hyper():
        if enc_agg:
            for c, upd in zip(cids, enc_updates):
                hyper.update_alpha(c, ca.update.data, upd.data)
        if dec_agg:
            for (c, t), tree in dec_updates.items():
                for layer, d in tree.items():
                    hyper.update_beta(c, t, layer, a_tilde[(c, t)][layer].reshape(-1), d.reshape(-1))

    if cfg.hyper_weights.update_order == "before":
        update_hyper()

    new = {}
    for c in cids:
        m = local[c].copy()
        if enc_agg:
            m.encoder = apply_personalized_update(prev[c].encoder, deltas[c].encoder, hyper.alpha[c], u_tilde)
        if dec_agg:
            m.decoders = {
                t: apply_personalized_update(
                    prev[c].decoders[t], deltas[c].decoders[t], hyper.beta_for(c, t), a_tilde[(c, t)]
                )
                for t in m.decoders
            }
        new[c] = m

    if cfg.hyper_weights.update_order == "after":
        update_hyper()
    return RoundState(state.round + 1, new, hyper, {}, info)


# ---------------------------------------------------------------- experiment

def design_manifest(cfg: ExperimentConfig) -> dict:
    """Defaults and modelling choices in effect for a run."""
    return {
        "model": "tanh MLP encoder, tanh MLP decoders sharing one template, linear heads",
        "losses": {"regression": "0.5 * mean squared error", "classification": "mean logistic loss"},
        "task_loss_weighting": "unweighted sum over a client's tasks",
        "optimizer": "plain SGD",
        "init": "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases",
        "shared_init": cfg.shared_init,
        "participation": "all clients every round",
        "conflict_averse": {
            "c": cfg.conflict_averse.c,
            "solver": "projected gradient descent on the simplex (sort-based projection)",
            "solver_step": cfg.conflict_averse.solver_step,
            "solver_max_iters": cfg.conflict_averse.solver_max_iters,
            "solver_tol": cfg.conflict_averse.solver_tol,
            "zero_norm_guard": 1e-12,
        },
        "cross_attention": {
            "layer_unit": "each weight matrix and bias vector",
            "temperature": "sqrt(number of elements in the layer)",
            "zero_update_fallback": "uniform attention",
        },
        "hyper_weights": {
            "init_alpha": cfg.hyper_weights.init_alpha,
            "init_beta": cfg.hyper_weights.init_beta,
            "lr": cfg.hyper_weights.lr,
            "rule": "psi <- clamp(psi + lr * <agg, delta> / (|agg| |delta| + 1e-12))",
            "clamp": list(cfg.hyper_weights.clamp),
            "update_order": cfg.hyper_weights.update_order,
        },
        "fedavg": "parameter averaging of encoders across clients and decoders across all decoders",
        "metrics": {"regression": "rmse (lower better)", "classification": "accuracy (higher better)"},
    }


def _client_seed(cfg: ExperimentConfig, client_id: str) -> int:
    if cfg.shared_init:
        return derive_seed(cfg.seed, "model_init")
    return derive_seed(cfg.seed, "model_init", client_id)


def init_state(cfg: ExperimentConfig) -> RoundState:
    models = {}
    for c in cfg.scenario.clients:
        tasks = {t: cfg.scenario.task_kinds[t] for t in c.tasks}
        models[c.id] = init_model(cfg.arch, tasks, _client_seed(cfg, c.id))
    first = next(iter(models.values()))
    dec_layers = list(next(iter(first.decoders.values())))
    hyper = HyperWeights.init({cid: m.task_ids for cid, m in models.items()}, dec_layers, cfg.hyper_weights)
    return RoundState(1, models, hyper)


def client_rngs(cfg: ExperimentConfig) -> dict[str, np.random.Generator]:
    return {c.id: stream(cfg.seed, "client", c.id, "batches") for c in cfg.scenario.clients}


def _evaluate_all(models: Mapping[str, ClientModel], datasets: Mapping[str, ClientDataset], round_: int) -> list[MetricRow]:
    rows = []
    for cid, model in models.items():
        ds = datasets[cid]
        for t, m in evaluate(model, ds.test_x, ds.test_y).items():
            rows.append(MetricRow(round_, cid, t, m.name, m.value, m.direction))
    return rows


def _hyper_rows(hyper: HyperWeights, round_: int) -> list[HyperRow]:
    rows = [HyperRow(round_, c, "", "", "alpha", v) for c, v in hyper.alpha.items()]
    rows += [HyperRow(round_, c, t, layer, "beta", v) for (c, t, layer), v in hyper.beta.items()]
    return rows


def run_experiment(
    cfg: ExperimentConfig,
    datasets: list[ClientDataset] | None = None,
    checkpoint: str | Path | None = None,
    resume: bool = False,
) -> RunResult:
    """Run ``cfg.rounds`` communication rounds and collect metrics and hyper-weight trajectories.

    With ``checkpoint`` set, the full round state is written after every round; with
    ``resume`` as well, a run continues from that file and produces the same result as
    an uninterrupted one.
    """
    t0 = time.perf_counter()
    if datasets is None:
        datasets = make_scenario(cfg.scenario, derive_seed(cfg.seed, "scenario"))
    by_id = {d.client_id: d for d in datasets}
    state = init_state(cfg)
    rngs = client_rngs(cfg)
    metric_rows: list[MetricRow] = []
    hyper_rows: list[HyperRow] = []
    if resume and checkpoint is not None and Path(checkpoint).exists():
        state, rngs, metric_rows, hyper_rows = load_checkpoint(checkpoint)
    track_hyper = cfg.mode not in ("local", "fedavg")
    workers = min(cfg.workers, len(state.models))

    def train(cid: str):
        return client_update(
            state.models[cid], by_id[cid], cfg.epochs_for(cid), cfg.lr, cfg.batch_size, rngs[cid]
        )

    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        while state.round <= cfg.rounds:
            r = state.round
            cids = list(state.models)
            try:
                outs = list(pool.map(train, cids)) if pool else [train(c) for c in cids]
            except DivergenceError as exc:
                raise RoundError(r, str(exc)) from exc
            state.deltas = {c: out[0] for c, out in zip(cids, outs)}
            state = server_round(state, cfg)
            if r % cfg.eval_every == 0 or r == cfg.rounds:
                metric_rows += _evaluate_all(state.models, by_id, r)
            if track_hyper:
                hyper_rows += _hyper_rows(state.hyper, r)
            log.debug("round %d done", r)
            if checkpoint is not None:
                save_checkpoint(checkpoint, state, rngs, metric_rows, hyper_rows)
    finally:
        if pool:
            pool.shutdown()

    return RunResult(
        config=cfg.model_dump(mode="json"),
        rounds=cfg.rounds,
        metric_rows=metric_rows,
        hyper_rows=hyper_rows,
        manifest=design_manifest(cfg),
        wall_time=time.perf_counter() - t0,
    )


def run_with_baseline(cfg: ExperimentConfig) -> tuple[RunResult, RunResult]:
    """Run ``cfg`` and the local-only baseline on the same data; fills ``delta_m``."""
    datasets = make_scenario(cfg.scenario, derive_seed(cfg.seed, "scenario"))
    base_cfg = cfg.model_copy(update={"mode": "local"})
    baseline = run_experiment(base_cfg, datasets)
    baseline.delta_m = 0.0
    if cfg.mode == "local":
        return baseline, baseline
    result = run_experiment(cfg, datasets)
    result.delta_m = delta_m(result.final_metrics(), baseline.final_metrics())
    return result, baseline


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(
    path: str | Path,
    state: RoundState,
    rngs: Mapping[str, np.random.Generator],
    metric_rows: list[MetricRow],
    hyper_rows: list[HyperRow],
) -> None:
    """Versioned ``.npz``: parameter arrays plus a JSON ``meta`` entry."""
    arrays = {}
    layout = {}
    for cid, model in state.models.items():
        layout[cid] = {"tasks": {t: k.value for t, k in model.tasks.items()}}
        for part, tree in model.parts():
            for layer, arr in tree.items():
                arrays[f"{cid}|{part}|{layer}"] = arr
    meta = {
        "version": CHECKPOINT_VERSION,
        "round": state.round,
        "layout": layout,
        "keys": list(arrays),
        "alpha": state.hyper.alpha,
        "beta": [[c, t, layer, v] for (c, t, layer), v in state.hyper.beta.items()],
        "hyper_lr": state.hyper.lr,
        "clamp": list(state.hyper.clamp),
        "rng": {cid: g.bit_generator.state for cid, g in rngs.items()},
        "metric_rows": [[r.round, r.client, r.task, r.metric, r.value, int(r.direction)] for r in metric_rows],
        "hyper_rows": [[r.round, r.client, r.task, r.layer, r.weight, r.value] for r in hyper_rows],
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **{f"a{i}": arrays[k] for i, k in enumerate(arrays)})
    tmp.replace(path)


def load_checkpoint(path: str | Path):
    """Inverse of :func:`save_checkpoint`: ``(state, rngs, metric_rows, hyper_rows)``."""
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        arrays = {k: z[f"a{i}"].copy() for i, k in enumerate(meta["keys"])}
    models = {}
    for cid, info in meta["layout"].items():
        tasks = {t: TaskKind(k) for t, k in info["tasks"].items()}
        m = ClientModel({}, {t: {} for t in tasks}, {t: {} for t in tasks}, tasks)
        models[cid] = m
    for key, arr in arrays.items():
        cid, part, layer = key.split("|")
        m = models[cid]
        if part == "encoder":
            m.encoder[layer] = arr
        else:
            kind, t = part.split("/", 1)
            (m.decoders if kind == "decoder" else m.heads)[t][layer] = arr
    hyper = HyperWeights(
        {c: float(v) for c, v in meta["alpha"].items()},
        {(c, t, layer): float(v) for c, t, layer, v in meta["beta"]},
        float(meta["hyper_lr"]),
        tuple(meta["clamp"]),
    )
    rngs = {}
    for cid, st in meta["rng"].items():
        g = np.random.Generator(np.random.PCG64())
        g.bit_generator.state = st
        rngs[cid] = g
    metric_rows = [MetricRow(r, c, t, m, float(v), Direction(d)) for r, c, t, m, v, d in meta["metric_rows"]]
    hyper_rows = [HyperRow(r, c, t, layer, w, float(v)) for r, c, t, layer, w, v in meta["hyper_rows"]]
    return RoundState(meta["round"], models, hyper), rngs, metric_rows, hyper_rows
