"""Small tanh MLP encoder/decoder multi-task networks with hand-written backprop.

Layout of a client model::

    x -> encoder (tanh MLP) -> h
    h -> decoder[t] (tanh MLP, one template shared by every task) -> z_t
    z_t -> head[t] (linear) -> prediction for task t

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch ``X`` of shape
``(n, fan_in)`` maps to ``X @ W + b``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from pydantic import Field, field_validator

from hcfmtl.base import StrictModel
from hcfmtl.metrics import Direction, TaskMetric
from hcfmtl.params import ParamTree, tree_allfinite, tree_copy, tree_zeros_like
from hcfmtl.seeding import stream


class TaskKind(str, enum.Enum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"

    @property
    def direction(self) -> Direction:
        if self is TaskKind.REGRESSION:
            return Direction.LOWER_BETTER
        return Direction.HIGHER_BETTER

    @property
    def metric_name(self) -> str:
        return "rmse" if self is TaskKind.REGRESSION else "accuracy"


class ArchSpec(StrictModel):
    input_dim: int = Field(16, ge=1)
    encoder_widths: tuple[int, ...] = (32, 32)
    decoder_widths: tuple[int, ...] = (16, 16)
    output_dim: int = Field(1, ge=1)
    activation: str = "tanh"

    @field_validator("encoder_widths", "decoder_widths")
    @classmethod
    def _positive_widths(cls, v):
        if len(v) == 0:
            raise ValueError("at least one layer is required")
        if any(w < 1 for w in v):
            raise ValueError("layer widths must be >= 1 (zero-width layer)")
        return v

    @field_validator("activation")
    @classmethod
    def _tanh_only(cls, v):
        if v != "tanh":
            raise ValueError("only the 'tanh' activation is supported")
        return v


class DivergenceError(FloatingPointError):
    """Non-finite values appeared during a forward or backward pass."""


@dataclass
class Batch:
    x: np.ndarray
    y: dict[str, np.ndarray]

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class ClientModel:
    """Parameters of one client; also reused as a container for gradients and deltas."""

    encoder: ParamTree
    decoders: dict[str, ParamTree]
    heads: dict[str, ParamTree]
    tasks: dict[str, TaskKind] = field(default_factory=dict)

    @property
    def task_ids(self) -> list[str]:
        return list(self.tasks)

    def copy(self) -> "ClientModel":
        return ClientModel(
            encoder=tree_copy(self.encoder),
            decoders={t: tree_copy(d) for t, d in self.decoders.items()},
            heads={t: tree_copy(h) for t, h in self.heads.items()},
            tasks=dict(self.tasks),
        )

    def parts(self) -> Iterable[tuple[str, ParamTree]]:
        yield "encoder", self.encoder
        for t, d in self.decoders.items():
            yield f"decoder/{t}", d
        for t, h in self.heads.items():
            yield f"head/{t}", h

    def map2(self, other: "ClientModel", fn) -> "ClientModel":
        return ClientModel(
            encoder={k: fn(v, other.encoder[k]) for k, v in self.encoder.items()},
            decoders={
                t: {k: fn(v, other.decoders[t][k]) for k, v in d.items()}
                for t, d in self.decoders.items()
            },
            heads={
                t: {k: fn(v, other.heads[t][k]) for k, v in h.items()}
                for t, h in self.heads.items()
            },
            tasks=dict(self.tasks),
        )

    def subset(self, task_ids: Sequence[str]) -> "ClientModel":
        """A copy restricted to ``task_ids`` (shares the same encoder values)."""
        return ClientModel(
            encoder=tree_copy(self.encoder),
            decoders={t: tree_copy(self.decoders[t]) for t in task_ids},
            heads={t: tree_copy(self.heads[t]) for t in task_ids},
            tasks={t: self.tasks[t] for t in task_ids},
        )


def _layer_names(k: int) -> tuple[str, str]:
    return f"l{k}.weight", f"l{k}.bias"


def _init_mlp(sizes: Sequence[int], rng: np.random.Generator) -> ParamTree:
    tree: ParamTree = {}
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if fan_in < 1 or fan_out < 1:
            raise ValueError(f"zero-width layer {k}: {fan_in} -> {fan_out}")
        s = 1.0 / math.sqrt(fan_in)
        w_name, b_name = _layer_names(k)
        tree[w_name] = rng.uniform(-s, s, size=(fan_in, fan_out))
        tree[b_name] = np.zeros(fan_out)
    return tree


def init_model(arch: ArchSpec, tasks: Mapping[str, TaskKind], seed: int) -> ClientModel:
    """Deterministic initialisation.

    Each part draws from its own named stream, so a decoder for task ``t`` gets the
    same initial values on every client that is initialised with the same seed.
    """
    if not tasks:
        raise ValueError("a client model needs at least one task")
    enc_sizes = [arch.input_dim, *arch.encoder_widths]
    dec_sizes = [arch.encoder_widths[-1], *arch.decoder_widths]
    head_sizes = [arch.decoder_widths[-1], arch.output_dim]
    encoder = _init_mlp(enc_sizes, stream(seed, "init", "encoder"))
    decoders = {t: _init_mlp(dec_sizes, stream(seed, "init", "decoder", t)) for t in tasks}
    heads = {t: _init_mlp(head_sizes, stream(seed, "init", "head", t)) for t in tasks}
    return ClientModel(encoder, decoders, heads, {t: TaskKind(k) for t, k in tasks.items()})


def _n_layers(tree: ParamTree) -> int:
    return len(tree) // 2


def _mlp_forward(tree: ParamTree, a: np.ndarray, activate: bool):
    acts = [a]
    for k in range(_n_layers(tree)):
        w_name, b_name = _layer_names(k)
        z = acts[-1] @ tree[w_name] + tree[b_name]
        acts.append(np.tanh(z) if activate else z)
    return acts


def _mlp_backward(tree: ParamTree, acts: list[np.ndarray], d_out: np.ndarray, activate: bool):
    """Gradients of a part given d(loss)/d(part output); returns (grads, d_input)."""
    grads: ParamTree = {}
    d = d_out
    for k in reversed(range(_n_layers(tree))):
        w_name, b_name = _layer_names(k)
        if activate:
            d = d * (1.0 - acts[k + 1] ** 2)
        grads[w_name] = acts[k].T @ d
        grads[b_name] = d.sum(axis=0)
        d = d @ tree[w_name].T
    ordered = {name: grads[name] for name in tree}
    return ordered, d


def _task_loss(kind: TaskKind, out: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its derivative w.r.t. the head output."""
    n = out.shape[0]
    pred = out[:, 0]
    if kind is TaskKind.REGRESSION:
        err = pred - y
        loss = 0.5 * float(np.mean(err**2))
        d = err / n
    else:
        # logistic loss on logits, labels in {0, 1}
        loss = float(np.mean(np.logaddexp(0.0, pred) - y * pred))
        d = (_sigmoid(pred) - y) / n
    d_out = np.zeros_like(out)
    d_out[:, 0] = d
    return loss, d_out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def forward(model: ClientModel, x: np.ndarray, tasks: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Raw head outputs, shape ``(n, output_dim)``, per task."""
    tasks = model.task_ids if tasks is None else list(tasks)
    h = _mlp_forward(model.encoder, x, True)[-1]
    out = {}
    for t in tasks:
        z = _mlp_forward(model.decoders[t], h, True)[-1]
        out[t] = _mlp_forward(model.heads[t], z, False)[-1]
    return out


def _backprop(model: ClientModel, batch: Batch, tasks: Sequence[str]):
    enc_acts = _mlp_forward(model.encoder, batch.x, True)
    h = enc_acts[-1]
    losses: dict[str, float] = {}
    dec_grads: dict[str, ParamTree] = {}
    head_grads: dict[str, ParamTree] = {}
    enc_task_grads: dict[str, ParamTree] = {}
    for t in tasks:
        if t not in batch.y:
            raise KeyError(f"batch has no labels for task {t!r}")
        dec_acts = _mlp_forward(model.decoders[t], h, True)
        head_acts = _mlp_forward(model.heads[t], dec_acts[-1], False)
        loss, d_out = _task_loss(model.tasks[t], head_acts[-1], batch.y[t])
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss} for task {t!r}")
        losses[t] = loss
        head_grads[t], d_z = _mlp_backward(model.heads[t], head_acts, d_out, False)
        dec_grads[t], d_h = _mlp_backward(model.decoders[t], dec_acts, d_z, True)
        enc_task_grads[t], _ = _mlp_backward(model.encoder, enc_acts, d_h, True)
    return losses, enc_task_grads, dec_grads, head_grads


def task_encoder_grads(model: ClientModel, batch: Batch, tasks: Sequence[str] | None = None) -> dict[str, ParamTree]:
    """Encoder gradient of each task's loss on its own."""
    tasks = model.task_ids if tasks is None else list(tasks)
    return _backprop(model, batch, tasks)[1]


def loss_and_grad(
    model: ClientModel, batch: Batch, tasks: Sequence[str] | None = None
) -> tuple[dict[str, float], ClientModel]:
    """Per-task losses and the gradient of their unweighted sum.

    The encoder gradient is accumulated task by task, so it is literally the sum of
    the per-task encoder gradients. Decoders and heads of tasks not in ``tasks`` get
    zero gradients.
    """
    tasks = model.task_ids if tasks is None else list(tasks)
    losses, enc_task, dec_grads, head_grads = _backprop(model, batch, tasks)
    enc = tree_zeros_like(model.encoder)
    for t in tasks:
        for k in enc:
            enc[k] = enc[k] + enc_task[t][k]
    grad = ClientModel(
        encoder=enc,
        decoders={t: dec_grads.get(t, tree_zeros_like(d)) for t, d in model.decoders.items()},
        heads={t: head_grads.get(t, tree_zeros_like(h)) for t, h in model.heads.items()},
        tasks=dict(model.tasks),
    )
    for part, tree in grad.parts():
        if not tree_allfinite(tree):
            raise DivergenceError(f"non-finite gradient in {part}; losses={losses}")
    return losses, grad


def sgd_step(model: ClientModel, grad: ClientModel, lr: float) -> ClientModel:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    return model.map2(grad, lambda p, g: p - lr * g)


def evaluate(model: ClientModel, x: np.ndarray, y: Mapping[str, np.ndarray], tasks: Sequence[str] | None = None) -> dict[str, TaskMetric]:
    """RMSE for regression tasks, accuracy (logit > 0) for classification tasks."""
    if x.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    tasks = model.task_ids if tasks is None else list(tasks)
    outs = forward(model, x, tasks)
    metrics = {}
    for t in tasks:
        kind = model.tasks[t]
        pred = outs[t][:, 0]
        if kind is TaskKind.REGRESSION:
            value = float(np.sqrt(np.mean((pred - y[t]) ** 2)))
        else:
            value = float(np.mean((pred > 0).astype(np.float64) == y[t]))
        metrics[t] = TaskMetric(t, value, kind.direction, kind.metric_name)
    return metrics
