"""Server-side aggregation rules.

* :func:`fedavg` - plain mean of updates.
* :func:`solve_conflict_averse` - conflict-averse encoder update: a simplex-weighted
  combination of client updates that keeps every client's improvement high while
  staying inside a ball of radius ``c * ||mean update||`` around the mean update.
* :func:`cross_attention_layer` / :func:`aggregate_decoders` - per-layer softmax
  attention over all decoder updates in the federation.
* hyper weights - per-client scalars that blend the aggregated update into each
  personalised model, learned from inner products of updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np
from pydantic import Field, field_validator, model_validator

from hcfmtl.base import StrictModel
from hcfmtl.params import (
    FlatVector,
    ParamTree,
    SchemaError,
    dot,
    inner,
    mean,
    norm,
    schema_of,
)

# norms below this are treated as zero in denominators
NORM_EPS = 1e-12


class ConflictAverseConfig(StrictModel):
    c: float = 0.4
    solver_max_iters: int = Field(1000, ge=1)
    solver_tol: float = Field(1e-10, ge=0.0)
    solver_step: float = Field(0.5, gt=0.0)

    @field_validator("c")
    @classmethod
    def _radius(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError(f"c must satisfy c ∈ [0,1), got {v}")
        return v


class HyperConfig(StrictModel):
    lr: float = Field(0.1, ge=0.0)
    init_alpha: float = 0.0
    init_beta: float = 0.0
    clamp: tuple[float, float] = (0.0, 1.0)
    update_order: str = "before"

    @field_validator("update_order")
    @classmethod
    def _order(cls, v):
        if v not in ("before", "after"):
            raise ValueError("update_order must be 'before' or 'after'")
        return v

    @model_validator(mode="after")
    def _clamp_range(self):
        lo, hi = self.clamp
        if lo > hi:
            raise ValueError(f"clamp range must satisfy lo <= hi, got {self.clamp}")
        for name in ("init_alpha", "init_beta"):
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ValueError(f"{name}={v} lies outside clamp range {self.clamp}")
        return self


# --------------------------------------------------------------------- fedavg

def fedavg(updates: Sequence[FlatVector]) -> FlatVector:
    if not updates:
        raise ValueError("fedavg needs at least one update")
    return mean(updates)


# ------------------------------------------------------- conflict-averse solve

def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[0]
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, n + 1)
    rho = np.count_nonzero(u - css / ind > 0)
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


def gram(updates: Sequence[FlatVector]) -> np.ndarray:
    n = len(updates)
    g = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            g[i, j] = g[j, i] = inner(updates[i], updates[j])
    return g


def combine(w: Sequence[float], updates: Sequence[FlatVector]) -> FlatVector:
    """``U_w = (1/N) * sum_i w_i * updates[i]``."""
    n = len(updates)
    acc = np.zeros(updates[0].schema.total_dim)
    for wi, u in zip(w, updates):
        acc += wi * u.data
    return FlatVector(acc / n, updates[0].schema)


def objective_F(
    w: Sequence[float], updates: Sequence[FlatVector], mean_update: FlatVector, phi: float
) -> tuple[float, FlatVector]:
    """``F(w) = U_w . mean_update + sqrt(phi) * ||U_w||``; returns ``(F, U_w)``."""
    u_w = combine(w, updates)
    return inner(u_w, mean_update) + math.sqrt(phi) * norm(u_w), u_w


def _objective_from_gram(w: np.ndarray, g: np.ndarray, sqrt_phi: float) -> tuple[float, np.ndarray]:
    """F and its gradient in Gram form (both scaled by N relative to ``objective_F``)."""
    n = g.shape[0]
    gw = g @ w
    lin = gw.sum() / n
    d_lin = g.sum(axis=1) / n
    sq = float(w @ gw)
    nrm = math.sqrt(max(sq, 0.0))
    if nrm < NORM_EPS:
        return lin, d_lin
    return lin + sqrt_phi * nrm, d_lin + sqrt_phi * gw / nrm


def _correction_scale(sqrt_phi: float, u_norm: float) -> float:
    """Coefficient of ``U_w*`` in the final update: ``sqrt(phi) / ||U_w*||``."""
    return sqrt_phi / u_norm


def _pgd_backtracking(w0: np.ndarray, g: np.ndarray, sqrt_phi: float, cfg: ConflictAverseConfig) -> tuple[np.ndarray, int]:
    """Projected gradient with a backtracking step; returns the best iterate seen.

    The norm term has a kink where ``U_w = 0``, so a fixed step can oscillate when the
    origin lies in the hull of the updates. Backtracking shrinks the step near the kink.
    """
    w = w0
    f, grad = _objective_from_gram(w, g, sqrt_phi)
    best_f, best_w = f, w
    t = cfg.solver_step
    it = 0
    for it in range(1, cfg.solver_max_iters + 1):
        while True:
            w_next = project_simplex(w - t * grad)
            f_next, grad_next = _objective_from_gram(w_next, g, sqrt_phi)
            d = w_next - w
            if f_next <= f + float(grad @ d) + float(d @ d) / (2 * t) + 1e-15 or t < 1e-14:
                break
            t *= 0.5
        w, f, grad = w_next, f_next, grad_next
        if f < best_f:
            best_f, best_w = f, w
        if float(np.linalg.norm(d)) < cfg.solver_tol:
            break
        t *= 2.0
    return best_w, it


@dataclass
class ConflictAverseResult:
    weights: np.ndarray
    update: FlatVector
    mean_update: FlatVector
    objective: float
    iterations: int
    lam: float | None = None


def solve_conflict_averse(updates: Sequence[FlatVector], cfg: ConflictAverseConfig) -> ConflictAverseResult:
    """Minimise ``F`` over the simplex by projected gradient descent, then build the update.

    The final update is ``mean + (sqrt(phi) / ||U_w*||) * U_w*`` with
    ``phi = c**2 * ||mean||**2``. Degenerate inputs fall back as follows: all-zero
    updates give a zero update with uniform weights, and ``||U_w*|| ~ 0`` drops the
    correction term.
    """
    if not updates:
        raise ValueError("conflict-averse aggregation needs at least one update")
    n = len(updates)
    schema = updates[0].schema
    for u in updates:
        if u.schema != schema:
            raise SchemaError("updates do not share a schema")
    avg = mean(updates)
    uniform = np.full(n, 1.0 / n)
    if all(not np.any(u.data) for u in updates):
        return ConflictAverseResult(uniform, FlatVector(np.zeros(schema.total_dim), schema), avg, 0.0, 0)

    avg_norm = norm(avg)
    phi = (cfg.c * avg_norm) ** 2
    sqrt_phi = cfg.c * avg_norm

    # argmin is invariant to positive rescaling of F; normalise the Gram matrix so the
    # fixed step size is meaningful whatever the magnitude of the updates
    g = gram(updates)
    g_scale = float(np.trace(g)) / n
    g_n = g / g_scale
    sqrt_phi_n = sqrt_phi / math.sqrt(g_scale)

    w, it = _pgd_backtracking(uniform, g_n, sqrt_phi_n, cfg)

    f_val, u_w = objective_F(w, updates, avg, phi)
    if cfg.c == 0.0:
        return ConflictAverseResult(w, avg, avg, f_val, it)
    u_norm = norm(u_w)
    if u_norm < NORM_EPS:
        return ConflictAverseResult(w, avg, avg, f_val, it)
    coef = _correction_scale(sqrt_phi, u_norm)
    final = FlatVector(avg.data + coef * u_w.data, schema)
    lam = u_norm / sqrt_phi if sqrt_phi > 0 else None
    return ConflictAverseResult(w, final, avg, f_val, it, lam)


# ------------------------------------------------------------ cross attention

def _canonical_order(vectors: Sequence[np.ndarray]) -> list[int]:
    """Content-based ordering so sums do not depend on input order."""
    return sorted(range(len(vectors)), key=lambda j: vectors[j].tobytes())


def attention_weights(layer_updates: Sequence[np.ndarray], target: int) -> np.ndarray:
    """Softmax over scaled inner products of the target update with every update.

    Scores use ``sqrt(d)`` with ``d`` the flattened layer length. If every update is
    (numerically) zero the weights fall back to uniform.
    """
    k = len(layer_updates)
    if k == 0:
        raise ValueError("cross attention needs at least one update")
    q = np.asarray(layer_updates[target], dtype=np.float64).reshape(-1)
    d = q.shape[0]
    if any(np.asarray(u).size != d for u in layer_updates):
        raise SchemaError("layer updates do not share a length")
    if max(math.sqrt(dot(u, u)) for u in layer_updates) < NORM_EPS:
        return np.full(k, 1.0 / k)
    scores = np.array([dot(q, u) for u in layer_updates]) / math.sqrt(d)
    e = np.exp(scores - scores.max())
    return e / math.fsum(e.tolist())


def cross_attention_layer(layer_updates: Sequence[np.ndarray | FlatVector], target: int) -> np.ndarray:
    """Attention-weighted sum of all updates of one layer, from the view of ``target``."""
    arrays = [
        (u.data if isinstance(u, FlatVector) else np.asarray(u, dtype=np.float64)).reshape(-1)
        for u in layer_updates
    ]
    p = attention_weights(arrays, target)
    out = np.zeros_like(arrays[0])
    for j in _canonical_order(arrays):
        out += p[j] * arrays[j]
    return out


def aggregate_decoders(updates: Mapping[Hashable, ParamTree]) -> dict[Hashable, ParamTree]:
    """Layer-wise cross attention across every decoder in the federation.

    ``updates`` maps a decoder key (e.g. ``(client_id, task_id)``) to its update tree.
    Each layer unit is aggregated independently, and the result uses the same keys.
    """
    if not updates:
        raise ValueError("no decoder updates to aggregate")
    keys = list(updates)
    schema = schema_of(updates[keys[0]])
    for key in keys[1:]:
        if schema_of(updates[key]) != schema:
            raise SchemaError(f"decoder {key!r} does not match the shared decoder schema")
    out: dict[Hashable, ParamTree] = {key: {} for key in keys}
    for layer_id, shape in schema.layers:
        flat = [updates[key][layer_id].reshape(-1) for key in keys]
        for i, key in enumerate(keys):
            out[key][layer_id] = cross_attention_layer(flat, i).reshape(shape)
    return out


# ----------------------------------------------------------------- hyper weights

def apply_personalized_update(
    theta_prev: ParamTree,
    delta: ParamTree,
    psi: float | Mapping[str, float],
    theta_tilde: ParamTree,
) -> ParamTree:
    """``theta_prev + delta + psi * theta_tilde``; ``psi`` may be a per-layer mapping."""
    out = {}
    for k, prev in theta_prev.items():
        weight = psi[k] if isinstance(psi, Mapping) else psi
        out[k] = prev + delta[k] + weight * theta_tilde[k]
    return out


def hyper_weight_delta(theta_tilde: FlatVector | np.ndarray, delta: FlatVector | np.ndarray) -> float:
    """Raw hyper-weight signal: inner product of the aggregated update and the local update."""
    a = theta_tilde.data if isinstance(theta_tilde, FlatVector) else theta_tilde
    b = delta.data if isinstance(delta, FlatVector) else delta
    return dot(a, b)


def hyper_weight_step(
    psi: float,
    theta_tilde: np.ndarray,
    delta: np.ndarray,
    lr: float,
    clamp: tuple[float, float],
    eps: float = NORM_EPS,
) -> float:
    """Ascent step on the cosine-normalised signal, clamped into ``clamp``."""
    raw = hyper_weight_delta(theta_tilde, delta)
    denom = math.sqrt(dot(theta_tilde, theta_tilde)) * math.sqrt(dot(delta, delta)) + eps
    lo, hi = clamp
    return min(hi, max(lo, psi + lr * raw / denom))


@dataclass
class HyperWeights:
    """Encoder weight per client and decoder weight per (client, task, layer)."""

    alpha: dict[str, float]
    beta: dict[tuple[str, str, str], float]
    lr: float = 0.1
    clamp: tuple[float, float] = (0.0, 1.0)

    @classmethod
    def init(
        cls,
        client_tasks: Mapping[str, Sequence[str]],
        decoder_layers: Sequence[str],
        cfg: HyperConfig,
    ) -> "HyperWeights":
        alpha = {cid: cfg.init_alpha for cid in client_tasks}
        beta = {
            (cid, t, layer): cfg.init_beta
            for cid, tasks in client_tasks.items()
            for t in tasks
            for layer in decoder_layers
        }
        return cls(alpha, beta, cfg.lr, tuple(cfg.clamp))

    def copy(self) -> "HyperWeights":
        return HyperWeights(dict(self.alpha), dict(self.beta), self.lr, self.clamp)

    def beta_for(self, client_id: str, task_id: str) -> dict[str, float]:
        return {layer: v for (c, t, layer), v in self.beta.items() if c == client_id and t == task_id}

    def update_alpha(self, client_id: str, u_tilde: np.ndarray, delta: np.ndarray) -> None:
        self.alpha[client_id] = hyper_weight_step(self.alpha[client_id], u_tilde, delta, self.lr, self.clamp)

    def update_beta(self, client_id: str, task_id: str, layer: str, a_tilde: np.ndarray, delta: np.ndarray) -> None:
        key = (client_id, task_id, layer)
        self.beta[key] = hyper_weight_step(self.beta[key], a_tilde, delta, self.lr, self.clamp)

