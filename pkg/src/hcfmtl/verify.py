"""Self-check suites run by ``hcfmtl verify``.

Each suite compares the implementation against an independent oracle (finite
differences, grid search, explicit loops, published numbers) and reports one
:class:`Check` per property.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from hcfmtl import aggregation as agg
from hcfmtl.data import ClientDataset, ClientSpec, Domain, ScenarioConfig
from hcfmtl.federation import ExperimentConfig, client_update, mtl_reference_step, run_experiment
from hcfmtl.models import ArchSpec, Batch, ClientModel, TaskKind, init_model, loss_and_grad
from hcfmtl.params import FlatVector, ParamSchema, tree_mean
from hcfmtl.reference import TABLES, recompute


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class SuiteResult:
    name: str
    checks: list[Check] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def first_failure(self) -> Check | None:
        return next((c for c in self.checks if not c.ok), None)


# ------------------------------------------------------------------ helpers

def random_instance(rng: np.random.Generator, n_tasks: int | None = None):
    """A small random (arch, model, batch) triple for gradient checks."""
    input_dim = int(rng.integers(2, 6))
    arch = ArchSpec(
        input_dim=input_dim,
        encoder_widths=tuple(int(w) for w in rng.integers(2, 5, size=rng.integers(1, 3))),
        decoder_widths=tuple(int(w) for w in rng.integers(2, 5, size=rng.integers(1, 3))),
    )
    n_tasks = n_tasks or int(rng.integers(1, 4))
    kinds = {f"t{k}": TaskKind.REGRESSION if rng.random() < 0.5 else TaskKind.CLASSIFICATION for k in range(n_tasks)}
    model = init_model(arch, kinds, int(rng.integers(0, 2**31)))
    # push parameters away from the init scale so tanh is exercised non-linearly
    model = model.map2(model, lambda p, _: p + 0.3 * rng.standard_normal(p.shape))
    x = rng.standard_normal((8, input_dim))
    y = {
        t: rng.standard_normal(8) if k is TaskKind.REGRESSION else (rng.random(8) < 0.5).astype(float)
        for t, k in kinds.items()
    }
    return arch, model, Batch(x, y)


def _total_loss(model: ClientModel, batch: Batch) -> float:
    losses, _ = loss_and_grad(model, batch)
    return math.fsum(losses.values())


def finite_difference_grad(model: ClientModel, batch: Batch, h: float = 1e-5) -> ClientModel:
    """Central differences of the summed task loss, one coordinate at a time."""
    fd = model.copy()
    probe = model.copy()
    for (_, p_tree), (_, f_tree) in zip(probe.parts(), fd.parts()):
        for layer, arr in p_tree.items():
            flat = arr.reshape(-1)  # view: edits go straight into ``probe``
            grad = np.empty(flat.size)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                f_plus = _total_loss(probe, batch)
                flat[k] = orig - h
                f_minus = _total_loss(probe, batch)
                flat[k] = orig
                grad[k] = (f_plus - f_minus) / (2 * h)
            f_tree[layer] = grad.reshape(arr.shape)
    return fd


def grad_check(model: ClientModel, batch: Batch, rel: float = 1e-5, floor: float = 1e-8) -> tuple[bool, float]:
    """Compare analytic and finite-difference gradients; returns (ok, worst excess)."""
    _, grad = loss_and_grad(model, batch)
    fd = finite_difference_grad(model, batch)
    worst = -np.inf
    for (_, g), (_, f) in zip(grad.parts(), fd.parts()):
        for layer in g:
            a, b = g[layer], f[layer]
            excess = np.abs(a - b) - (rel * np.maximum(np.abs(a), np.abs(b)) + floor)
            worst = max(worst, float(excess.max()))
    return worst <= 0, worst


def simplex_grid(n: int, step: float = 1e-3) -> np.ndarray:
    m = int(round(1 / step))
    a = np.arange(m + 1) / m
    if n == 1:
        return np.ones((1, 1))
    if n == 2:
        return np.stack([a, 1 - a], axis=1)
    if n == 3:
        i, j = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
        keep = i + j <= m
        i, j = i[keep], j[keep]
        return np.stack([i / m, j / m, (m - i - j) / m], axis=1)
    raise ValueError("grid oracle supports n <= 3")


def grid_min_F(updates: list[np.ndarray], c: float, step: float = 1e-3) -> float:
    """Brute-force minimum of the conflict-averse objective over a simplex grid."""
    d = np.array(updates)
    n = d.shape[0]
    avg = d.mean(axis=0)
    sqrt_phi = c * np.linalg.norm(avg)
    w = simplex_grid(n, step)
    u = w @ d / n
    f = u @ avg + sqrt_phi * np.linalg.norm(u, axis=1)
    return float(f.min())


def naive_cross_attention(updates: list[np.ndarray], target: int) -> tuple[np.ndarray, np.ndarray]:
    """Explicit double loop: scores, softmax, weighted sum."""
    k = len(updates)
    d = len(updates[target])
    scores = []
    for j in range(k):
        s = 0.0
        for e in range(d):
            s += updates[target][e] * updates[j][e]
        scores.append(s / math.sqrt(d))
    top = max(scores)
    exps = [math.exp(s - top) for s in scores]
    total = sum(exps)
    p = [e / total for e in exps]
    out = [0.0] * d
    for e in range(d):
        for j in range(k):
            out[e] += p[j] * updates[j][e]
    return np.array(out), np.array(p)


def _vec(x: np.ndarray) -> FlatVector:
    x = np.asarray(x, dtype=np.float64)
    return FlatVector(x, ParamSchema((("v", x.shape),)))


def dataset_from_batch(batch: Batch, tasks: dict[str, TaskKind], client_id: str = "c") -> ClientDataset:
    d = batch.x.shape[1]
    dom = Domain("verify", np.zeros(d), np.eye(d))
    return ClientDataset(client_id, tasks, dom, batch.x, batch.y, batch.x, batch.y)


# ------------------------------------------------------------------ suites

def suite_gradient(seed: int = 0, instances: int = 20) -> SuiteResult:
    rng = np.random.default_rng(seed)
    res = SuiteResult("gradient")
    for k in range(instances):
        _, model, batch = random_instance(rng)
        ok, worst = grad_check(model, batch)
        res.checks.append(Check(f"instance {k}", ok, f"worst excess over tolerance {worst:.3e}"))
    # encoder gradient of a task set is the sum over its tasks
    _, model, batch = random_instance(rng, n_tasks=2)
    ga = loss_and_grad(model, batch, ["t0"])[1].encoder
    gb = loss_and_grad(model, batch, ["t1"])[1].encoder
    gab = loss_and_grad(model, batch, ["t0", "t1"])[1].encoder
    err = max(float(np.abs(gab[k] - (ga[k] + gb[k])).max()) for k in gab)
    res.checks.append(Check("encoder gradient additivity", err <= 1e-12, f"max abs err {err:.3e}"))
    return res


def suite_solver(seed: int = 0, instances: int = 100) -> SuiteResult:
    rng = np.random.default_rng(seed)
    res = SuiteResult("solver")
    worst_gap, worst_con = -np.inf, -np.inf
    for _ in range(instances):
        n = int(rng.choice([2, 3]))
        dim = int(rng.integers(1, 11))
        c = float(rng.choice([0.2, 0.4, 0.8]))
        ups = [rng.standard_normal(dim) for _ in range(n)]
        out = agg.solve_conflict_averse([_vec(u) for u in ups], agg.ConflictAverseConfig(c=c))
        gap = out.objective - grid_min_F(ups, c)
        avg = np.mean(ups, axis=0)
        con = np.linalg.norm(out.update.data - avg) - c * np.linalg.norm(avg) * (1 + 1e-9)
        worst_gap, worst_con = max(worst_gap, gap), max(worst_con, con)
    res.checks.append(Check("optimality vs 1e-3 simplex grid", worst_gap <= 1e-4, f"worst F gap {worst_gap:.3e}"))
    res.checks.append(Check("radius constraint", bool(worst_con <= 0), f"worst excess {worst_con:.3e}"))

    ups = [rng.standard_normal(6) for _ in range(3)]
    out = agg.solve_conflict_averse([_vec(u) for u in ups], agg.ConflictAverseConfig(c=0.0))
    mean = agg.fedavg([_vec(u) for u in ups]).data
    res.checks.append(Check("c=0 returns the mean update", np.array_equal(out.update.data, mean)))

    g = rng.standard_normal(7)
    err = 0.0
    for c in (0.2, 0.4, 0.5, 0.8):
        out = agg.solve_conflict_averse([_vec(g)] * 3, agg.ConflictAverseConfig(c=c))
        err = max(err, float(np.abs(out.update.data - (1 + c) * g).max()))
    res.checks.append(Check("identical updates give (1+c)g", err <= 1e-12, f"max abs err {err:.3e}"))
    return res


def suite_attention(seed: int = 0, instances: int = 100) -> SuiteResult:
    rng = np.random.default_rng(seed)
    res = SuiteResult("attention")
    worst, worst_sum, neg, perm_ok, ident_ok = 0.0, 0.0, False, True, True
    for _ in range(instances):
        k = int(rng.choice([1, 2, 3, 8]))
        d = int(rng.choice([1, 5, 64]))
        ups = [rng.standard_normal(d) * rng.choice([1e-3, 1.0]) for _ in range(k)]
        perm = rng.permutation(k)
        for i in range(k):
            out = agg.cross_attention_layer(ups, i)
            ref, p_ref = naive_cross_attention(ups, i)
            p = agg.attention_weights(ups, i)
            worst = max(worst, float(np.abs(out - ref).max()), float(np.abs(p - p_ref).max()))
            worst_sum = max(worst_sum, abs(math.fsum(p.tolist()) - 1.0))
            neg = neg or bool((p < 0).any())
        permuted = [ups[j] for j in perm]
        for new_i, old_i in enumerate(perm):
            if not np.array_equal(agg.cross_attention_layer(permuted, new_i), agg.cross_attention_layer(ups, old_i)):
                perm_ok = False
        if k == 1 and not np.array_equal(agg.cross_attention_layer(ups, 0), ups[0]):
            ident_ok = False
    res.checks.append(Check("matches explicit-loop oracle", worst <= 1e-12, f"max abs err {worst:.3e}"))
    res.checks.append(Check("weights are a probability vector", worst_sum <= 1e-12 and not neg, f"max |sum-1| {worst_sum:.3e}"))
    res.checks.append(Check("single update is returned unchanged", ident_ok))
    res.checks.append(Check("permutation equivariance (exact)", perm_ok))
    return res


def theorem_one_step(n: int, seed: int = 0) -> float:
    """Max abs gap between fedavg of one-step client encoder deltas and (1/N) x the MTL update."""
    rng = np.random.default_rng(seed + 1000 * n)
    kinds = {f"t{k}": (TaskKind.REGRESSION if k % 2 == 0 else TaskKind.CLASSIFICATION) for k in range(n)}
    arch = ArchSpec(input_dim=4, encoder_widths=(6, 5), decoder_widths=(4,))
    shared = init_model(arch, kinds, seed)
    x = rng.standard_normal((12, 4))
    y = {t: rng.standard_normal(12) if k is TaskKind.REGRESSION else (rng.random(12) < 0.5).astype(float) for t, k in kinds.items()}
    batch = Batch(x, y)
    lr = 0.1
    mtl = mtl_reference_step(shared, batch, lr)
    deltas = []
    for t in kinds:
        client = shared.subset([t])
        ds = dataset_from_batch(Batch(x, {t: y[t]}), {t: kinds[t]}, t)
        delta, _ = client_update(client, ds, 1, lr, x.shape[0], np.random.default_rng(0))
        deltas.append(delta.encoder)
    avg = tree_mean(deltas)
    return max(float(np.abs(avg[k] - mtl[k] / n).max()) for k in avg)


def suite_theorem(seed: int = 0) -> SuiteResult:
    res = SuiteResult("theorem")
    for n in (2, 3, 5):
        err = theorem_one_step(n, seed)
        res.checks.append(Check(f"one-step equivalence N={n}", err <= 1e-12, f"max abs err {err:.3e}"))
    return res


def quadratic_chain_rule(rng: np.random.Generator, dim: int = 8, h: float = 1e-4) -> float:
    """Relative gap between d/dpsi L(theta(psi)) by central differences and theta_tilde . grad L."""
    a = rng.standard_normal((dim, dim))
    a = a @ a.T + np.eye(dim)
    b = rng.standard_normal(dim)
    theta0, delta, tilde = (rng.standard_normal(dim) for _ in range(3))
    psi = float(rng.uniform(-1, 2))

    def theta(p):
        return agg.apply_personalized_update({"w": theta0}, {"w": delta}, p, {"w": tilde})["w"]

    def loss(p):
        th = theta(p)
        return 0.5 * th @ a @ th + b @ th

    fd = (loss(psi + h) - loss(psi - h)) / (2 * h)
    analytic = agg.hyper_weight_delta(tilde, a @ theta(psi) + b)
    return abs(fd - analytic) / max(abs(analytic), 1e-12)


def suite_hyper(seed: int = 0, instances: int = 50) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = max(quadratic_chain_rule(rng) for _ in range(instances))
    return SuiteResult("hyper", [Check("chain rule on quadratic losses", bool(worst <= 1e-6), f"worst rel err {worst:.3e}")])


def suite_delta_m(seed: int = 0) -> SuiteResult:
    res = SuiteResult("delta_m")
    for table, spec in TABLES.items():
        for method in spec["methods"]:
            got, reported = recompute(table, method)
            res.checks.append(Check(f"{table} {method}", abs(got - reported) <= 0.01, f"{got:+.4f} vs {reported:+.2f}"))
    return res


def tiny_config(**overrides) -> ExperimentConfig:
    scenario = ScenarioConfig(
        clients=(
            ClientSpec(id="a", tasks=("seg",), domain="A", n_train=24, n_test=40),
            ClientSpec(id="b", tasks=("normals",), domain="A", n_train=24, n_test=40),
            ClientSpec(id="c", tasks=("seg", "depth"), domain="B", n_train=24, n_test=40),
        ),
        input_dim=6,
        latent_dim=4,
    )
    base = dict(
        scenario=scenario,
        arch=ArchSpec(input_dim=6, encoder_widths=(8,), decoder_widths=(6, 6)),
        rounds=3,
        batch_size=8,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def suite_degeneracy(seed: int = 0) -> SuiteResult:
    local = run_experiment(tiny_config(mode="local", rounds=10, seed=seed))
    hca = run_experiment(
        tiny_config(
            mode="hca2",
            rounds=10,
            seed=seed,
            conflict_averse=agg.ConflictAverseConfig(c=0.0),
            hyper_weights=agg.HyperConfig(lr=0.0, init_alpha=0.0, init_beta=0.0),
        )
    )
    same = local.metric_rows == hca.metric_rows
    return SuiteResult("degeneracy", [Check("frozen hca2 equals local over 10 rounds", same)])


def suite_determinism(seed: int = 0) -> SuiteResult:
    a = run_experiment(tiny_config(seed=seed))
    b = run_experiment(tiny_config(seed=seed))
    return SuiteResult(
        "determinism",
        [Check("identical config and seed give identical results", a.metric_rows == b.metric_rows and a.hyper_rows == b.hyper_rows)],
    )


SUITES: dict[str, Callable[..., SuiteResult]] = {
    "gradient": suite_gradient,
    "solver": suite_solver,
    "attention": suite_attention,
    "theorem": suite_theorem,
    "hyper": suite_hyper,
    "delta_m": suite_delta_m,
    "degeneracy": suite_degeneracy,
    "determinism": suite_determinism,
}


def run_suites(names: list[str] | None = None, seed: int = 0) -> list[SuiteResult]:
    names = names or list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s) {unknown}; choose from {sorted(SUITES)}")
    return [SUITES[n](seed=seed) for n in names]
