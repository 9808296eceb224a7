import math

import numpy as np
import pytest

from hcfmtl.metrics import Direction
from hcfmtl.models import (
    ArchSpec,
    Batch,
    ClientModel,
    DivergenceError,
    TaskKind,
    evaluate,
    forward,
    init_model,
    loss_and_grad,
    sgd_step,
    task_encoder_grads,
)
from oracles import central_difference

R, C = TaskKind.REGRESSION, TaskKind.CLASSIFICATION


def random_case(rng):
    d = int(rng.integers(2, 6))
    arch = ArchSpec(
        input_dim=d,
        encoder_widths=tuple(int(w) for w in rng.integers(2, 5, size=rng.integers(1, 3))),
        decoder_widths=tuple(int(w) for w in rng.integers(2, 5, size=rng.integers(1, 3))),
    )
    kinds = {f"t{k}": (R if rng.random() < 0.5 else C) for k in range(int(rng.integers(1, 4)))}
    model = init_model(arch, kinds, int(rng.integers(0, 2**31)))
    model = model.map2(model, lambda p, _: p + 0.3 * rng.standard_normal(p.shape))
    x = rng.standard_normal((7, d))
    y = {t: rng.standard_normal(7) if k is R else (rng.random(7) < 0.5).astype(float) for t, k in kinds.items()}
    return model, Batch(x, y)


def total_loss(model, batch):
    losses, _ = loss_and_grad(model, batch)
    return math.fsum(losses.values())


def fd_grad(model, batch):
    """Finite-difference gradient for every tensor in the model."""
    out = model.copy()
    for part, tree in list(model.parts()):
        for name in tree:
            def f(arr, part=part, name=name):
                m = model.copy()
                dict(m.parts())[part][name] = arr
                return total_loss(m, batch)

            dict(out.parts())[part][name] = central_difference(f, tree[name])
    return out


def test_init_is_deterministic_and_seed_sensitive():
    arch = ArchSpec(input_dim=4)
    kinds = {"a": R, "b": C}
    m1, m2, m3 = init_model(arch, kinds, 7), init_model(arch, kinds, 7), init_model(arch, kinds, 8)
    for (p, t1), (_, t2), (_, t3) in zip(m1.parts(), m2.parts(), m3.parts()):
        for k in t1:
            assert np.array_equal(t1[k], t2[k])
    assert not np.array_equal(m1.encoder["l0.weight"], m3.encoder["l0.weight"])


def test_init_range_and_zero_bias():
    m = init_model(ArchSpec(input_dim=4, encoder_widths=(3,), decoder_widths=(2,)), {"a": R}, 0)
    assert np.abs(m.encoder["l0.weight"]).max() <= 0.5
    assert m.encoder["l0.weight"].shape == (4, 3)
    assert not m.encoder["l0.bias"].any()


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_central_differences(seed):
    model, batch = random_case(np.random.default_rng(seed))
    _, grad = loss_and_grad(model, batch)
    fd = fd_grad(model, batch)
    for (part, g), (_, n) in zip(grad.parts(), fd.parts()):
        for k in g:
            err = np.abs(g[k] - n[k])
            assert (err <= 1e-5 * np.maximum(np.abs(n[k]), 1e-3)).all(), (part, k, err.max())


def test_encoder_grad_is_sum_of_task_grads():
    rng = np.random.default_rng(11)
    model, batch = random_case(rng)
    while len(model.tasks) < 2:
        model, batch = random_case(rng)
    per_task = task_encoder_grads(model, batch)
    _, grad = loss_and_grad(model, batch)
    for k in grad.encoder:
        total = sum(per_task[t][k] for t in model.tasks)
        np.testing.assert_allclose(grad.encoder[k], total, rtol=0, atol=1e-12)


def test_single_task_encoder_grad_equals_total():
    model, batch = random_case(np.random.default_rng(3))
    t = model.task_ids[0]
    sub = model.subset([t])
    sub_batch = Batch(batch.x, {t: batch.y[t]})
    _, grad = loss_and_grad(sub, sub_batch)
    per = task_encoder_grads(sub, sub_batch)[t]
    for k in grad.encoder:
        assert np.array_equal(grad.encoder[k], per[k])


def test_tasks_outside_selection_get_zero_grads():
    rng = np.random.default_rng(5)
    model, batch = random_case(rng)
    while len(model.tasks) < 2:
        model, batch = random_case(rng)
    keep, drop = model.task_ids[0], model.task_ids[1]
    _, grad = loss_and_grad(model, batch, [keep])
    assert all(not v.any() for v in grad.decoders[drop].values())
    assert all(not v.any() for v in grad.heads[drop].values())


def test_zero_head_gives_zero_upstream_gradients():
    model, batch = random_case(np.random.default_rng(9))
    for h in model.heads.values():
        for k in h:
            h[k][...] = 0.0
    _, grad = loss_and_grad(model, batch)
    assert all(not v.any() for v in grad.encoder.values())
    for d in grad.decoders.values():
        assert all(not v.any() for v in d.values())


def test_sgd_step_arithmetic():
    one = {"w": np.array([1.0])}
    two = {"w": np.array([2.0])}
    m = ClientModel(one, {"a": one}, {"a": one}, {"a": R})
    g = ClientModel(two, {"a": two}, {"a": two}, {"a": R})
    out = sgd_step(m, g, 0.1)
    assert out.encoder["w"][0] == pytest.approx(0.8, abs=1e-15)
    assert np.array_equal(sgd_step(m, g, 0.0).encoder["w"], one["w"])
    with pytest.raises(ValueError):
        sgd_step(m, g, -1.0)


def test_nan_input_raises_divergence():
    model, batch = random_case(np.random.default_rng(2))
    batch.x[0, 0] = np.nan
    with pytest.raises(DivergenceError):
        loss_and_grad(model, batch)


def zero_output_model(kinds, d=3):
    m = init_model(ArchSpec(input_dim=d, encoder_widths=(2,), decoder_widths=(2,)), kinds, 0)
    for h in m.heads.values():
        for k in h:
            h[k][...] = 0.0
    return m


def test_evaluate_regression_zero_predictor_rmse():
    rng = np.random.default_rng(0)
    m = zero_output_model({"r": R})
    y = np.where(rng.random(50) < 0.5, -1.0, 1.0)
    got = evaluate(m, rng.standard_normal((50, 3)), {"r": y})["r"]
    assert got.value == pytest.approx(1.0, abs=1e-15)
    assert got.direction is Direction.LOWER_BETTER


def test_evaluate_perfect_predictor():
    rng = np.random.default_rng(1)
    m = zero_output_model({"r": R, "c": C})
    x = rng.standard_normal((30, 3))
    out = forward(m, x)
    # labels equal to the model's own outputs; class labels set from a positive bias
    m.heads["c"]["l0.bias"][...] = 1.0
    res = evaluate(m, x, {"r": out["r"][:, 0], "c": np.ones(30)})
    assert res["r"].value == 0.0
    assert res["c"].value == 1.0
    assert res["c"].direction is Direction.HIGHER_BETTER


def test_evaluate_empty_raises():
    m = zero_output_model({"r": R})
    with pytest.raises(ValueError):
        evaluate(m, np.zeros((0, 3)), {"r": np.zeros(0)})


def test_arch_validation():
    with pytest.raises(ValueError):
        ArchSpec(encoder_widths=(0, 4))
    with pytest.raises(ValueError):
        ArchSpec(activation="relu")
