import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hcfmtl.aggregation import (
    ConflictAverseConfig,
    HyperConfig,
    HyperWeights,
    aggregate_decoders,
    apply_personalized_update,
    attention_weights,
    cross_attention_layer,
    fedavg,
    hyper_weight_delta,
    hyper_weight_step,
    objective_F,
    project_simplex,
    solve_conflict_averse,
)
from hcfmtl.params import FlatVector, ParamSchema, SchemaError, mean, norm
from oracles import central_difference, grid_minimum, loop_cross_attention, objective_by_hand


def vec(values):
    a = np.asarray(values, dtype=float)
    return FlatVector(a, ParamSchema((("v", a.shape),)))


def solve(updates, c=0.4):
    return solve_conflict_averse([vec(u) for u in updates], ConflictAverseConfig(c=c))


# ---------------------------------------------------------------- fedavg

def test_fedavg_cases():
    assert fedavg([vec([1.0, 2.0])]).data.tolist() == [1.0, 2.0]
    assert fedavg([vec([1.0, 0.0]), vec([3.0, 2.0])]).data.tolist() == [2.0, 1.0]
    with pytest.raises(ValueError):
        fedavg([])


# ------------------------------------------------------------- objective

def test_objective_orthogonal_pair_frozen():
    ups = [vec([1.0, 0.0]), vec([0.0, 1.0])]
    avg = mean(ups)
    f, u_w = objective_F([0.5, 0.5], ups, avg, (0.5 * norm(avg)) ** 2)
    assert f == pytest.approx(0.375, abs=1e-15)
    assert u_w.data.tolist() == [0.25, 0.25]
    w_grid, f_grid = grid_minimum([[1.0, 0.0], [0.0, 1.0]], 0.5)
    assert f_grid == pytest.approx(0.375, abs=1e-12)
    np.testing.assert_allclose(w_grid, [0.5, 0.5])


def test_objective_matches_hand_arithmetic():
    raw = [[1.0, -2.0, 0.5], [0.3, 0.4, -1.0]]
    ups = [vec(u) for u in raw]
    avg = mean(ups)
    f, _ = objective_F([0.3, 0.7], ups, avg, (0.4 * norm(avg)) ** 2)
    assert f == pytest.approx(objective_by_hand([0.3, 0.7], raw, 0.4), rel=1e-14)


def test_objective_identical_updates():
    g = [1.0, 2.0, -2.0]
    ups = [vec(g)] * 3
    avg = mean(ups)
    gg = 9.0
    f, _ = objective_F([0.2, 0.3, 0.5], ups, avg, (0.4 * 3.0) ** 2)
    # U_w = g / N
    assert f == pytest.approx((gg + 0.4 * 3.0 * 3.0) / 3, rel=1e-14)


# ---------------------------------------------------------------- solver

def test_solver_orthogonal_pair():
    res = solve([[1.0, 0.0], [0.0, 1.0]], c=0.5)
    np.testing.assert_allclose(res.weights, [0.5, 0.5], atol=1e-9)
    np.testing.assert_allclose(res.update.data, [0.75, 0.75], atol=1e-9)


@pytest.mark.parametrize("c", [0.2, 0.4, 0.8])
def test_solver_beats_grid(c):
    rng = np.random.default_rng(int(c * 10))
    for _ in range(15):
        n = int(rng.integers(2, 4))
        ups = rng.standard_normal((n, int(rng.integers(1, 11)))).tolist()
        res = solve(ups, c)
        _, f_grid = grid_minimum(ups, c, 1e-3)
        assert objective_by_hand(res.weights, ups, c) <= f_grid + 1e-4
        assert res.weights.min() >= 0 and res.weights.sum() == pytest.approx(1.0, abs=1e-12)
        avg = np.mean(ups, axis=0)
        assert np.linalg.norm(res.update.data - avg) <= c * np.linalg.norm(avg) * (1 + 1e-9)


def test_c_zero_returns_mean_exactly():
    rng = np.random.default_rng(4)
    ups = [vec(u) for u in rng.standard_normal((3, 5))]
    res = solve_conflict_averse(ups, ConflictAverseConfig(c=0.0))
    assert np.array_equal(res.update.data, mean(ups).data)


@pytest.mark.parametrize("n", [1, 2, 5])
def test_identical_updates_give_scaled_update(n):
    g = np.random.default_rng(n).standard_normal(7)
    res = solve([g] * n, c=0.4)
    np.testing.assert_allclose(res.update.data, 1.4 * g, rtol=0, atol=1e-12)


def test_all_zero_updates():
    res = solve([[0.0, 0.0], [0.0, 0.0]])
    assert not res.update.data.any()
    assert res.weights.tolist() == [0.5, 0.5]


def test_opposite_updates_have_zero_mean():
    res = solve([[1.0, 2.0], [-1.0, -2.0]])
    assert np.all(np.isfinite(res.update.data))
    np.testing.assert_allclose(res.update.data, 0.0, atol=1e-15)


def test_scale_equivariance():
    rng = np.random.default_rng(8)
    ups = rng.standard_normal((3, 6))
    a = solve(ups).update.data
    b = solve(ups * 1e3).update.data
    np.testing.assert_allclose(b, 1e3 * a, rtol=1e-6)


def test_solver_permutation_invariance():
    rng = np.random.default_rng(12)
    ups = rng.standard_normal((3, 4))
    a = solve(ups)
    b = solve(ups[[2, 0, 1]])
    # iterative solve: agreement is at solver precision, the objective much tighter
    assert a.objective == pytest.approx(b.objective, rel=1e-10, abs=1e-14)
    np.testing.assert_allclose(a.update.data, b.update.data, rtol=0, atol=1e-6 * np.linalg.norm(a.update.data))


def test_solver_rejects_mixed_schemas():
    with pytest.raises(SchemaError):
        solve_conflict_averse([vec([1.0]), vec([1.0, 2.0])], ConflictAverseConfig())


def test_c_range_message():
    with pytest.raises(ValueError, match=r"c ∈ \[0,1\)"):
        ConflictAverseConfig(c=1.0)
    with pytest.raises(ValueError):
        ConflictAverseConfig(c=-0.1)


def test_project_simplex():
    np.testing.assert_allclose(project_simplex(np.array([0.2, 0.8])), [0.2, 0.8])
    np.testing.assert_allclose(project_simplex(np.array([2.0, 0.0])), [1.0, 0.0])
    np.testing.assert_allclose(project_simplex(np.array([1.0, 1.0, 1.0])), [1 / 3] * 3)


# ------------------------------------------------------------ cross attention

dims = st.sampled_from([1, 5, 64])
ks = st.sampled_from([1, 2, 3, 8])


@settings(max_examples=100, deadline=None)
@given(ks, dims, st.integers(0, 2**32 - 1))
def test_attention_matches_loop_oracle(k, d, seed):
    rng = np.random.default_rng(seed)
    ups = list(rng.standard_normal((k, d)) * rng.uniform(0.01, 3))
    t = int(rng.integers(k))
    want, p_want = loop_cross_attention(ups, t)
    p = attention_weights(ups, t)
    np.testing.assert_allclose(cross_attention_layer(ups, t), want, rtol=0, atol=1e-12)
    np.testing.assert_allclose(p, p_want, rtol=0, atol=1e-12)
    assert p.min() >= 0 and abs(p.sum() - 1) <= 1e-12
    perm = rng.permutation(k)
    moved = [ups[j] for j in perm]
    new_t = int(np.where(perm == t)[0][0])
    assert np.array_equal(cross_attention_layer(moved, new_t), cross_attention_layer(ups, t))


def test_attention_single_update_is_identity():
    u = np.array([0.3, -1.2, 4.0])
    assert np.array_equal(cross_attention_layer([u], 0), u)


def test_attention_two_equal_updates():
    u = np.array([1.0, 2.0])
    np.testing.assert_allclose(attention_weights([u, u], 0), [0.5, 0.5])


def test_attention_zero_updates_uniform():
    z = np.zeros(4)
    assert attention_weights([z, z, z], 1).tolist() == [1 / 3] * 3


def test_attention_large_scores_stay_finite():
    ups = [np.array([1e4, 0.0]), np.array([0.0, 1e4])]
    p = attention_weights(ups, 0)
    assert np.isfinite(p).all() and p[0] == pytest.approx(1.0)


def test_aggregate_decoders_layer_by_layer():
    rng = np.random.default_rng(0)
    trees = {
        key: {"l0.weight": rng.standard_normal((3, 2)), "l0.bias": rng.standard_normal(2)}
        for key in [("a", "seg"), ("b", "depth"), ("b", "seg")]
    }
    out = aggregate_decoders(trees)
    keys = list(trees)
    for i, key in enumerate(keys):
        for layer in ("l0.weight", "l0.bias"):
            want, _ = loop_cross_attention([trees[k][layer].reshape(-1) for k in keys], i)
            np.testing.assert_allclose(out[key][layer].reshape(-1), want, atol=1e-12)
            assert out[key][layer].shape == trees[key][layer].shape
    rev = aggregate_decoders({k: trees[k] for k in reversed(keys)})
    for key in keys:
        for layer in trees[key]:
            assert np.array_equal(rev[key][layer], out[key][layer])


def test_aggregate_decoders_schema_mismatch():
    with pytest.raises(SchemaError):
        aggregate_decoders({1: {"w": np.zeros(2)}, 2: {"w": np.zeros(3)}})


# ------------------------------------------------------------ hyper weights

def test_personalized_update_arithmetic():
    out = apply_personalized_update({"w": np.array([1.0])}, {"w": np.array([0.5])}, 0.1, {"w": np.array([2.0])})
    assert out["w"][0] == pytest.approx(1.7, abs=1e-15)
    per_layer = apply_personalized_update(
        {"a": np.array([0.0]), "b": np.array([0.0])},
        {"a": np.array([0.0]), "b": np.array([0.0])},
        {"a": 1.0, "b": 0.0},
        {"a": np.array([3.0]), "b": np.array([3.0])},
    )
    assert per_layer["a"][0] == 3.0 and per_layer["b"][0] == 0.0


def test_hyper_delta_cases():
    assert hyper_weight_delta(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    assert hyper_weight_delta(np.array([1.0, 2.0]), np.array([3.0, 4.0])) == 11.0


def test_hyper_step_cosine_and_clamp():
    a = np.array([1.0, 0.0])
    assert hyper_weight_step(0.0, a, a, 0.1, (0.0, 1.0)) == pytest.approx(0.1, abs=1e-12)
    assert hyper_weight_step(0.0, a, -a, 0.1, (0.0, 1.0)) == 0.0
    assert hyper_weight_step(0.95, a, a, 0.1, (0.0, 1.0)) == 1.0
    assert hyper_weight_step(0.3, np.zeros(2), a, 0.1, (0.0, 1.0)) == 0.3


@pytest.mark.parametrize("seed", range(50))
def test_hyper_chain_rule_on_quadratic(seed):
    rng = np.random.default_rng(seed)
    d = 6
    a = rng.standard_normal((d, d))
    a = a @ a.T + np.eye(d)
    b = rng.standard_normal(d)
    prev, delta, tilde = (rng.standard_normal(d) for _ in range(3))
    psi = float(rng.uniform(0, 1))

    def theta(p):
        return apply_personalized_update({"w": prev}, {"w": delta}, float(p[0]), {"w": tilde})["w"]

    def loss(p):
        th = theta(p)
        return 0.5 * th @ a @ th + b @ th

    fd = central_difference(loss, np.array([psi]), 1e-4)[0]
    analytic = hyper_weight_delta(tilde, a @ theta([psi]) + b)
    assert abs(fd - analytic) <= 1e-6 * abs(analytic)


def test_hyper_weights_container():
    hw = HyperWeights.init({"a": ["seg"], "b": ["seg", "depth"]}, ["l0.weight", "l0.bias"], HyperConfig(init_beta=0.2))
    assert hw.alpha == {"a": 0.0, "b": 0.0}
    assert len(hw.beta) == 6
    assert hw.beta_for("b", "depth") == {"l0.weight": 0.2, "l0.bias": 0.2}
    hw.update_alpha("a", np.ones(2), np.ones(2))
    assert hw.alpha["a"] == pytest.approx(0.1, abs=1e-12)
    cp = hw.copy()
    cp.alpha["a"] = 0.9
    assert hw.alpha["a"] != 0.9


def test_hyper_config_validation():
    with pytest.raises(ValueError):
        HyperConfig(update_order="during")
    with pytest.raises(ValueError):
        HyperConfig(init_alpha=2.0)
    with pytest.raises(ValueError):
        HyperConfig(lr=-1.0)
