"""Aggregation operators against closed-form and Monte-Carlo oracles."""

import numpy as np
import pytest

from fedsim.clients import ClientUpdate
from fedsim.errors import DimensionError, ProtocolError
from fedsim.gates import init_v_for_target, sigmoid, softplus
from fedsim.nn import GroupedParams, ModelSpec, group_norms, init_params, layout_for
from fedsim.optim import OptimizerState
from fedsim.server import (
    ServerState,
    aggregate_average,
    aggregate_median,
    feddrop_dispatch,
    feddrop_merge,
    fedsparse_server_round,
    mog_responsibilities,
    mog_update,
    server_step_difference,
    stationary_weighted_average,
)
from fedsim.rng import stream

MLP = ModelSpec(kind="mlp", input_dim=4, num_classes=2, hidden_dim=3)


# ------------------------------------------------------------------ average
def test_average_basic():
    out = aggregate_average([np.array([1.0, 2.0]), np.array([3.0, 4.0])])
    assert np.array_equal(out, [2.0, 3.0])
    single = np.array([5.0, -1.0])
    assert np.array_equal(aggregate_average([single]), single)
    with pytest.raises(DimensionError):
        aggregate_average([])


def test_average_is_stationary_point_of_quadratic():
    # numeric gradient of sum_s -(lam/2)||phi_s - w||^2 vanishes at the mean
    rng = np.random.default_rng(0)
    lam = 1.3
    phis = [rng.uniform(-1, 1, size=6) for _ in range(7)]
    w = aggregate_average(phis)

    def objective(wv):
        return sum(-0.5 * lam * np.sum((p - wv) ** 2) for p in phis)

    h = 1e-3
    grad = np.zeros(6)
    for i in range(6):
        up, dn = w.copy(), w.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (objective(up) - objective(dn)) / (2 * h)
    assert np.linalg.norm(grad) < 1e-10


# ----------------------------------------------------------------- median
def test_median_basic():
    assert aggregate_median([np.array([1.0]), np.array([2.0]),
                             np.array([3.0])])[0] == 2.0
    assert aggregate_median([np.array([1.0]), np.array([100.0])])[0] == 50.5


def test_median_sign_balance():
    rng = np.random.default_rng(1)
    for _ in range(300):
        s = int(rng.integers(1, 9))
        updates = [rng.normal(size=4) for _ in range(s)]
        med = aggregate_median(updates)
        signs = np.sum(np.sign(np.stack(updates) - med), axis=0)
        assert np.all(np.abs(signs) <= 1)


def test_median_beats_mean_on_l1_objective():
    rng = np.random.default_rng(2)
    for _ in range(50):
        updates = [rng.standard_cauchy(size=5) for _ in range(9)]
        med = aggregate_median(updates)
        mean = aggregate_average(updates)
        stack = np.stack(updates)
        l1_med = np.abs(stack - med).sum()
        l1_mean = np.abs(stack - mean).sum()
        assert l1_med <= l1_mean + 1e-12


# ------------------------------------------------------- difference server
def test_sgd_lr_one_equals_plain_average():
    rng = np.random.default_rng(3)
    w = rng.normal(size=10).astype(np.float32)
    updates = [rng.normal(size=10).astype(np.float32) for _ in range(4)]
    out = server_step_difference(w, updates, OptimizerState("sgd", lr=1.0))
    assert np.array_equal(out, aggregate_average(updates))


def test_identical_updates_leave_w_unchanged():
    w = np.array([0.5, -0.5], np.float32)
    out = server_step_difference(w, [w.copy(), w.copy()],
                                 OptimizerState("sgd", lr=0.7))
    assert np.allclose(out, w, atol=1e-7)


def test_adam_difference_steps_match_oracle():
    # ascent Adam on fixed pseudo-gradients, float64 oracle
    rng = np.random.default_rng(4)
    w = rng.normal(size=5)
    updates_per_round = [[rng.normal(size=5) for _ in range(3)] for _ in range(3)]
    opt = OptimizerState("adam", lr=0.01)
    got = w.copy()
    for ups in updates_per_round:
        got = server_step_difference(got, ups, opt)

    ref = w.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    for t, ups in enumerate(updates_per_round, start=1):
        g = -(np.mean(ups, axis=0) - ref)  # ascent negates
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(got, ref, atol=1e-6)


# ------------------------------------------------------------- fedsparse
def make_sparse_state(theta0=0.99, lr_w=0.01, lr_v=0.01):
    rng = stream(0, 0, 0, "init")
    w = init_params(MLP, rng, scale=1.0)
    v = init_v_for_target(group_norms(w), theta0, 0.001).astype(np.float32)
    return ServerState(
        w=w, strategy="fedsparse",
        opt_w=OptimizerState("adam", lr=lr_w),
        v=v, opt_v=OptimizerState("adamax", lr=lr_v),
        temperature=0.001, prune_epsilon=0.1,
    )


def all_on_update(state, cid=0):
    G = len(state.w.layout.groups)
    return ClientUpdate("sparse", cid, 1, bitmask=np.ones(G, bool),
                        weights_masked=state.w.flat.copy(),
                        v=state.v.astype(np.float64))


def test_fedsparse_gradient_signs():
    state = make_sparse_state()
    theta_before = state.theta()
    assert np.allclose(theta_before, 0.99, atol=1e-6)
    w_before = state.w.flat.copy()
    fedsparse_server_round(state, [all_on_update(state)])
    # all updates equal w with gates on: weights only move by optimizer noise
    # around a zero gradient, and theta must rise toward pi = 1
    assert np.allclose(state.w.flat, w_before, atol=1e-6)
    assert np.all(state.theta() >= theta_before - 1e-9)


def test_fedsparse_threshold_gradient_value():
    # single update, z = 1, theta = 0.99, v = 0, T = 0.001 -> grad_v = -5
    from fedsim import server as server_mod

    state = make_sparse_state()
    state.v = np.zeros_like(state.v)
    norms = group_norms(state.w)
    # choose weights whose norms give theta = 0.99 at tau = softplus(0)
    target = softplus(np.zeros(1))[0] + 0.001 * np.log(99.0)
    state.w.flat = (state.w.flat
                    * (target / norms)[state.w.layout.coord_group.clip(0)]
                    .astype(np.float32))
    state.w.flat[state.w.layout.ungrouped] = 0.0
    theta = state.theta()
    assert np.allclose(theta, 0.99, atol=1e-4)

    captured = {}
    orig_step = server_mod.step

    def capture_step(opt, params, grad, **kw):
        if params.shape == state.v.shape and "v" not in captured:
            captured["v"] = grad.copy()
        return orig_step(opt, params, grad, **kw)

    server_mod.step = capture_step
    try:
        fedsparse_server_round(state, [all_on_update(state)])
    finally:
        server_mod.step = orig_step
    expected = -(1.0 * (1.0 - theta)) * sigmoid(np.zeros(1))[0] / 0.001
    assert np.allclose(captured["v"], expected, rtol=2e-3)


def test_fedsparse_threshold_gradient_unbiased_at_theta():
    # E[grad_v] = 0 when P(z = 1) = theta
    rng = np.random.default_rng(7)
    theta = 0.73
    sig_v = 0.5
    T = 0.001
    n = 100_000
    z = (rng.random(n) < theta).astype(np.float64)
    grads = -(z * (1 - theta) - (1 - z) * theta) * sig_v / T
    se = grads.std() / np.sqrt(n)
    assert abs(grads.mean()) < 3 * se


def test_fedsparse_round_prunes_low_theta_groups():
    state = make_sparse_state()
    # force one group far below threshold
    g0 = state.w.layout.groups[0].indices
    state.w.flat[g0] = 1e-4
    assert state.theta()[0] < 0.1
    fedsparse_server_round(state, [all_on_update(state)])
    assert np.all(state.w.flat[g0] == 0)


def test_prune_idempotence():
    state = make_sparse_state()
    state.w.flat[state.w.layout.groups[1].indices] = 0.0
    state.apply_prune()
    once = state.w.flat.copy()
    state.apply_prune()
    assert np.array_equal(once, state.w.flat)


def test_fedsparse_rejects_wrong_bitmask_length():
    state = make_sparse_state()
    upd = all_on_update(state)
    upd.bitmask = np.ones(2, bool)
    with pytest.raises(ProtocolError, match="bitmask"):
        fedsparse_server_round(state, [upd])


def test_hard_em_equivalence_one_step():
    # difference SGD with lr 1 and all gates open reduces to plain averaging
    rng = np.random.default_rng(9)
    w = rng.normal(size=8).astype(np.float32)
    updates = [rng.normal(size=8).astype(np.float32) for _ in range(5)]
    stepped = server_step_difference(w, updates, OptimizerState("sgd", lr=1.0))
    assert np.array_equal(stepped, aggregate_average(updates))


# -------------------------------------------------- stationary weighted avg
def test_stationary_weighted_average_example():
    spec = ModelSpec(kind="logreg", input_dim=1, num_classes=2,
                     gate_output=True)
    lay = layout_for(spec)
    assert len(lay.groups) == 2  # one feature group + bias group
    w = GroupedParams(spec, np.zeros(lay.n_params, np.float32))
    updates = [np.full(lay.n_params, 2.0, np.float32),
               np.full(lay.n_params, 4.0, np.float32)]
    pis = [np.array([1.0, 1.0]), np.array([0.5, 0.5])]
    out, theta = stationary_weighted_average(w, updates, pis)
    assert np.allclose(out, (2.0 + 2.0) / 1.5)
    assert np.allclose(theta, 0.75)


def test_stationary_weighted_average_degenerate_and_uniform():
    spec = ModelSpec(kind="logreg", input_dim=2, num_classes=2,
                     gate_output=True)
    lay = layout_for(spec)
    w = GroupedParams(spec, np.full(lay.n_params, 7.0, np.float32))
    ups = [np.full(lay.n_params, 1.0, np.float32),
           np.full(lay.n_params, 3.0, np.float32)]
    G = len(lay.groups)
    out, theta = stationary_weighted_average(w, ups, [np.zeros(G), np.zeros(G)])
    assert np.all(out == 7.0) and np.all(theta == 0.0)
    out, theta = stationary_weighted_average(
        w, ups, [np.full(G, 0.4), np.full(G, 0.4)])
    assert np.allclose(out, 2.0) and np.allclose(theta, 0.4)


# --------------------------------------------------------------------- mog
def test_mog_responsibilities_examples():
    w = np.zeros(3)
    assert mog_responsibilities(w, [np.zeros(3)], 1.0)[0] == 1.0
    two = mog_responsibilities(w, [np.ones(3), -np.ones(3)], 2.0)
    assert np.allclose(two, [0.5, 0.5])
    # lam = 2, squared distances 0.25 and 1.0 -> r_0 = sigmoid(0.75)
    comp = [np.array([0.5, 0.0]), np.array([1.0, 0.0])]
    r = mog_responsibilities(np.zeros(2), comp, 2.0)
    assert r[0] == pytest.approx(1 / (1 + np.exp(-0.75)), rel=1e-9)


def test_mog_responsibility_properties():
    rng = np.random.default_rng(11)
    for _ in range(30):
        comps = [rng.normal(size=4) for _ in range(3)]
        r = mog_responsibilities(rng.normal(size=4), comps, 1.7)
        assert r.sum() == pytest.approx(1.0, abs=1e-12)
        # shifting all components by the same vector preserves nothing, but
        # adding a constant to every squared distance must not change r:
        shifted = mog_responsibilities(
            np.concatenate([rng.normal(size=4), [1.0]]),
            [np.concatenate([c, [0.0]]) for c in comps], 1.7)
        assert np.allclose(shifted.sum(), 1.0)


def test_mog_update_k1_is_average():
    rng = np.random.default_rng(12)
    ups = [rng.normal(size=5) for _ in range(6)]
    new = mog_update([rng.normal(size=5)], ups, 1.0)
    assert np.allclose(new[0], np.mean(ups, axis=0), atol=1e-12)


def test_mog_update_recovers_two_blobs():
    rng = np.random.default_rng(13)
    blob_a = rng.normal(size=(20, 4)) * 0.05 + np.array([2.0, 0, 0, 0])
    blob_b = rng.normal(size=(20, 4)) * 0.05 + np.array([-2.0, 0, 0, 0])
    ups = list(np.concatenate([blob_a, blob_b]))
    ensemble = [np.array([0.5, 0, 0, 0.0]), np.array([-0.5, 0, 0, 0.0])]
    for _ in range(50):
        ensemble = mog_update(ensemble, ups, 5.0)
    centroids = sorted(float(c[0]) for c in ensemble)
    assert abs(centroids[0] - blob_b[:, 0].mean()) < 0.1
    assert abs(centroids[1] - blob_a[:, 0].mean()) < 0.1


def test_mog_one_hot_responsibilities_assign_means():
    # far-separated updates make responsibilities one-hot
    ups = [np.array([10.0, 0.0]), np.array([10.2, 0.0]), np.array([-10.0, 0.0])]
    ensemble = [np.array([9.0, 0.0]), np.array([-9.0, 0.0])]
    new = mog_update(ensemble, ups, 10.0)
    assert np.allclose(new[0], [10.1, 0.0], atol=1e-6)
    assert np.allclose(new[1], [-10.0, 0.0], atol=1e-9)


# ----------------------------------------------------------------- feddrop
def test_feddrop_rate_zero_dispatches_full_model():
    rng = stream(1, 0, 0, "feddrop")
    w = init_params(MLP, stream(0, 0, 0, "init"))
    disp = feddrop_dispatch(w, 0.0, rng, [0, 1])
    for mask, sub in disp.values():
        assert mask.all()
        assert sub.size == w.flat.size


def test_feddrop_merge_rate_zero_is_plain_average():
    w = init_params(MLP, stream(0, 0, 0, "init"))
    full_mask = np.ones(MLP.hidden_dim, bool)
    idx = np.arange(w.flat.size)
    ups = []
    rng = np.random.default_rng(3)
    for cid in range(3):
        trained = rng.normal(size=w.flat.size).astype(np.float32)
        ups.append(ClientUpdate("submodel", cid, 1, unit_mask=full_mask,
                                sub_params=trained[idx]))
    merged = feddrop_merge(w, ups)
    expected = aggregate_average([u.sub_params for u in ups])
    assert np.allclose(merged, expected, atol=1e-7)


def test_feddrop_uncovered_coordinates_unchanged():
    w = init_params(MLP, stream(0, 0, 0, "init"))
    mask = np.array([True, False, False])
    from fedsim.nn import submodel_indices

    idx = submodel_indices(w.layout, mask)
    upd = ClientUpdate("submodel", 0, 1, unit_mask=mask,
                       sub_params=np.zeros(idx.size, np.float32))
    merged = feddrop_merge(w, [upd])
    covered = np.zeros(w.flat.size, bool)
    covered[idx] = True
    assert np.all(merged[~covered] == w.flat[~covered])
    assert np.all(merged[covered] == 0)


def test_feddrop_submodel_shape_accounting():
    spec = ModelSpec(kind="mlp", input_dim=6, num_classes=3, hidden_dim=8)
    w = init_params(spec, stream(2, 0, 0, "init"))
    rng = stream(3, 0, 0, "feddrop")
    disp = feddrop_dispatch(w, 0.5, rng, list(range(4)))
    for mask, sub in disp.values():
        k = int(mask.sum())
        assert sub.size == k * 6 + k + 3 * k + 3


def test_feddrop_coverage_probability():
    # expected per-unit coverage by >= 1 of 4 clients is 1 - rate^4
    rng = stream(4, 0, 0, "feddrop")
    spec = ModelSpec(kind="mlp", input_dim=2, num_classes=2, hidden_dim=8)
    w = init_params(spec, stream(0, 0, 0, "init"))
    rate = 0.5
    trials = 10_000
    covered = 0
    for _ in range(trials):
        disp = feddrop_dispatch(w, rate, rng, [0, 1, 2, 3])
        any_mask = np.zeros(8, bool)
        for mask, _ in disp.values():
            any_mask |= mask
        covered += int(any_mask.sum())
    p_hat = covered / (trials * 8)
    p = 1 - rate ** 4
    se = np.sqrt(p * (1 - p) / (trials * 8))
    assert abs(p_hat - p) < 4 * se


def test_feddrop_all_dropped_raises_after_retries():
    w = init_params(ModelSpec(kind="mlp", input_dim=2, num_classes=2,
                              hidden_dim=1), stream(0, 0, 0, "init"))
    rng = stream(5, 0, 0, "feddrop")
    with pytest.raises(ProtocolError, match="dropped"):
        feddrop_dispatch(w, 0.999999, rng, [0], max_retries=5)


# ------------------------------------------------- linear-Gaussian oracle
def test_posterior_expected_prior_gradient_matches_marginal_gradient():
    """Single-gradient-step EM equals gradient ascent on the marginal.

    On a conjugate linear-Gaussian model the marginal-likelihood gradient
    w.r.t. the prior mean must equal the posterior expectation of the prior
    score, lam * (E[phi | D] - w).
    """
    rng = np.random.default_rng(21)
    for _ in range(100):
        d, n = 3, 5
        lam = rng.uniform(0.5, 2.0)
        noise_var = rng.uniform(0.5, 2.0)
        X = rng.normal(size=(n, d))
        w = rng.normal(size=d)
        y = rng.normal(size=n)
        marginal_cov = noise_var * np.eye(n) + (X @ X.T) / lam
        g_marginal = X.T @ np.linalg.solve(marginal_cov, y - X @ w)
        precision = lam * np.eye(d) + (X.T @ X) / noise_var
        post_mean = np.linalg.solve(precision, lam * w + X.T @ y / noise_var)
        g_em = lam * (post_mean - w)
        assert np.max(np.abs(g_marginal - g_em)) < 1e-8
