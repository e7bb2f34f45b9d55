import numpy as np
import pytest

from fairfed.core import ModelParams, SimplexWeights
from fairfed.simplexmath import (
    euclidean_step_projected,
    kl_divergence,
    mirror_step_entropy,
    mirror_step_entropy_masked,
    momentum_params,
    momentum_weights,
    project_simplex,
    solve_mirror_subproblem,
    tilt_weights_kl,
)

LN2 = np.log(2.0)


# ----------------------------------------------------------------------------
# Euclidean projection
# ----------------------------------------------------------------------------


def test_project_uniform_stays_uniform():
    w = project_simplex(np.array([1.0, 1.0, 1.0]))
    assert np.allclose(w.values, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_project_dominant_coordinate():
    w = project_simplex(np.array([2.0, 0.0, 0.0]))
    assert np.array_equal(w.values, [1.0, 0.0, 0.0])


def test_project_clips_negative_entry():
    w = project_simplex(np.array([1.2, -0.2]))
    assert np.allclose(w.values, [1.0, 0.0], atol=1e-15)


def test_project_simplex_point_is_fixed():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = rng.dirichlet(np.ones(5))
        w = project_simplex(p)
        assert np.allclose(w.values, p, atol=1e-12)


def _projection_kkt_gap(v: np.ndarray, w: np.ndarray) -> float:
    # w solves the projection iff w = max(v - tau, 0) for a single threshold
    active = w > 0.0
    taus = v[active] - w[active]
    gap = float(taus.max() - taus.min())
    if (~active).any():
        gap = max(gap, float(v[~active].max() - taus.max()))
    return gap


def test_project_satisfies_kkt_on_random_inputs():
    rng = np.random.default_rng(11)
    for _ in range(100):
        v = rng.normal(0.0, 3.0, rng.integers(2, 12))
        w = project_simplex(v).values
        assert w.min() >= 0.0
        assert abs(w.sum() - 1.0) <= 1e-12
        assert _projection_kkt_gap(v, w) <= 1e-10


def test_project_beats_dense_grid_in_two_dims():
    rng = np.random.default_rng(5)
    w1 = np.linspace(0.0, 1.0, 10001)
    grid = np.stack([w1, 1.0 - w1], axis=1)
    for _ in range(10):
        v = rng.normal(0.0, 2.0, 2)
        w = project_simplex(v).values
        best = np.min(np.sum((grid - v) ** 2, axis=1))
        assert np.sum((w - v) ** 2) <= best + 1e-12


# ----------------------------------------------------------------------------
# entropic mirror step
# ----------------------------------------------------------------------------


def test_mirror_step_two_point_example():
    lam = SimplexWeights(np.array([0.5, 0.5]))
    res = mirror_step_entropy(lam, np.array([LN2, 0.0]), 1.0)
    assert np.allclose(res.weights.values, [2 / 3, 1 / 3], atol=1e-15)
    assert res.max_shift == pytest.approx(1 / 6, abs=1e-15)


def test_mirror_step_zero_gradient_is_fixed_point():
    lam = SimplexWeights(np.array([0.2, 0.3, 0.5]))
    res = mirror_step_entropy(lam, np.zeros(3), 0.7)
    assert np.allclose(res.weights.values, lam.values, atol=1e-12)
    assert res.max_shift <= 1e-12


def test_mirror_step_keeps_zero_coordinates_zero():
    lam = SimplexWeights(np.array([0.5, 0.5, 0.0]))
    res = mirror_step_entropy(lam, np.array([0.0, 0.0, 100.0]), 1.0)
    assert res.weights.values[2] == 0.0


def test_mirror_step_matches_numeric_solver():
    lam = SimplexWeights(np.array([0.2, 0.3, 0.5]))
    g = np.array([1.0, -0.5, 0.1])
    closed = mirror_step_entropy(lam, g, 1.0).weights.values
    numeric = solve_mirror_subproblem(lam, g, 1.0).values
    assert np.max(np.abs(closed - numeric)) <= 1e-8


def test_mirror_step_rejects_bad_inputs():
    lam = SimplexWeights(np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        mirror_step_entropy(lam, np.array([1.0]), 1.0)
    with pytest.raises(ValueError):
        mirror_step_entropy(lam, np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        mirror_step_entropy(lam, np.zeros(2), -1.0)


def test_masked_mirror_full_mask_equals_plain():
    lam = SimplexWeights(np.array([0.1, 0.2, 0.3, 0.4]))
    g = np.array([0.5, -1.0, 2.0, 0.0])
    plain = mirror_step_entropy(lam, g, 0.3)
    masked = mirror_step_entropy_masked(lam, g, 0.3, np.ones(4, dtype=bool))
    assert np.array_equal(plain.weights.values, masked.weights.values)


def test_masked_mirror_partial_mask_preserves_unmasked_mass():
    lam = SimplexWeights(np.array([0.1, 0.2, 0.3, 0.4]))
    g = np.array([3.0, -1.0, 2.0, 5.0])
    mask = np.array([True, False, True, False])
    res = mirror_step_entropy_masked(lam, g, 1.0, mask)
    w = res.weights.values
    # untouched coordinates keep their exact previous weight
    assert w[1] == lam.values[1]
    assert w[3] == lam.values[3]
    # tilted coordinates redistribute only their own mass
    assert (w[0] + w[2]) == pytest.approx(0.4, abs=1e-15)
    assert w[0] < w[2]  # g favours slot 2 inside the mask


def test_masked_mirror_zero_mass_mask_is_noop():
    lam = SimplexWeights(np.array([0.5, 0.5, 0.0]))
    mask = np.array([False, False, True])
    res = mirror_step_entropy_masked(lam, np.array([0.0, 0.0, 9.0]), 1.0, mask)
    assert np.array_equal(res.weights.values, lam.values)
    assert res.max_shift == 0.0


# ----------------------------------------------------------------------------
# projected Euclidean step
# ----------------------------------------------------------------------------


def test_euclidean_step_hand_example():
    lam = SimplexWeights(np.array([0.5, 0.5]))
    w = euclidean_step_projected(lam, np.array([1.0, 0.0]), 1.0)
    assert np.allclose(w.values, [1.0, 0.0], atol=1e-15)


def test_euclidean_step_is_projection_of_shifted_point():
    rng = np.random.default_rng(8)
    for _ in range(20):
        lam = SimplexWeights(rng.dirichlet(np.ones(6)))
        g = rng.normal(0.0, 1.0, 6)
        step = float(rng.uniform(0.05, 2.0))
        direct = project_simplex(lam.values + step * g).values
        via_op = euclidean_step_projected(lam, g, step).values
        assert np.array_equal(direct, via_op)


def test_euclidean_step_moves_zero_gradient_entries():
    # the shared threshold shifts every coordinate, including unseen ones
    lam = SimplexWeights(np.array([0.25, 0.25, 0.25, 0.25]))
    g = np.array([4.0, 0.0, 0.0, 0.0])
    w = euclidean_step_projected(lam, g, 1.0).values
    assert w[1] < 0.25 and w[2] < 0.25 and w[3] < 0.25


# ----------------------------------------------------------------------------
# numeric subproblem oracle
# ----------------------------------------------------------------------------


def test_subproblem_zero_gradient_fixed_point():
    lam = SimplexWeights(np.array([0.25, 0.75]))
    w = solve_mirror_subproblem(lam, np.zeros(2), 1.0).values
    assert np.max(np.abs(w - lam.values)) <= 1e-8


def test_subproblem_two_point_example_with_grid_crosscheck():
    lam = SimplexWeights(np.array([0.5, 0.5]))
    g = np.array([LN2, 0.0])
    w = solve_mirror_subproblem(lam, g, 1.0).values
    assert np.max(np.abs(w - np.array([2 / 3, 1 / 3]))) <= 1e-8

    # brute-force scan of the one-dimensional objective
    x1 = np.linspace(1e-6, 1.0 - 1e-6, 100001)
    pts = np.stack([x1, 1.0 - x1], axis=1)
    obj = pts @ g - np.sum(pts * np.log(pts / lam.values), axis=1)
    assert w @ g - np.sum(w * np.log(w / lam.values)) >= obj.max() - 1e-9


def test_subproblem_matches_closed_form_on_random_instances():
    rng = np.random.default_rng(17)
    for _ in range(10):
        m = int(rng.integers(2, 7))
        lam = SimplexWeights(rng.dirichlet(np.ones(m) * 2.0))
        g = rng.normal(0.0, 1.5, m)
        step = float(rng.uniform(0.1, 2.0))
        closed = mirror_step_entropy(lam, g, step).weights.values
        numeric = solve_mirror_subproblem(lam, g, step).values
        assert np.max(np.abs(closed - numeric)) <= 1e-7


def test_subproblem_single_support_entry():
    lam = SimplexWeights(np.array([0.0, 1.0]))
    w = solve_mirror_subproblem(lam, np.array([5.0, -5.0]), 1.0).values
    assert np.array_equal(w, [0.0, 1.0])


# ----------------------------------------------------------------------------
# divergences and momentum
# ----------------------------------------------------------------------------


def test_kl_identity_is_zero():
    p = SimplexWeights(np.array([0.3, 0.7]))
    assert kl_divergence(p, p) == 0.0


def test_kl_vertex_against_uniform():
    p = SimplexWeights(np.array([1.0, 0.0]))
    q = SimplexWeights(np.array([0.5, 0.5]))
    assert kl_divergence(p, q) == pytest.approx(LN2, abs=1e-15)


def test_kl_support_violation_raises():
    p = SimplexWeights(np.array([0.5, 0.5]))
    q = SimplexWeights(np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        kl_divergence(p, q)


def test_kl_equals_entropy_bregman_gap():
    # KL(p||q) = h(p) - h(q) - <grad h(q), p - q> for h(x) = sum x log x
    rng = np.random.default_rng(23)
    for _ in range(30):
        m = int(rng.integers(2, 9))
        p = SimplexWeights(rng.dirichlet(np.ones(m) * 3.0))
        q = SimplexWeights(rng.dirichlet(np.ones(m) * 3.0))
        h = lambda x: float(np.sum(x * np.log(x)))
        grad_h = np.log(q.values) + 1.0
        bregman = h(p.values) - h(q.values) - float(grad_h @ (p.values - q.values))
        assert kl_divergence(p, q) == pytest.approx(bregman, abs=1e-12)


def test_momentum_params_example():
    out = momentum_params(ModelParams(np.array([1.0, 2.0])), ModelParams(np.array([0.0, 0.0])), 0.5)
    assert np.array_equal(out.values, [1.5, 3.0])


def test_momentum_params_zero_beta_returns_new():
    new = ModelParams(np.array([1.0, -2.0, 3.0]))
    prev = ModelParams(np.array([9.0, 9.0, 9.0]))
    assert np.array_equal(momentum_params(new, prev, 0.0).values, new.values)


def test_momentum_weights_endpoints_and_mixture():
    prev = SimplexWeights(np.array([0.5, 0.5]))
    tilde = SimplexWeights(np.array([1.0, 0.0]))
    assert np.array_equal(momentum_weights(prev, tilde, 1.0).values, tilde.values)
    assert np.array_equal(momentum_weights(prev, tilde, 0.0).values, prev.values)
    mixed = momentum_weights(prev, tilde, 0.4)
    assert np.allclose(mixed.values, [0.7, 0.3], atol=1e-15)


def test_momentum_weights_rejects_beta_outside_unit_interval():
    p = SimplexWeights(np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        momentum_weights(p, p, 1.2)
    with pytest.raises(ValueError):
        momentum_weights(p, p, -0.1)


# ----------------------------------------------------------------------------
# KL-ball tilt
# ----------------------------------------------------------------------------


def test_tilt_zero_radius_returns_base():
    base = SimplexWeights(np.array([0.2, 0.3, 0.5]))
    w = tilt_weights_kl(base, np.array([5.0, 1.0, -2.0]), 0.0)
    assert np.array_equal(w.values, base.values)


def test_tilt_large_radius_hits_vertex():
    base = SimplexWeights(np.array([0.5, 0.5]))
    w = tilt_weights_kl(base, np.array([1.0, 0.0]), LN2)
    assert np.array_equal(w.values, [1.0, 0.0])
    w2 = tilt_weights_kl(base, np.array([1.0, 0.0]), 10.0)
    assert np.array_equal(w2.values, [1.0, 0.0])


def test_tilt_constraint_active_at_moderate_radius():
    base = SimplexWeights(np.full(3, 1 / 3))
    losses = np.array([0.9, 0.2, 0.4])
    w = tilt_weights_kl(base, losses, 0.1)
    assert np.allclose(w.values, [0.54607, 0.19359, 0.26035], atol=1e-4)
    assert kl_divergence(w, base) == pytest.approx(0.1, abs=1e-6)

    # no feasible grid point attains a better objective
    step = 0.002
    a = np.arange(0.0, 1.0 + step / 2, step)
    g1, g2 = np.meshgrid(a, a)
    g3 = 1.0 - g1 - g2
    ok = g3 >= 0.0
    pts = np.stack([g1[ok], g2[ok], g3[ok]], axis=1)
    safe = np.maximum(pts, 1e-300)
    kl = np.sum(np.where(pts > 0, pts * np.log(safe / (1 / 3)), 0.0), axis=1)
    feas = pts[kl <= 0.1]
    grid_best = float((feas @ losses).max())
    assert float(w.values @ losses) >= grid_best - 1e-9


def test_tilt_invariant_to_loss_shift():
    base = SimplexWeights(np.array([0.4, 0.35, 0.25]))
    losses = np.array([2.0, -1.0, 0.5])
    a = tilt_weights_kl(base, losses, 0.05).values
    b = tilt_weights_kl(base, losses + 100.0, 0.05).values
    assert np.allclose(a, b, atol=1e-9)


def test_tilt_keeps_zero_coordinates_zero():
    base = SimplexWeights(np.array([0.5, 0.5, 0.0]))
    w = tilt_weights_kl(base, np.array([0.0, 1.0, 50.0]), 0.2)
    assert w.values[2] == 0.0


def test_tilt_rejects_negative_radius():
    base = SimplexWeights(np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        tilt_weights_kl(base, np.array([1.0, 0.0]), -0.1)
