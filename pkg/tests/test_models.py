import numpy as np
import pytest

from fairfed.core import ModelParams, rng_stream
from fairfed.models import (
    Batch,
    ModelSpec,
    accuracy,
    grad_loss,
    logits,
    loss,
    per_sample_losses,
)

LINEAR = ModelSpec("linear", 3, 4)
MLP = ModelSpec("mlp", 3, 4, hidden_width=5)


def _random_batch(rng, n, d=3, c=4):
    return Batch(rng.normal(0.0, 1.0, (n, d)), rng.integers(0, c, n))


def _random_params(rng, spec):
    return ModelParams(rng.normal(0.0, 0.5, spec.param_count()))


def test_zero_params_give_log_class_count():
    rng = np.random.default_rng(0)
    for spec in (LINEAR, MLP):
        theta = ModelParams(np.zeros(spec.param_count()))
        batch = _random_batch(rng, 32)
        assert loss(theta, batch, spec) == pytest.approx(np.log(4), abs=1e-12)


def test_single_sample_binary_loss_value():
    # logits (1, 0), true label 0: loss = log(1 + exp(-1))
    spec = ModelSpec("linear", 1, 2)
    theta = ModelParams(np.array([0.0, 0.0, 1.0, 0.0]))  # W = 0, b = (1, 0)
    batch = Batch(np.array([[3.7]]), np.array([0]))
    assert loss(theta, batch, spec) == pytest.approx(np.log1p(np.exp(-1.0)), abs=1e-15)
    assert loss(theta, batch, spec) == pytest.approx(0.31326168751822286, abs=1e-12)


def test_linear_logits_layout():
    spec = ModelSpec("linear", 2, 2)
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([0.5, -0.5])
    theta = ModelParams(np.concatenate([w.ravel(), b]))
    x = np.array([[1.0, 1.0]])
    z = logits(theta, x, spec)
    assert np.allclose(z, [[3.5, 6.5]], atol=1e-15)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(42)
    h = 1e-5
    for spec in (LINEAR, MLP):
        for _ in range(10):
            theta = _random_params(rng, spec)
            batch = _random_batch(rng, 16)
            g = grad_loss(theta, batch, spec)
            idx = rng.choice(spec.param_count(), size=6, replace=False)
            for i in idx:
                e = np.zeros(spec.param_count())
                e[i] = h
                up = loss(ModelParams(theta.values + e), batch, spec)
                dn = loss(ModelParams(theta.values - e), batch, spec)
                fd = (up - dn) / (2 * h)
                denom = max(1.0, abs(fd))
                assert abs(g[i] - fd) / denom <= 1e-5


def test_quadratic_gradient_matches_finite_differences():
    spec = ModelSpec("quadratic", 1, 1)
    rng = np.random.default_rng(7)
    batch = Batch(rng.normal(0.0, 2.0, (20, 1)), np.zeros(20, dtype=np.int64))
    theta = ModelParams(np.array([0.8]))
    g = grad_loss(theta, batch, spec)
    h = 1e-6
    fd = (
        loss(ModelParams(np.array([0.8 + h])), batch, spec)
        - loss(ModelParams(np.array([0.8 - h])), batch, spec)
    ) / (2 * h)
    assert g[0] == pytest.approx(fd, abs=1e-6)
    # closed form: 2 * (theta - mean(x))
    assert g[0] == pytest.approx(2.0 * (0.8 - batch.features[:, 0].mean()), abs=1e-12)


def test_duplicated_batch_same_loss_and_gradient():
    rng = np.random.default_rng(3)
    for spec in (LINEAR, MLP):
        theta = _random_params(rng, spec)
        batch = _random_batch(rng, 8)
        doubled = Batch(
            np.concatenate([batch.features, batch.features]),
            np.concatenate([batch.labels, batch.labels]),
        )
        assert loss(theta, doubled, spec) == pytest.approx(loss(theta, batch, spec), abs=1e-12)
        assert np.allclose(grad_loss(theta, doubled, spec), grad_loss(theta, batch, spec), atol=1e-12)


def test_accuracy_tie_breaks_to_lowest_class():
    spec = ModelSpec("linear", 2, 3)
    theta = ModelParams(np.zeros(spec.param_count()))  # all logits equal
    batch = Batch(np.ones((5, 2)), np.zeros(5, dtype=np.int64))
    assert accuracy(theta, batch, spec) == 1.0
    batch_ones = Batch(np.ones((5, 2)), np.ones(5, dtype=np.int64))
    assert accuracy(theta, batch_ones, spec) == 0.0


def test_accuracy_hand_count():
    spec = ModelSpec("linear", 1, 2)
    # score class 1 above class 0 exactly when x > 0
    theta = ModelParams(np.array([0.0, 1.0, 0.0, 0.0]))
    batch = Batch(np.array([[2.0], [-1.0], [3.0], [-4.0]]), np.array([1, 0, 0, 0]))
    # predictions: 1, 0, 1, 0 -> rows 0, 1, 3 correct
    assert accuracy(theta, batch, spec) == 0.75


def test_accuracy_rejects_quadratic_kind():
    spec = ModelSpec("quadratic", 1, 1)
    with pytest.raises(ValueError):
        accuracy(ModelParams(np.zeros(1)), Batch(np.ones((2, 1)), np.zeros(2, dtype=np.int64)), spec)


def test_linear_loss_is_convex_along_segments():
    rng = np.random.default_rng(11)
    batch = _random_batch(rng, 24)
    for _ in range(100):
        a = _random_params(rng, LINEAR)
        b = _random_params(rng, LINEAR)
        t = float(rng.uniform(0.0, 1.0))
        mid = ModelParams(t * a.values + (1 - t) * b.values)
        bound = t * loss(a, batch, LINEAR) + (1 - t) * loss(b, batch, LINEAR)
        assert loss(mid, batch, LINEAR) <= bound + 1e-10


def test_loss_is_mean_over_partition():
    rng = np.random.default_rng(19)
    theta = _random_params(rng, LINEAR)
    batch = _random_batch(rng, 30)
    first = Batch(batch.features[:12], batch.labels[:12])
    second = Batch(batch.features[12:], batch.labels[12:])
    combined = (12 * loss(theta, first, LINEAR) + 18 * loss(theta, second, LINEAR)) / 30
    assert loss(theta, batch, LINEAR) == pytest.approx(combined, abs=1e-12)


def test_per_sample_losses_average_to_loss():
    rng = np.random.default_rng(4)
    theta = _random_params(rng, MLP)
    batch = _random_batch(rng, 17)
    per = per_sample_losses(theta, batch.features, batch.labels, MLP)
    assert per.shape == (17,)
    assert per.mean() == pytest.approx(loss(theta, batch, MLP), abs=1e-12)


def test_init_params_shapes_and_determinism():
    assert len(LINEAR.init_params(None)) == LINEAR.param_count()
    assert np.array_equal(LINEAR.init_params(None).values, np.zeros(16))
    a = MLP.init_params(rng_stream(5, 0, 0)).values
    b = MLP.init_params(rng_stream(5, 0, 0)).values
    assert np.array_equal(a, b)
    assert len(a) == MLP.param_count()
    with pytest.raises(ValueError):
        MLP.init_params(None)


def test_model_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec("tree", 2, 2)
    with pytest.raises(ValueError):
        ModelSpec("mlp", 2, 2, hidden_width=0)
    with pytest.raises(ValueError):
        ModelSpec("quadratic", 2, 1)


def test_shape_mismatches_raise():
    theta = ModelParams(np.zeros(LINEAR.param_count()))
    with pytest.raises(ValueError):
        loss(theta, Batch(np.ones((4, 2)), np.zeros(4, dtype=np.int64)), LINEAR)
    with pytest.raises(ValueError):
        loss(ModelParams(np.zeros(3)), Batch(np.ones((4, 3)), np.zeros(4, dtype=np.int64)), LINEAR)
    with pytest.raises(ValueError):
        loss(theta, Batch(np.ones((4, 3)), np.full(4, 9)), LINEAR)
