import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    fd_gradient,
    gradient_mismatch,
    loop_input_gradient,
    random_triple,
    smooth_at,
)
from pcattack.model import (
    DenseLayer,
    ModelConfigError,
    NumericFailure,
    PointClassifier,
    TrainConfig,
    WeightFormatError,
    _backward,
    _forward_cache,
    _log_softmax,
    accuracy,
    added_points_objective_and_gradient,
    dumps_weights,
    forward,
    forward_batch,
    init_model,
    input_gradient,
    load_weights,
    loads_weights,
    objective,
    objective_and_gradient_batch,
    pooled_features,
    predict,
    save_weights,
    train,
)


def identity_model(c=3):
    eye = DenseLayer(np.eye(3), np.zeros(3), "identity")
    head = DenseLayer(np.eye(c, 3), np.zeros(c), "identity")
    return PointClassifier([eye], [head], c)


def params(model):
    return [a.copy() for l in model.layers for a in (l.weights, l.biases)]


# --- forward -----------------------------------------------------------------------


def test_forward_shape_and_predict(small_model, rng):
    cloud = rng.normal(size=(20, 3))
    logits = forward(small_model, cloud)
    assert logits.shape == (4,)
    assert predict(small_model, cloud) == int(logits.argmax())


def test_permutation_invariance(small_model, rng):
    for _ in range(20):
        cloud = rng.normal(size=(30, 3))
        perm = rng.permutation(30)
        np.testing.assert_array_equal(forward(small_model, cloud[perm]), forward(small_model, cloud))


def test_duplication_invariance(small_model, rng):
    cloud = rng.normal(size=(25, 3))
    dup = np.vstack([cloud, cloud[[7]]])
    np.testing.assert_array_equal(forward(small_model, dup), forward(small_model, cloud))


def test_hand_computed_identity_network():
    cloud = np.array([[0.3, -1.0, 2.0], [0.1, 0.5, -4.0]])
    np.testing.assert_array_equal(forward(identity_model(), cloud), [0.3, 0.5, 2.0])


def test_dimension_mismatch():
    with pytest.raises(ModelConfigError):
        PointClassifier([DenseLayer(np.ones((4, 3)), np.zeros(4))],
                        [DenseLayer(np.ones((2, 5)), np.zeros(2), "identity")], 2)
    with pytest.raises(ModelConfigError):
        forward(init_model(2, (4,), (4,)), np.ones((5, 2)))


# --- objective ---------------------------------------------------------------------


def test_uniform_logits_give_log_c():
    model = init_model(5, (4,), (4,), seed=0)
    for layer in model.head[-1:]:
        layer.weights[:] = 0.0
    assert objective(model, np.ones((3, 3)), 2) == pytest.approx(math.log(5), abs=1e-15)


def test_confident_logits_near_zero():
    model = identity_model()
    cloud = np.array([[0.0, 0.0, 50.0]])
    assert objective(model, cloud, 2) < 1e-20


def test_objective_recomputed_from_logits(small_model, rng):
    for _ in range(20):
        cloud = rng.normal(size=(10, 3))
        z = forward(small_model, cloud)
        label = int(rng.integers(4))
        expected = -(z[label] - z.max() - math.log(sum(math.exp(v - z.max()) for v in z)))
        assert objective(small_model, cloud, label) == pytest.approx(expected, rel=1e-12)


def test_objective_bad_label(small_model):
    with pytest.raises(ValueError):
        objective(small_model, np.ones((2, 3)), 9)


# --- gradient ----------------------------------------------------------------------


def test_gradient_matches_finite_differences(rng):
    accepted = rejected = 0
    while accepted < 50:
        model, cloud, label = random_triple(rng)
        if not smooth_at(model, cloud):
            rejected += 1
            continue
        bad = gradient_mismatch(input_gradient(model, cloud, label), fd_gradient(model, cloud, label))
        assert not bad, bad[:5]
        accepted += 1
    assert rejected < accepted


def test_gradient_matches_loop_oracle(rng):
    for _ in range(100):
        model, cloud, label = random_triple(rng)
        np.testing.assert_allclose(input_gradient(model, cloud, label),
                                   loop_input_gradient(model, cloud, label), rtol=1e-12, atol=1e-15)


def test_dead_point_has_zero_gradient():
    # point 1 is dominated in every coordinate, so it wins no max-pool feature
    cloud = np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])
    g = input_gradient(identity_model(), cloud, 0)
    np.testing.assert_array_equal(g[1], 0.0)
    assert np.any(g[0] != 0)


def test_tie_credit_goes_to_lower_index(small_model, rng):
    cloud = rng.normal(size=(12, 3))
    g = input_gradient(small_model, cloud, 1)
    dup = np.vstack([cloud, cloud[[g.sum(axis=1).nonzero()[0][0]]]])
    gd = input_gradient(small_model, dup, 1)
    np.testing.assert_array_equal(gd[-1], 0.0)
    np.testing.assert_array_equal(gd[:-1], g)


def test_gradient_ascent_increases_objective(rng):
    for _ in range(30):
        model, cloud, label = random_triple(rng)
        g = input_gradient(model, cloud, label)
        i = int(np.argmax(np.linalg.norm(g, axis=1)))
        if np.linalg.norm(g[i]) < 1e-9:
            continue
        moved = cloud.copy()
        moved[i] += 1e-5 * g[i] / np.linalg.norm(g[i])
        assert objective(model, moved, label) > objective(model, cloud, label)


def test_batch_gradient_matches_single(small_model, rng):
    clouds = rng.normal(size=(5, 9, 3))
    labels = rng.integers(4, size=5)
    losses, logits, grads = objective_and_gradient_batch(small_model, clouds, labels)
    for b in range(5):
        assert losses[b] == pytest.approx(objective(small_model, clouds[b], labels[b]), rel=1e-13)
        np.testing.assert_allclose(grads[b], input_gradient(small_model, clouds[b], labels[b]),
                                   rtol=1e-12, atol=1e-15)


def test_added_points_evaluator_matches_full(small_model, rng):
    base = rng.normal(size=(4, 15, 3))
    added = rng.normal(size=(4, 3, 3)) * 1.5
    labels = rng.integers(4, size=4)
    losses, logits, g = added_points_objective_and_gradient(
        small_model, pooled_features(small_model, base), added, labels)
    full_l, full_z, full_g = objective_and_gradient_batch(
        small_model, np.concatenate([base, added], axis=1), labels)
    np.testing.assert_allclose(losses, full_l, rtol=1e-12)
    np.testing.assert_allclose(logits, full_z, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(g, full_g[:, 15:], rtol=1e-12, atol=1e-15)


def test_parameter_gradients_finite_differences(rng):
    model = init_model(3, (5, 6), (4,), seed=11)
    clouds = rng.normal(size=(2, 6, 3))
    labels = np.array([0, 2])

    def loss(m):
        return -_log_softmax(_forward_cache(m, clouds)[2][-1])[np.arange(2), labels].sum()

    cache = _forward_cache(model, clouds)
    logp = _log_softmax(cache[2][-1])
    d = np.exp(logp)
    d[np.arange(2), labels] -= 1.0
    _, grads = _backward(model, cache, d, want_params=True)
    h = 1e-6
    for layer, (gw, gb) in zip(model.layers, grads):
        for arr, g in ((layer.weights, gw), (layer.biases, gb)):
            flat = arr.reshape(-1)
            for idx in rng.choice(flat.size, size=min(4, flat.size), replace=False):
                old = flat[idx]
                flat[idx] = old + h
                up = loss(model)
                flat[idx] = old - h
                down = loss(model)
                flat[idx] = old
                assert g.reshape(-1)[idx] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-7)


# --- training ----------------------------------------------------------------------


def separable_set(rng, count=60):
    # class 0 clouds sit around z = -1, class 1 around z = +1
    labels = np.arange(count) % 2
    clouds = rng.normal(scale=0.2, size=(count, 10, 3))
    clouds[..., 2] += np.where(labels == 1, 1.0, -1.0)[:, None]
    return clouds, labels


def test_train_separable(rng):
    clouds, labels = separable_set(rng)
    model = train(init_model(2, (8, 16), (8,), seed=0), clouds, labels,
                  TrainConfig(epochs=20, batch_size=10, augment=False))
    assert accuracy(model, clouds, labels) >= 0.99


def test_train_zero_epochs_unchanged(rng):
    clouds, labels = separable_set(rng, 10)
    model = init_model(2, (4,), (4,), seed=0)
    out = train(model, clouds, labels, TrainConfig(epochs=0))
    for a, b in zip(params(out), params(model)):
        np.testing.assert_array_equal(a, b)


def test_train_deterministic(rng):
    clouds, labels = separable_set(rng, 20)
    cfg = TrainConfig(epochs=3, batch_size=8, seed=5)
    a = train(init_model(2, (4, 8), (4,), seed=1), clouds, labels, cfg)
    b = train(init_model(2, (4, 8), (4,), seed=1), clouds, labels, cfg)
    assert dumps_weights(a) == dumps_weights(b)


def test_train_does_not_modify_input(rng):
    clouds, labels = separable_set(rng, 10)
    model = init_model(2, (4,), (4,), seed=0)
    before = dumps_weights(model)
    train(model, clouds, labels, TrainConfig(epochs=1))
    assert dumps_weights(model) == before


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_errors(rng):
    model = init_model(2, (4,), (4,), seed=0)
    with pytest.raises(ValueError):
        train(model, np.zeros((0, 5, 3)), np.zeros(0, int))
    clouds, labels = separable_set(rng, 10)
    with pytest.raises(NumericFailure):
        train(model, clouds, labels, TrainConfig(epochs=2, lr=1e200, augment=False))


# --- weights -----------------------------------------------------------------------


def test_weights_round_trip(tmp_path, small_model, rng):
    path = tmp_path / "m.pcnw"
    save_weights(small_model, path)
    loaded = load_weights(path)
    cloud = rng.normal(size=(17, 3))
    np.testing.assert_array_equal(forward(loaded, cloud), forward(small_model, cloud))
    assert [l.activation for l in loaded.layers] == [l.activation for l in small_model.layers]
    assert not (tmp_path / "m.pcnw.tmp").exists()


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 400))
def test_truncated_weights_rejected(cut):
    blob = dumps_weights(init_model(3, (4,), (4,), seed=0))
    with pytest.raises(WeightFormatError):
        loads_weights(blob[: max(0, len(blob) - cut)])


def test_weight_format_errors(small_model):
    blob = bytearray(dumps_weights(small_model))
    with pytest.raises(WeightFormatError, match="version"):
        loads_weights(bytes(blob[:4]) + (2).to_bytes(4, "little") + bytes(blob[8:]))
    with pytest.raises(WeightFormatError, match="magic"):
        loads_weights(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(WeightFormatError, match="trailing"):
        loads_weights(bytes(blob) + b"\0")


def test_logits_independent_of_batch_composition(rng):
    model = init_model(8, seed=0)
    clouds = rng.normal(size=(40, 100, 3))
    full = forward_batch(model, clouds)
    single = np.stack([forward(model, c) for c in clouds])
    split = np.concatenate([forward_batch(model, clouds[:7]), forward_batch(model, clouds[7:])])
    np.testing.assert_array_equal(single, full)
    np.testing.assert_array_equal(split, full)
