import numpy as np
import pytest

from oracles import loop_input_gradient, loop_sor_keep, ranking
from pcattack.attack import AttackResult
from pcattack.defense import (
    DefenseConfig,
    DegenerateStatisticsError,
    defended_predictions,
    evaluate_under_defense,
    saliency,
    sor_filter,
    sor_mask,
    spr_filter,
    spr_mask,
)
from pcattack.geometry import DeltaSet
from pcattack.model import DenseLayer, PointClassifier, init_model, predict

SOR = DefenseConfig("SOR")


def fake_result(adversarial, label, n):
    return AttackResult(adversarial=adversarial, delta=DeltaSet(adversarial[len(adversarial) - n:]),
                        label=label, success=False, predicted=label,
                        objective_trace=np.zeros(0), final_hausdorff=0.0, steps_used=0)


def test_config_validation():
    with pytest.raises(ValueError):
        DefenseConfig("DUP")
    with pytest.raises(ValueError):
        DefenseConfig("SOR", sor_k=0)
    with pytest.raises(ValueError):
        DefenseConfig("SPR", spr_count=-1)
    assert DefenseConfig("SPR").removal_count(1024) == 200
    assert DefenseConfig("SPR").removal_count(256) == 50


# --- SOR ---------------------------------------------------------------------------


def test_sor_extreme_outlier(rng):
    cluster = rng.normal(scale=0.01, size=(32, 3))
    cloud = np.vstack([cluster[:10], [[100.0, 0, 0]], cluster[10:]])
    out = sor_filter(cloud, SOR)
    np.testing.assert_array_equal(out, np.delete(cloud, 10, axis=0))


def test_sor_uniform_grid():
    g = np.linspace(0, 1, 6)
    grid = np.array([[x, y, z] for x in g for y in g for z in g])
    keep = sor_mask(grid, SOR)
    assert keep.tolist() == loop_sor_keep(grid, 10, 1.0)
    # only low-density boundary points (corners, edges) can be flagged
    interior = np.all((grid > 0) & (grid < 1), axis=1)
    assert keep[interior].all()


def test_sor_oracle(rng):
    for _ in range(1000):
        n = int(rng.integers(12, 65))
        cloud = rng.normal(size=(n, 3))
        if rng.random() < 0.5:
            cloud[rng.integers(n)] += rng.normal(scale=5, size=3)
        k = int(rng.integers(1, 11))
        mult = float(rng.choice([0.5, 1.0, 2.0]))
        keep = sor_mask(cloud, DefenseConfig("SOR", sor_k=k, sor_std_mult=mult))
        assert keep.tolist() == loop_sor_keep(cloud, k, mult)


def test_sor_subset_order_preserving(rng):
    cloud = rng.normal(size=(50, 3))
    out = sor_filter(cloud, SOR)
    idx = [int(np.flatnonzero((cloud == p).all(axis=1))[0]) for p in out]
    assert idx == sorted(idx)


def test_sor_errors():
    with pytest.raises(ValueError):
        sor_filter(np.random.default_rng(0).normal(size=(10, 3)), SOR)
    with pytest.raises(DegenerateStatisticsError):
        sor_filter(np.random.default_rng(0).normal(size=(20, 3)), DefenseConfig("SOR", sor_std_mult=-5))


# --- SPR ---------------------------------------------------------------------------


def test_spr_zero_is_identity(small_model, rng):
    cloud = rng.normal(size=(30, 3))
    np.testing.assert_array_equal(spr_filter(small_model, cloud, DefenseConfig("SPR", spr_count=0)), cloud)


def test_spr_removes_dominant_point(rng):
    cloud = rng.uniform(-0.5, 0.5, size=(16, 3))
    cloud[9] = [1.0, 1.0, 1.0]
    eye = DenseLayer(np.eye(3), np.zeros(3), "identity")
    head = DenseLayer(np.array([[1.0, 2.0, 3.0], [-1.0, 0, 0]]), np.zeros(2), "identity")
    model = PointClassifier([eye], [head], 2)
    out = spr_filter(model, cloud, DefenseConfig("SPR", spr_count=1))
    np.testing.assert_array_equal(out, np.delete(cloud, 9, axis=0))


def test_spr_sort_oracle(rng):
    for trial in range(200):
        model = init_model(3, (8, 16), (8,), seed=trial)
        cloud = rng.normal(size=(int(rng.integers(8, 65)), 3))
        count = int(rng.integers(0, len(cloud)))
        norms = np.linalg.norm(loop_input_gradient(model, cloud, predict(model, cloud)), axis=1)
        removed = set(ranking(norms.tolist())[:count])
        keep = spr_mask(model, cloud, DefenseConfig("SPR", spr_count=count))
        assert set(np.flatnonzero(~keep).tolist()) == removed
        out = spr_filter(model, cloud, DefenseConfig("SPR", spr_count=count))
        np.testing.assert_array_equal(out, cloud[sorted(set(range(len(cloud))) - removed)])


def test_saliency_uses_prediction(small_model, rng):
    cloud = rng.normal(size=(20, 3))
    expected = np.linalg.norm(loop_input_gradient(small_model, cloud, predict(small_model, cloud)), axis=1)
    np.testing.assert_allclose(saliency(small_model, cloud), expected, rtol=1e-12, atol=1e-15)


def test_spr_invalid_count(small_model):
    with pytest.raises(ValueError):
        spr_filter(small_model, np.ones((5, 3)) * np.arange(5)[:, None], DefenseConfig("SPR", spr_count=5))


# --- evaluation --------------------------------------------------------------------


def test_identity_defense_matches_undefended(small_model, rng):
    results = []
    for _ in range(20):
        adv = rng.normal(size=(24, 3))
        results.append(fake_result(adv, int(rng.integers(4)), 4))
    undefended = np.mean([predict(small_model, r.adversarial) != r.label for r in results])
    assert evaluate_under_defense(small_model, results, DefenseConfig("SPR", spr_count=0)) == undefended


def test_defense_removing_all_delta(rng):
    # delta points are far outliers; SOR strips exactly them, leaving the originals
    model = init_model(3, (8, 16), (8,), seed=2)
    results, originals = [], []
    for _ in range(15):
        x = rng.normal(scale=0.1, size=(40, 3))
        adv = np.vstack([x, [[50.0, 0, 0]]])
        label = int(rng.integers(3))
        results.append(fake_result(adv, label, 1))
        originals.append(x)
    np.testing.assert_array_equal(sor_filter(results[0].adversarial, SOR), originals[0])
    clean_wrong = np.mean([predict(model, x) != r.label for x, r in zip(originals, results)])
    assert evaluate_under_defense(model, results, SOR) == clean_wrong


def test_evaluate_empty(small_model):
    assert evaluate_under_defense(small_model, [], SOR) == 0.0


def test_defended_predictions_deterministic(small_model, rng):
    samples = rng.normal(size=(5, 30, 3))
    cfg = DefenseConfig("SPR")
    np.testing.assert_array_equal(defended_predictions(small_model, samples, cfg),
                                  defended_predictions(small_model, samples, cfg))
