import numpy as np
import pytest

from railfcdd import losses
from railfcdd.losses import (SvddConfig, TrainConfig, fcdd_loss, fcdd_loss_gradient,
                             fcdd_loss_terms, initial_center, one_class_cross_entropy,
                             pseudo_huber, substituted_loss, svdd_objective)


# --- independent oracles ---

def oracle_pseudo_huber_mp(v):
    """High-precision arithmetic evaluation of sqrt(v^2 + 1) - 1."""
    import mpmath

    mpmath.mp.dps = 50
    return float(mpmath.sqrt(mpmath.mpf(repr(float(v))) ** 2 + 1) - 1)


def oracle_svdd(maps, center):
    """Direct double-loop summation of squared distances."""
    total = 0.0
    for m in maps:
        flat_m = np.ravel(m)
        flat_c = np.ravel(center)
        s = 0.0
        for a, b in zip(flat_m, flat_c):
            s += (a - b) ** 2
        total += s
    return total / len(maps)


def oracle_fcdd(maps, labels):
    """Scalar-loop evaluation of the loss, term by term."""
    import math

    total = 0.0
    for m, z in zip(maps, labels):
        s = 0.0
        count = 0
        for row in np.asarray(m, dtype=float):
            for h in np.ravel(row):
                s += h
                count += 1
        a = s / count
        if z == 0:
            total += a
        else:
            e = min(math.exp(-a), losses.SATURATION_LIMIT)
            total += -math.log(1.0 - e)
    return total / len(maps)


def oracle_fd_gradient(maps, labels, eps=1e-4):
    """Central finite differences of fcdd_loss w.r.t. every map element."""
    maps = [np.asarray(m, dtype=float).copy() for m in maps]
    grad = [np.zeros_like(m) for m in maps]
    for i, m in enumerate(maps):
        for idx in np.ndindex(m.shape):
            orig = m[idx]
            m[idx] = orig + eps
            up = fcdd_loss(maps, labels)
            m[idx] = orig - eps
            down = fcdd_loss(maps, labels)
            m[idx] = orig
            grad[i][idx] = (up - down) / (2 * eps)
    return np.stack(grad)


# --- pseudo-Huber ---

def test_pseudo_huber_closed_forms():
    assert pseudo_huber(0.0) == 0.0
    assert abs(pseudo_huber(np.sqrt(3.0)) - 1.0) <= 1e-9


def test_pseudo_huber_against_high_precision_oracle():
    rng = np.random.default_rng(42)
    values = rng.normal(0.0, 3.0, 1000)
    ours = pseudo_huber(values)
    for v, h in zip(values, ours):
        assert abs(h - oracle_pseudo_huber_mp(v)) <= 1e-9


def test_pseudo_huber_monotone_and_nonnegative():
    rng = np.random.default_rng(0)
    v = np.sort(np.abs(rng.normal(0, 5, 200)))
    h = pseudo_huber(v)
    assert np.all(h >= 0)
    assert np.all(np.diff(h) >= 0)


def test_pseudo_huber_featuremap_passthrough():
    from railfcdd.model import FeatureMap

    fm = FeatureMap(np.array([[0.0, np.sqrt(3.0)]] * 2), frame_id="f1")
    out = pseudo_huber(fm)
    assert isinstance(out, FeatureMap)
    assert out.frame_id == "f1"
    np.testing.assert_allclose(out.values, [[0.0, 1.0]] * 2, atol=1e-12)


def test_pseudo_huber_rejects_nonfinite():
    with pytest.raises(ValueError):
        pseudo_huber(np.array([1.0, np.inf]))


# --- deep SVDD objective ---

def test_svdd_zero_at_center():
    c = np.ones((3, 3))
    assert svdd_objective([c.copy(), c.copy()], SvddConfig(c)) == 0.0


def test_svdd_distance_two_gives_four():
    c = np.zeros(4)
    m = np.array([2.0, 0.0, 0.0, 0.0])
    assert svdd_objective([m], SvddConfig(c)) == pytest.approx(4.0)


def test_svdd_matches_double_loop_oracle():
    rng = np.random.default_rng(7)
    c = rng.normal(size=(5, 5))
    maps = [rng.normal(size=(5, 5)) for _ in range(10)]
    ours = svdd_objective(maps, SvddConfig(c))
    ref = oracle_svdd(maps, c)
    assert abs(ours - ref) <= 1e-7 * abs(ref)


def test_svdd_dimension_mismatch():
    with pytest.raises(ValueError):
        svdd_objective([np.zeros((2, 2))], SvddConfig(np.zeros(3)))


def test_initial_center_is_mean():
    maps = [np.zeros((2, 2)), np.full((2, 2), 2.0)]
    np.testing.assert_allclose(initial_center(maps), np.ones((2, 2)))


# --- fcdd loss ---

def test_fcdd_uniform_normal_map():
    a = 0.37
    assert fcdd_loss([np.full((28, 28), a)], [0]) == pytest.approx(a, abs=1e-12)


def test_fcdd_anomalous_mean_ln2():
    m = np.full((6, 7), np.log(2.0))
    assert abs(fcdd_loss([m], [1]) - np.log(2.0)) <= 1e-9


def test_fcdd_batch_matches_scalar_loop_oracle():
    rng = np.random.default_rng(5)
    maps = [np.abs(rng.normal(0.5, 0.4, (5, 4))) for _ in range(8)]
    labels = [0, 1, 0, 1, 1, 0, 0, 1]
    ours = fcdd_loss(maps, labels)
    ref = oracle_fcdd(maps, labels)
    assert abs(ours - ref) <= 1e-6 * abs(ref)


def test_fcdd_nonnegative_on_random_batches():
    rng = np.random.default_rng(13)
    for _ in range(50):
        n = int(rng.integers(1, 9))
        maps = [np.abs(rng.normal(0, 1, (4, 4))) for _ in range(n)]
        labels = rng.integers(0, 2, n)
        assert fcdd_loss(maps, labels) >= 0.0


def test_fcdd_monotonicity_in_map_scale():
    rng = np.random.default_rng(3)
    base = np.abs(rng.normal(0.5, 0.2, (4, 4))) + 0.05
    for lam in (1.5, 2.0, 4.0):
        assert fcdd_loss([base * lam], [1]) < fcdd_loss([base], [1])
        assert fcdd_loss([base * lam], [0]) > fcdd_loss([base], [0])


def test_fcdd_reduction_is_mean_of_per_sample():
    rng = np.random.default_rng(17)
    maps = [np.abs(rng.normal(0.4, 0.3, (3, 5))) for _ in range(9)]
    labels = rng.integers(0, 2, 9)
    batch = fcdd_loss(maps, labels)
    singles = [fcdd_loss([m], [z]) for m, z in zip(maps, labels)]
    assert abs(batch - np.mean(singles)) <= 1e-7 * abs(batch)


def test_fcdd_saturation_never_nan():
    res = fcdd_loss_terms([np.zeros((4, 4))], [1])
    assert np.isfinite(res.total)
    assert res.saturated == 1
    assert res.total == pytest.approx(-np.log1p(-losses.SATURATION_LIMIT))


def test_fcdd_rejects_negative_maps_and_bad_labels():
    with pytest.raises(ValueError):
        fcdd_loss([np.array([[-0.1, 0.2]])], [0])
    with pytest.raises(ValueError):
        fcdd_loss([np.zeros((2, 2))], [2])


def test_fcdd_field_dims_check():
    with pytest.raises(ValueError):
        fcdd_loss([np.zeros((3, 3))], [0], field_dims=(4, 4))


# --- equivalence of the substituted form with cross-entropy o pseudo-Huber ---

def test_substituted_form_equals_cross_entropy_composition():
    rng = np.random.default_rng(23)
    for _ in range(100):
        n = int(rng.integers(2, 12))
        h = np.abs(rng.normal(0.8, 0.6, n)) + 1e-3
        z = rng.integers(0, 2, n)
        direct = substituted_loss(h, z)
        composed = one_class_cross_entropy(np.exp(-h), z)
        assert abs(direct - composed) <= 1e-9 * max(1.0, abs(direct))


# --- gradients ---

def test_gradient_normal_term_is_uniform():
    maps = [np.abs(np.random.default_rng(1).normal(0.5, 0.2, (4, 4))) for _ in range(3)]
    grad = fcdd_loss_gradient(maps, [0, 0, 0])
    np.testing.assert_allclose(grad, 1.0 / (3 * 16))


def test_gradient_anomalous_at_ln2():
    m = np.full((4, 4), np.log(2.0))
    grad = fcdd_loss_gradient([m], [1])
    np.testing.assert_allclose(grad, -1.0 / 16, rtol=1e-12)


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(29)
    for _ in range(20):
        n = int(rng.integers(1, 5))
        maps = [np.abs(rng.normal(0.6, 0.4, (4, 4))) + 0.05 for _ in range(n)]
        labels = rng.integers(0, 2, n)
        analytic = fcdd_loss_gradient(maps, labels)
        numeric = oracle_fd_gradient(maps, labels)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-3)


def test_torch_loss_agrees_with_numpy():
    import torch

    rng = np.random.default_rng(31)
    maps = [np.abs(rng.normal(0.5, 0.3, (6, 6))) for _ in range(5)]
    labels = np.array([0, 1, 1, 0, 1])
    t_loss, _ = losses.fcdd_loss_t(torch.tensor(np.stack(maps)),
                                   torch.tensor(labels, dtype=torch.float64))
    assert abs(float(t_loss) - fcdd_loss(maps, labels)) <= 1e-9


def test_torch_pseudo_huber_agrees_with_numpy():
    import torch

    v = np.linspace(-4, 4, 101)
    t = losses.pseudo_huber_t(torch.tensor(v)).numpy()
    np.testing.assert_allclose(t, pseudo_huber(v), atol=1e-12)


# --- train configuration ---

def test_train_config_defaults_match_recipe():
    tc = TrainConfig()
    assert tc.batch_size == 32
    assert tc.epochs == 30
    assert tc.learning_rate == pytest.approx(1e-4)
    assert tc.gradient_decay == pytest.approx(0.9)
    assert tc.squared_gradient_decay == pytest.approx(0.99)
    assert tc.split_ratio == (65, 15, 20)


@pytest.mark.parametrize("kwargs", [
    {"epochs": 0},
    {"batch_size": 0},
    {"learning_rate": 0.0},
    {"gradient_decay": 1.0},
    {"split_ratio": (60, 20, 10)},
    {"split_ratio": (65, 15, -20)},
])
def test_train_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


# --- the trainer itself (tiny scale; desk scale lives in conftest/acceptance) ---

def test_train_same_seed_identical_log(tiny_corpus):
    from railfcdd.losses import train_fcdd
    from railfcdd.model import BackboneSpec

    spec = BackboneSpec(id="CNN27", input_side=64, u=8, v=8)
    tc = TrainConfig(epochs=2, seed=5)
    _, log_a = train_fcdd(tiny_corpus, spec, tc)
    _, log_b = train_fcdd(tiny_corpus, spec, tc)
    assert log_a.same_numbers(log_b)
    assert len(log_a.rows) == 2


def test_train_rejects_empty_partition(tiny_corpus):
    from dataclasses import replace

    from railfcdd.datapipe import DatasetManifest
    from railfcdd.losses import train_fcdd
    from railfcdd.model import BackboneSpec

    items = [replace(it, split="train") for it in tiny_corpus.items]
    manifest = DatasetManifest(items, seed=0)
    with pytest.raises(ValueError, match="calibration"):
        train_fcdd(manifest, BackboneSpec(id="CNN27", input_side=64, u=8, v=8),
                   TrainConfig(epochs=1, seed=0))


def test_desk_scale_smoothed_loss_monotone(desk_run):
    losses_per_epoch = [r.train_loss for r in desk_run.log.rows]
    assert len(losses_per_epoch) == 30
    window = 5
    smoothed = np.convolve(losses_per_epoch, np.ones(window) / window, mode="valid")
    assert np.all(np.diff(smoothed) <= 1e-6)
