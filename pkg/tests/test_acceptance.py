"""Acceptance suite: one test per criterion, each printing a PASS line.

Criteria 6 and 7 share the session-scoped desk-scale training run; criterion 6
repeats the full run itself for the determinism check.
"""

import time

import numpy as np
import pytest

from railfcdd import datapipe, evalharness, heatmap, losses, model, scoring
from railfcdd.clistore import InspectionHistory, prognostic_compare

from conftest import run_desk_training
from test_evalharness import PUBLISHED_TRIPLES, oracle_pairwise_auc
from test_heatmap import full_kernel, grid_4x4, oracle_dense
from test_losses import oracle_fcdd, oracle_fd_gradient, oracle_pseudo_huber_mp, oracle_svdd


def report(criterion: int, detail: str):
    print(f"\nACCEPTANCE {criterion} PASS: {detail}")


def test_criterion_1_loss_math_oracles():
    t0 = time.time()
    rng = np.random.default_rng(101)

    values = rng.normal(0.0, 3.0, 1000)
    ours = losses.pseudo_huber(values)
    for v, h in zip(values, ours):
        ref = oracle_pseudo_huber_mp(v)
        assert abs(h - ref) <= 1e-6 * max(1.0, abs(ref))
    assert abs(losses.pseudo_huber(np.sqrt(3.0)) - 1.0) <= 1e-9
    assert losses.pseudo_huber(0.0) == 0.0

    for _ in range(250):
        n = int(rng.integers(1, 5))
        maps = [np.abs(rng.normal(0.6, 0.5, (4, 4))) for _ in range(n)]
        labels = rng.integers(0, 2, n)
        ours_l = losses.fcdd_loss(maps, labels)
        ref_l = oracle_fcdd(maps, labels)
        assert abs(ours_l - ref_l) <= 1e-6 * max(1.0, abs(ref_l))
    m = np.full((5, 5), np.log(2.0))
    assert abs(losses.fcdd_loss([m], [1]) - np.log(2.0)) <= 1e-9

    center = rng.normal(size=(4, 4))
    cfg = losses.SvddConfig(center)
    for _ in range(100):
        maps = [rng.normal(size=(4, 4)) for _ in range(10)]
        ours_s = losses.svdd_objective(maps, cfg)
        ref_s = oracle_svdd(maps, center)
        assert abs(ours_s - ref_s) <= 1e-6 * max(1.0, abs(ref_s))

    elapsed = time.time() - t0
    assert elapsed < 10.0
    report(1, f"loss math matches oracles on 1000+ random inputs in {elapsed:.1f}s")


def test_criterion_2_gradient_check():
    t0 = time.time()
    rng = np.random.default_rng(102)
    checked = 0
    while checked < 100:
        n = int(rng.integers(1, 4))
        maps = [np.abs(rng.normal(0.6, 0.4, (4, 4))) + 0.05 for _ in range(n)]
        labels = rng.integers(0, 2, n)
        analytic = losses.fcdd_loss_gradient(maps, labels)
        numeric = oracle_fd_gradient(maps, labels, eps=1e-4)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-3)
        checked += n
    elapsed = time.time() - t0
    assert elapsed < 30.0
    report(2, f"analytic gradient matches central differences on {checked} maps "
              f"in {elapsed:.1f}s")


def test_criterion_3_upsampling_oracle():
    t0 = time.time()
    rng = np.random.default_rng(103)
    geom = grid_4x4()
    kernel = full_kernel(sigma=4.0, canvas=32)
    for _ in range(50):
        field = rng.uniform(0.0, 1.0, (4, 4))
        ours = heatmap.gaussian_upsample(field, geom, kernel, (32, 32)).values
        ref = oracle_dense(field, geom, kernel.sigma, (32, 32))
        assert np.abs(ours - ref).max() <= 1e-6

    # translation equivariance and linearity on 100 random cases
    spec = model.BackboneSpec()
    big_geom = model.geometry_of(spec)
    big_kernel = heatmap.GaussianKernelSpec.for_geometry(big_geom)
    for _ in range(50):
        x, y = rng.integers(2, 25, 2)
        fa = np.zeros((28, 28))
        fa[x, y] = 1.0
        fb = np.zeros((28, 28))
        fb[x + 1, y] = 1.0
        pa = np.unravel_index(
            heatmap.gaussian_upsample(fa, big_geom, big_kernel, (224, 224)).values.argmax(),
            (224, 224))
        pb = np.unravel_index(
            heatmap.gaussian_upsample(fb, big_geom, big_kernel, (224, 224)).values.argmax(),
            (224, 224))
        assert (pb[0] - pa[0], pb[1] - pa[1]) == (big_geom.total_stride, 0)
    for _ in range(50):
        fx = rng.uniform(0, 1, (4, 4))
        fy = rng.uniform(0, 1, (4, 4))
        a, b = rng.uniform(-2, 2, 2)
        combined = heatmap.gaussian_upsample(a * fx + b * fy, geom, kernel, (32, 32)).values
        separate = (a * heatmap.gaussian_upsample(fx, geom, kernel, (32, 32)).values
                    + b * heatmap.gaussian_upsample(fy, geom, kernel, (32, 32)).values)
        assert np.abs(combined - separate).max() <= 1e-6 * max(np.abs(separate).max(), 1e-12)

    elapsed = time.time() - t0
    assert elapsed < 30.0
    report(3, f"upsampling matches dense accumulation, equivariant and linear, "
              f"in {elapsed:.1f}s")


def test_criterion_4_metric_fidelity():
    for precision, recall, f1 in PUBLISHED_TRIPLES:
        tp = 10000
        fp = int(round(tp / precision)) - tp
        fn = int(round(tp / recall)) - tp
        got = evalharness.prf1(evalharness.ConfusionCounts(tp, fp, 0, fn))
        assert abs(got.f1 - f1) <= 5e-4

    rng = np.random.default_rng(104)
    for _ in range(100):
        n = int(rng.integers(10, 60))
        scores = np.round(rng.uniform(0, 5, n), 1)
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        assert abs(evalharness.auc(scores, labels)
                   - oracle_pairwise_auc(scores, labels)) <= 1e-12
    report(4, f"{len(PUBLISHED_TRIPLES)} published F1 triples within 5e-4; "
              "AUC matches the pair oracle within 1e-12 on 100 sets")


def test_criterion_5_manifest_arithmetic():
    def pool(prefix, count):
        return [datapipe.ManifestItem(f"{prefix}:{i}", f"/{prefix}/{i}.png", None)
                for i in range(count)]

    cloudy_normal, cloudy_anom = pool("cn", 3372), pool("ca", 872)
    rows = {}
    for ratio, expected in ((1, (800, 872)), (2, (1600, 872)), (3, (2400, 872)),
                            (4, (3200, 872))):
        manifest = datapipe.sample_imbalanced(cloudy_normal, cloudy_anom, ratio, seed=0)
        assert manifest.counts() == expected
        rows[f"{ratio}:1"] = manifest.counts()

    sunny_normal, sunny_anom = pool("sn", 8097), pool("sa", 4787)
    for step, expected in ((1, (2000, 1000)), (2, (4000, 2000)), (3, (6000, 3000)),
                           (4, (8000, 4000))):
        manifest = datapipe.sample_scaled(sunny_normal, sunny_anom, step, seed=0)
        assert manifest.counts() == expected

    pooled = datapipe.pool_datasets([
        datapipe.sample_imbalanced(cloudy_normal, cloudy_anom, 2, seed=0),
        datapipe.sample_scaled(sunny_normal, sunny_anom, 2, seed=0)])
    assert pooled.counts() == (5600, 2872)
    report(5, "imbalance, scale, and pooled designs reproduce all table rows "
              "(2:1 -> 1600/872, pooled -> 5600/2872)")


def test_criterion_6_desk_scale_run(desk_run):
    assert desk_run.train_seconds <= 1800.0
    test_metrics = desk_run.metrics["test"]
    assert test_metrics["auc"] >= 0.90
    assert test_metrics["f1"] >= 0.80
    assert len(desk_run.log.rows) == 30

    # same seed, full rerun: metric files must match byte for byte
    rerun = run_desk_training(desk_run.out_dir)
    assert rerun.train_seconds <= 1800.0
    assert rerun.metrics_bytes == desk_run.metrics_bytes
    assert rerun.log.same_numbers(desk_run.log)
    report(6, f"desk-scale run: AUC {test_metrics['auc']:.4f}, F1 {test_metrics['f1']:.4f}, "
              f"{desk_run.train_seconds / 60:.1f} + {rerun.train_seconds / 60:.1f} min, "
              "identical metrics across seeded reruns")


def test_criterion_7_heatmap_localization(desk_run):
    from scipy.ndimage import binary_dilation

    weights = desk_run.weights
    geom = model.geometry_of(weights.spec)
    kernel = heatmap.GaussianKernelSpec.for_geometry(geom)
    stride = int(geom.total_stride)
    structure = np.ones((2 * stride + 1, 2 * stride + 1), dtype=bool)

    hits = total = 0
    for item in desk_run.manifest.split_items("test"):
        if item.label != 1:
            continue
        frame = datapipe.load_image(item.path)
        fmap = model.forward_map(weights, frame)
        heat = heatmap.gaussian_upsample(losses.pseudo_huber(fmap), geom, kernel,
                                         frame.shape[:2])
        mask = datapipe.load_mask(datapipe.mask_path_for(item))
        dilated = binary_dilation(mask, structure)
        r, c = np.unravel_index(heat.values.argmax(), heat.values.shape)
        hits += bool(dilated[r, c])
        total += 1
    fraction = hits / total
    assert fraction >= 0.80

    # saturation rule, pixel-exact on a constructed ramp
    values = np.arange(9, dtype=np.float64).reshape(3, 3)
    rendered = heatmap.render(heatmap.Heatmap(values), heatmap.RenderSpec(quartile=0.25))
    assert rendered.bounds == (0.0, 2.0)
    import io

    from PIL import Image

    img = np.asarray(Image.open(io.BytesIO(rendered.png_bytes)))
    np.testing.assert_array_equal(img[0, 2], img[2, 2])  # value 2 == value 8 (saturated)
    assert not np.array_equal(img[0, 0], img[0, 2])
    report(7, f"heatmap argmax inside dilated ground truth for {hits}/{total} "
              f"({100 * fraction:.0f}%) anomalous test frames; display range "
              "[min, max/4] saturates exactly")


def test_criterion_8_risk_and_prognostics(tmp_path):
    # risk-weighted score linearity
    table = scoring.RiskWeightTable([scoring.RiskWeightEntry(0, 50, 0.0, 1.0),
                                     scoring.RiskWeightEntry(50, 100, 0.1, 2.5)])
    rng = np.random.default_rng(108)
    for _ in range(200):
        raw = float(rng.uniform(0, 30))
        pos = float(rng.uniform(0, 100))
        w, s, _ = scoring.risk_weighted_score(raw, pos, table)
        w2, s2, _ = scoring.risk_weighted_score(2.0 * raw, pos, table)
        assert s == pytest.approx(w * raw) and s2 == pytest.approx(2.0 * s)
    w, s, _ = scoring.risk_weighted_score(
        7.0, 10.0, scoring.RiskWeightTable([scoring.RiskWeightEntry(0, 50, 0.0, 0.0)]))
    assert s == 0.0

    # prognostic flags equal direct recomputation on 20 random histories
    for case in range(20):
        scores = list(np.round(rng.uniform(0.5, 4.0, int(rng.integers(2, 9))), 3))
        history = InspectionHistory(tmp_path / f"case{case}", 0.6)
        for i, value in enumerate(scores):
            history.record_inspection(
                f"run{i}", [scoring.ScoredFrame("f0", value, 1.0, track_position=0.1,
                                                run_id=f"run{i}")],
                f"2026-02-{i + 1:02d}")
        window = int(rng.integers(1, 5))
        factor = float(rng.choice([1.2, 1.5, 2.0]))
        got = prognostic_compare(history, 0, window=window, factor=factor)
        prior = scores[:-1][-window:]
        assert got.flagged == (scores[-1] > factor * (sum(prior) / len(prior)))

    # crash injection between CSV append and index update leaves a recoverable state
    history = InspectionHistory(tmp_path / "crash", 0.6)
    history.record_inspection("r1", [scoring.ScoredFrame("f0", 1.0, 1.0,
                                                         track_position=0.1, run_id="r1")],
                              "2026-03-01")
    baseline_rows = history._bucket_path(0).read_text()

    def crash():
        raise RuntimeError("injected crash")

    with pytest.raises(RuntimeError):
        history.record_inspection("r2", [scoring.ScoredFrame("f0", 2.0, 1.0,
                                                             track_position=0.1,
                                                             run_id="r2")],
                                  "2026-03-08", fault_hook=crash)
    assert baseline_rows in history._bucket_path(0).read_text()  # append-only
    assert not history.is_consistent()
    history.recover()
    assert history.is_consistent()
    assert [e.run_id for e in history.entries(0)] == ["r1", "r2"]
    report(8, "risk-weight linearity, prognostic flag oracle, and crash-recoverable "
              "append-only history all hold")
