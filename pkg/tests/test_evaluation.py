"""Metric oracles, injection accounting, rank test, histograms, diagnostics."""

import dataclasses
from fractions import Fraction
from itertools import combinations
from math import comb

import numpy as np
import pytest

from smagnet.data import GenParams, generate_dataset, generate_scene
from smagnet.errors import DataError
from smagnet.evaluation import (
    NDVI_EDGES,
    NIR_EDGES,
    ConfusionCounts,
    confusion,
    diagnostics,
    eval_histograms,
    evaluate,
    export_diagnostics,
    inject_missing,
    mannwhitney_u,
    metrics_from_counts,
    misclass_histogram,
    ndvi,
    robustness_sweep,
)
from smagnet.models import ModelConfig, build_model

PARAMS = GenParams()


# -- confusion / metrics -----------------------------------------------------------


def test_confusion_perfect_and_inverted():
    y = np.zeros(30, np.uint8)
    y[:10] = 1
    c = confusion(y, y)
    assert (c.tp, c.tn, c.fp, c.fn) == (10, 20, 0, 0)
    c = confusion(1 - y, y)
    assert (c.tp, c.tn) == (0, 0) and (c.fp, c.fn) == (20, 10)


def test_confusion_matches_counting_oracle():
    rng = np.random.default_rng(5)
    for _ in range(10):
        pred = rng.integers(0, 2, (16, 16))
        lab = rng.integers(0, 2, (16, 16))
        c = confusion(pred, lab)
        want = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
        for p, y in zip(pred.ravel(), lab.ravel()):
            want[{(1, 1): "tp", (1, 0): "fp", (0, 1): "fn", (0, 0): "tn"}[(p, y)]] += 1
        assert c.to_json() == want
        assert c.total == 256


def test_confusion_rejects_non_binary():
    with pytest.raises(ValueError, match="binary"):
        confusion(np.array([0, 2]), np.array([0, 1]))
    with pytest.raises(ValueError, match="shapes"):
        confusion(np.zeros(3), np.zeros(4))


def test_metrics_match_fraction_oracle_100_cases():
    rng = np.random.default_rng(11)
    for _ in range(100):
        tp, fp, fn, tn = (int(v) for v in rng.integers(0, 50, 4))
        got = metrics_from_counts(ConfusionCounts(tp, fp, fn, tn))

        def frac(num, den):
            return float(Fraction(num, den)) if den else 1.0

        assert got["oa"] == frac(tp + tn, tp + fp + fn + tn)
        assert got["precision"] == frac(tp, tp + fp)
        assert got["recall"] == frac(tp, tp + fn)
        assert got["iou"] == frac(tp, tp + fp + fn)
        if tp > 0:
            assert got["iou"] <= min(got["precision"], got["recall"]) + 1e-15


def test_metrics_degenerate_rule():
    assert metrics_from_counts(ConfusionCounts(0, 0, 0, 9)) == {
        "oa": 1.0,
        "precision": 1.0,
        "recall": 1.0,
        "iou": 1.0,
    }


# -- evaluate ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def eval_setup():
    ds = generate_dataset(14, seed=31, params=PARAMS)
    model = build_model(ModelConfig(), seed=2)
    return ds, model


def test_evaluate_pools_counts(eval_setup):
    ds, model = eval_setup
    rep = evaluate(model, ds, "test", 0.5, batch_size=4)
    total = ConfusionCounts(0, 0, 0, 0)
    for s in rep.per_scene:
        total = total + s.counts
    assert total == rep.counts
    assert rep.pooled == metrics_from_counts(total)
    assert {s.scene_id for s in rep.per_scene} == set(ds.splits["test"])


def test_evaluate_empty_split_rejected(eval_setup):
    ds, model = eval_setup
    with pytest.raises(DataError):
        evaluate(model, ds, "test", 0.5, scenes=[])


# -- missingness injection ------------------------------------------------------------


def _clean_scene(seed=3):
    s = generate_scene(seed, PARAMS)
    return dataclasses.replace(
        s, validity=np.ones_like(s.validity), msi=s.msi.copy()
    )


def test_inject_ratio_zero_is_identity():
    s = _clean_scene()
    assert inject_missing(s, 0.0, "band") is s


def test_inject_band_column_accounting():
    s = _clean_scene()
    s2 = inject_missing(s, 0.5, "band")
    assert int(s2.validity.sum()) == 64 * 64 // 2
    assert (s2.validity[:, :32] == 0).all() and (s2.validity[:, 32:] == 1).all()
    assert (s2.msi[:, :, :32] == PARAMS.fill_value).all()


def test_inject_band_exact_floor_counts():
    s = _clean_scene()
    for ratio in (0.1, 0.33, 0.8, 1.0):
        s2 = inject_missing(s, ratio, "band")
        assert int(s2.validity.sum()) == int((1 - ratio) * 64 * 64)


def test_inject_band_grows_from_left():
    s = _clean_scene()
    prev = np.ones_like(s.validity)
    for ratio in (0.25, 0.5, 0.75):
        cur = inject_missing(s, ratio, "band").validity
        assert (cur <= prev).all()  # monotone erosion, left-anchored
        prev = cur
    cols = (cur == 0).all(axis=0)
    assert cols[:48].all() and not cols[48:].any()


def test_inject_blobs_exact_count_and_rng_required():
    s = _clean_scene()
    s2 = inject_missing(s, 0.4, "blobs", np.random.default_rng(4))
    assert int(s2.validity.sum()) == int(0.6 * 64 * 64)
    with pytest.raises(ValueError, match="rng"):
        inject_missing(s, 0.4, "blobs")


def test_inject_intersects_existing_validity():
    s = generate_scene(12, PARAMS)  # may carry cloud gaps of its own
    s2 = inject_missing(s, 0.25, "band")
    assert (s2.validity <= s.validity).all()
    np.testing.assert_array_equal(s2.sar, s.sar)
    np.testing.assert_array_equal(s2.label, s.label)


def test_inject_validates_arguments():
    s = _clean_scene()
    with pytest.raises(ValueError, match=r"\[0,1\]"):
        inject_missing(s, 1.5, "band")
    with pytest.raises(ValueError, match="pattern"):
        inject_missing(s, 0.5, "stripes")


# -- mann-whitney -----------------------------------------------------------------------


def test_mw_fully_separated_exact():
    u, p = mannwhitney_u([1, 2, 3], [10, 20, 30])
    assert u == 0.0
    assert p == pytest.approx(2 / comb(6, 3))  # 0.1


def test_mw_identical_samples():
    _, p = mannwhitney_u([1, 2, 3], [1, 2, 3])
    assert p >= 0.99


def test_mw_symmetry_and_empty_rejected():
    rng = np.random.default_rng(6)
    a, b = rng.random(5), rng.random(7)
    assert mannwhitney_u(a, b) == mannwhitney_u(b, a)
    with pytest.raises(ValueError):
        mannwhitney_u([], [1.0])


def test_mw_exact_matches_independent_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(5):
        a = rng.integers(0, 6, 4).astype(float)  # small ints force ties
        b = rng.integers(0, 6, 5).astype(float)
        u_got, p_got = mannwhitney_u(a, b, method="exact")
        pooled = np.concatenate([a, b])
        n, m = len(a), len(b)

        def u_of(idx_a):
            ua = 0.0
            set_a = set(idx_a)
            for i in idx_a:
                for j in range(n + m):
                    if j not in set_a:
                        ua += (pooled[i] > pooled[j]) + 0.5 * (pooled[i] == pooled[j])
            return ua

        obs = min(u_of(range(n)), n * m - u_of(range(n)))
        assert u_got == obs
        hits = sum(
            min(u_of(c), n * m - u_of(c)) <= obs + 1e-9
            for c in combinations(range(n + m), n)
        )
        assert p_got == pytest.approx(hits / comb(n + m, n))


def test_mw_approx_within_002_of_exact():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(30):
        a = rng.normal(0, 1, 8)
        b = rng.normal(rng.uniform(0, 1.5), 1, 8)
        _, pe = mannwhitney_u(a, b, method="exact")
        _, pa = mannwhitney_u(a, b, method="approx")
        worst = max(worst, abs(pe - pa))
    assert worst <= 0.02, f"max |exact - approx| = {worst}"


def test_mw_exact_refuses_large_samples():
    with pytest.raises(ValueError, match="<= 8"):
        mannwhitney_u(np.arange(9.0), np.arange(9.0), method="exact")


# -- ndvi / histograms ---------------------------------------------------------------------


def test_ndvi_examples_and_scalar_oracle():
    assert ndvi(np.array([0.3]), np.array([0.3]))[0] == 0.0
    assert ndvi(np.array([0.0]), np.array([1.0]))[0] == 1.0
    assert ndvi(np.array([0.0]), np.array([0.0]))[0] == 0.0
    rng = np.random.default_rng(9)
    red, nir = rng.random((2, 50))
    got = ndvi(red, nir)
    for i in range(50):
        want = 0.0 if nir[i] + red[i] <= 1e-6 else (nir[i] - red[i]) / (nir[i] + red[i])
        assert abs(got[i] - want) <= 1e-7
    assert (got >= -1).all() and (got <= 1).all()


def test_histogram_perfect_prediction_all_zero():
    s = generate_scene(1, PARAMS)
    idx = ndvi(s.msi[0], s.msi[3])
    fn, fp = misclass_histogram(s.label, s.label, idx, s.validity, NDVI_EDGES)
    assert fn.sum() == 0 and fp.sum() == 0


def test_histogram_matches_per_pixel_binning_oracle():
    rng = np.random.default_rng(10)
    pred = rng.integers(0, 2, (8, 8))
    lab = rng.integers(0, 2, (8, 8))
    valid = rng.integers(0, 2, (8, 8))
    idx = rng.uniform(-1, 1, (8, 8))
    fn, fp = misclass_histogram(pred, lab, idx, valid, NDVI_EDGES)
    want_fn = np.zeros(20, np.int64)
    want_fp = np.zeros(20, np.int64)
    for i in range(8):
        for j in range(8):
            if not valid[i, j]:
                continue
            # np.histogram bins are half-open except the last, which is closed
            k = min(int((idx[i, j] + 1) / 0.1), 19)
            if lab[i, j] == 1 and pred[i, j] == 0:
                want_fn[k] += 1
            if lab[i, j] == 0 and pred[i, j] == 1:
                want_fp[k] += 1
    np.testing.assert_array_equal(fn, want_fn)
    np.testing.assert_array_equal(fp, want_fp)


def test_histogram_rejects_bad_edges():
    with pytest.raises(ValueError, match="increasing"):
        misclass_histogram(np.zeros(4), np.zeros(4), np.zeros(4), np.ones(4), np.array([0.2, 0.1]))


def test_eval_histograms_reconcile_with_valid_confusion(eval_setup):
    ds, model = eval_setup
    hists = eval_histograms(model, ds, "test", 0.5, batch_size=4)
    from smagnet.data import prepare_inputs
    from smagnet.training import predict_probs

    prepared = [prepare_inputs(s, ds.stats) for s in ds.split("test")]
    probs = predict_probs(model, prepared, 4)
    fn = fp = 0
    for scene, prob in zip(ds.split("test"), probs):
        pred = prob >= 0.5
        v = scene.validity.astype(bool)
        fn += int((v & (scene.label == 1) & ~pred).sum())
        fp += int((v & (scene.label == 0) & pred).sum())
    for key, edges in (("ndvi", NDVI_EDGES), ("nir", NIR_EDGES)):
        _, got_fn, got_fp = hists[key]
        assert got_fn.sum() == fn, key
        assert got_fp.sum() == fp, key


# -- sweep / diagnostics ----------------------------------------------------------------------


def test_sweep_ratio_zero_equals_plain_eval(eval_setup):
    ds, model = eval_setup
    sw = robustness_sweep(model, ds, 0.5, ratios=(0.0, 1.0), seeds=(0,), batch_size=4)
    plain = evaluate(model, ds, "test", 0.5, batch_size=4)
    assert sw.run_iou[(0.0, 0)] == plain.pooled["iou"]
    assert sw.rows[0]["ratio"] == 0.0 and sw.rows[-1]["ratio"] == 1.0
    assert sw.delta == sw.rows[0]["mean_iou"] - sw.rows[-1]["mean_iou"]


def test_sweep_full_missing_equals_sar_head(eval_setup):
    ds, model = eval_setup
    injected = [inject_missing(s, 1.0, "band") for s in ds.split("test")]
    fused = evaluate(model, ds, "test", 0.5, batch_size=4, scenes=injected)
    sar = evaluate(model, ds, "test", 0.5, batch_size=4, head="sar")
    for a, b in zip(fused.per_scene, sar.per_scene):
        assert a.counts == b.counts


def test_sweep_means_recompute_from_records(eval_setup):
    ds, model = eval_setup
    sw = robustness_sweep(
        model, ds, 0.5, ratios=(0.0, 0.5), seeds=(0, 1), pattern="blobs", batch_size=4
    )
    for row in sw.rows:
        vals = [v for (r, _), v in sw.run_iou.items() if r == row["ratio"]]
        assert row["mean_iou"] == pytest.approx(np.mean(vals), abs=1e-15)
        assert row["std_iou"] == pytest.approx(np.std(vals), abs=1e-15)
    # per-scene records cover every (ratio, seed, scene) combination
    assert len(sw.records) == 2 * 2 * len(ds.splits["test"])


def test_sweep_requires_finite_threshold(eval_setup):
    ds, model = eval_setup
    with pytest.raises(DataError, match="threshold"):
        robustness_sweep(model, ds, float("nan"))


def test_diagnostics_zero_validity_collapses(eval_setup):
    ds, model = eval_setup
    scene = ds.split("test")[0]
    dead = dataclasses.replace(scene, validity=np.zeros_like(scene.validity))
    diag = diagnostics(model, dead, ds.stats)
    for st in diag.states:
        assert (st.smg == 0).all()
    assert diag.mse_map.max() <= 1e-10
    assert (diag.mse_map >= 0).all()


def test_diagnostics_export_roundtrip(eval_setup, tmp_path):
    from smagnet.autodiff.serialization import read_container

    ds, model = eval_setup
    diag = diagnostics(model, ds.split("test")[0], ds.stats)
    path = tmp_path / "d.bin"
    export_diagnostics(path, diag, {"note": "x"})
    entries, meta = read_container(path)
    assert meta["kind"] == "smagnet-diagnostics" and meta["note"] == "x"
    for lvl in range(1, 6):
        for part in ("gate", "mask", "smg"):
            assert f"smg.level{lvl}.{part}" in entries
    recomputed = (
        (entries["prehead.fused"].astype(np.float64) - entries["prehead.sar"].astype(np.float64)) ** 2
    ).mean(axis=0)
    assert np.abs(recomputed - entries["mse"]).max() <= 1e-7
