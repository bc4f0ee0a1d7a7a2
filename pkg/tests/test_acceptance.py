"""Acceptance gate: one test per shipping criterion.

Criteria 4-7 share one session fixture that runs the full experiment
protocol (384 scenes, tiny preset, 60 epochs, three model variants x
three seeds). That fixture takes on the order of an hour on one CPU
core; everything else here is seconds.
"""

import dataclasses
import json
import subprocess
import sys
import time
from fractions import Fraction
from itertools import combinations
from math import comb

import numpy as np
import pytest

from smagnet.autodiff import Tensor, grad_check, ops
from smagnet.autodiff.gradcheck import OP_REGISTRY
from smagnet.autodiff.serialization import read_container
from smagnet.data import GenParams, generate_dataset, generate_scene, prepare_inputs
from smagnet.evaluation import (
    ConfusionCounts,
    diagnostics,
    evaluate,
    export_diagnostics,
    inject_missing,
    mannwhitney_u,
    metrics_from_counts,
    robustness_sweep,
)
from smagnet.fusion import build_mask_pyramid, gate_map, smag_fuse
from smagnet.models import ModelConfig, build_model
from smagnet.training import TrainConfig, select_threshold, train

PARAMS = GenParams()
SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def small_dataset():
    return generate_dataset(20, seed=77, params=PARAMS)


@dataclasses.dataclass
class SeedOutcome:
    seed: int
    iou_fusion: float  # full model, fused head, clean test split
    iou_sar: float  # single-stream baseline
    sweep_fusion: object  # full model: masked gating + shared decoder
    sweep_ablated: object  # no spatial mask, independent decoders
    iou_fusion_at_100: float
    per_scene_fusion_at_100: list
    per_scene_sar: list


@pytest.fixture(scope="session")
def protocol():
    """Train the full model, the SAR baseline, and the unmasked/unshared ablation; sweep both fusers."""
    ds = generate_dataset(384, seed=7, params=PARAMS)
    outcomes = []
    for seed in SEEDS:
        t0 = time.time()

        model_f = build_model(ModelConfig(), seed)
        res_f = train(model_f, ds, TrainConfig(seed=seed))
        rep_f = evaluate(model_f, ds, "test", res_f.threshold)
        sweep_f = robustness_sweep(model_f, ds, res_f.threshold)

        model_s = build_model(ModelConfig(arch="unet-sar"), seed)
        res_s = train(model_s, ds, TrainConfig(seed=seed))
        rep_s = evaluate(model_s, ds, "test", res_s.threshold)

        model_a = build_model(ModelConfig(spatial_mask=False, shared_decoder=False), seed)
        res_a = train(model_a, ds, TrainConfig(seed=seed))
        sweep_a = robustness_sweep(model_a, ds, res_a.threshold)

        full = [r for r in sweep_f.records if r["ratio"] == 1.0 and r["seed"] == 0]
        outcomes.append(
            SeedOutcome(
                seed=seed,
                iou_fusion=rep_f.pooled["iou"],
                iou_sar=rep_s.pooled["iou"],
                sweep_fusion=sweep_f,
                sweep_ablated=sweep_a,
                iou_fusion_at_100=sweep_f.run_iou[(1.0, 0)],
                per_scene_fusion_at_100=[r["iou"] for r in full],
                per_scene_sar=[s.metrics["iou"] for s in rep_s.per_scene],
            )
        )
        print(f"seed {seed}: protocol done in {time.time() - t0:.0f}s", flush=True)
    return outcomes


# -- criterion 1: missing MSI everywhere collapses the fused head onto the SAR head


def test_criterion_1_full_missing_head_identity(small_dataset):
    ds = small_dataset
    fill = float(ds.meta["params"]["fill_value"])
    scenes = list(ds.scenes.values())
    assert len(scenes) == 20
    worst = 0.0
    for i, scene in enumerate(scenes):
        model = build_model(ModelConfig(), seed=i % 3)  # untrained, varied init
        dead = inject_missing(scene, 1.0, "band", fill=fill)
        sar, msi, validity, _ = prepare_inputs(dead, ds.stats)
        out = model.forward(sar[None], msi[None], validity[None], training=False)
        diff = np.abs(out.logits.data - out.logits_sar.data).max()
        worst = max(worst, float(diff))
    assert worst <= 1e-5, f"max |fused - sar| over 20 fully-missing scenes: {worst:.3e}"


# -- criterion 2: every registered op and the fused blend+decode path pass gradcheck


def test_criterion_2_gradient_suite(rng):
    failures = []
    for name in sorted(OP_REGISTRY):
        fn, inputs = OP_REGISTRY[name](rng)
        err = grad_check(fn, inputs)
        if err > 1e-3:
            failures.append(f"{name}: {err:.3e}")
    assert not failures, "op gradients out of tolerance: " + ", ".join(failures)

    c = 2
    f_sar = Tensor(rng.standard_normal((1, c, 4, 4)), requires_grad=True)
    f_msi = Tensor(rng.standard_normal((1, c, 4, 4)), requires_grad=True)
    gw = Tensor(rng.standard_normal((1, 2 * c, 1, 1)) * 0.4, requires_grad=True)
    gb = Tensor(rng.standard_normal(1) * 0.1, requires_grad=True)
    up_w = Tensor(rng.standard_normal((c, c, 2, 2)) * 0.4, requires_grad=True)
    c1_w = Tensor(rng.standard_normal((c, c, 1, 1)) * 0.4, requires_grad=True)
    c1_b = Tensor(rng.standard_normal(c) * 0.1, requires_grad=True)
    mask = (rng.random((1, 1, 4, 4)) > 0.3).astype(np.float64)

    def fused_decode(fs, fm, w, b, uw, cw, cb):
        g = gate_map(fs, fm, w, b)
        fused, _ = smag_fuse(fs, fm, g, mask, "complementary")
        y = ops.conv_transpose2d(fused, uw, stride=2)
        y = ops.relu(ops.conv2d(y, cw, cb))
        return y.sum()

    err = grad_check(fused_decode, [f_sar, f_msi, gw, gb, up_w, c1_w, c1_b])
    assert err <= 1e-3, f"composite blend+decode grad error {err:.3e}"


# -- criterion 3: independent oracles for the numeric workhorses


def test_criterion_3_oracle_equivalences(rng):
    # conv2d against a nested-loop oracle in float64
    worst = 0.0
    for _ in range(20):
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        kh, kw = (int(v) for v in rng.integers(1, 4, 2))
        x = rng.standard_normal((2, 3, 8, 7))
        w = rng.standard_normal((4, 3, kh, kw))
        b = rng.standard_normal(4)
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        oh = (8 + 2 * pad - kh) // stride + 1
        ow = (7 + 2 * pad - kw) // stride + 1
        want = np.zeros((2, 4, oh, ow))
        for bi in range(2):
            for o in range(4):
                for i in range(oh):
                    for j in range(ow):
                        patch = xp[bi, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                        want[bi, o, i, j] = (patch * w[o]).sum() + b[o]
        worst = max(worst, float(np.abs(got - want).max()))
    assert worst <= 1e-6, f"conv2d vs loop oracle: {worst:.3e}"

    # metrics against exact rational arithmetic
    for _ in range(100):
        tp, fp, fn, tn = (int(v) for v in rng.integers(0, 40, 4))
        got = metrics_from_counts(ConfusionCounts(tp, fp, fn, tn))
        frac = lambda n, d: float(Fraction(n, d)) if d else 1.0
        assert got["oa"] == frac(tp + tn, tp + fp + fn + tn)
        assert got["precision"] == frac(tp, tp + fp)
        assert got["recall"] == frac(tp, tp + fn)
        assert got["iou"] == frac(tp, tp + fp + fn)

    # threshold selection against an exhaustive scan
    for _ in range(50):
        n = int(rng.integers(4, 40))
        probs = rng.integers(0, 12, n).astype(np.float32) / 11.0  # force ties
        labels = rng.integers(0, 2, n).astype(np.uint8)
        if labels.min() == labels.max():
            continue
        got_t, warned = select_threshold(probs, labels)
        assert not warned
        best_iou, best_t = -1.0, None
        for t in sorted(set(probs.tolist())):
            pred = probs >= t
            tp = int((pred & (labels == 1)).sum())
            fp = int((pred & (labels == 0)).sum())
            fn = int((~pred & (labels == 1)).sum())
            iou = tp / (tp + fp + fn) if tp + fp + fn else 1.0
            if iou > best_iou + 1e-12:
                best_iou, best_t = iou, t
        assert got_t == best_t, f"threshold {got_t} != exhaustive {best_t}"

    # rank test against direct enumeration of all label assignments
    for _ in range(10):
        n, m = (int(v) for v in rng.integers(3, 9, 2))
        a = rng.integers(0, 8, n).astype(float)
        b = rng.integers(0, 8, m).astype(float)
        pooled = np.concatenate([a, b])

        def u_stat(idx_a):
            inside = set(idx_a)
            ua = sum(
                (pooled[i] > pooled[j]) + 0.5 * (pooled[i] == pooled[j])
                for i in idx_a
                for j in range(n + m)
                if j not in inside
            )
            return min(ua, n * m - ua)

        obs = u_stat(range(n))
        p_enum = sum(
            u_stat(c) <= obs + 1e-9 for c in combinations(range(n + m), n)
        ) / comb(n + m, n)
        u_got, p_got = mannwhitney_u(a, b)  # auto -> exact at these sizes
        assert u_got == obs
        assert abs(p_got - p_enum) <= 1e-12
    # the approximation used beyond n,m = 8 must continue the exact branch
    # smoothly at the boundary (continuous data; heavy ties make p lumpy)
    for _ in range(20):
        a = rng.normal(0.0, 1.0, 8)
        b = rng.normal(rng.uniform(0.0, 1.5), 1.0, 8)
        _, p_exact = mannwhitney_u(a, b, method="exact")
        _, p_approx = mannwhitney_u(a, b, method="approx")
        assert abs(p_approx - p_exact) <= 0.02

    # mask pyramid against block-reshape averaging on divisible shapes
    for _ in range(20):
        v = (rng.random((64, 64)) > rng.random()).astype(np.uint8)
        shapes = [(32, 32), (16, 16), (8, 8), (4, 4), (2, 2)]
        got = build_mask_pyramid(v, shapes)
        for (h, w), m in zip(shapes, got):
            want = v.astype(np.float64).reshape(h, 64 // h, w, 64 // w).mean(axis=(1, 3))
            np.testing.assert_array_equal(m[0, 0], want.astype(m.dtype))


# -- criteria 4-7: directional reproduction of the published orderings


def test_criterion_4_fusion_beats_sar_baseline(protocol):
    wins = sum(o.iou_fusion >= o.iou_sar for o in protocol)
    detail = ", ".join(f"seed {o.seed}: {o.iou_fusion:.4f} vs {o.iou_sar:.4f}" for o in protocol)
    assert wins >= 2, f"fused head beat the SAR baseline in only {wins}/3 seeds ({detail})"


def test_criterion_5_masking_limits_degradation(protocol):
    wins = sum(o.sweep_fusion.delta <= o.sweep_ablated.delta for o in protocol)
    detail = ", ".join(
        f"seed {o.seed}: full={o.sweep_fusion.delta:.4f} ablated={o.sweep_ablated.delta:.4f}"
        for o in protocol
    )
    assert wins >= 2, (
        f"masked/shared fusion degraded less than the ablation in only {wins}/3 seeds ({detail})"
    )


def test_criterion_6_full_missing_parity_with_sar(protocol):
    for o in protocol:
        gap = abs(o.iou_fusion_at_100 - o.iou_sar)
        assert gap <= 0.02, (
            f"seed {o.seed}: |IoU(fused@100%) - IoU(sar)| = {gap:.4f} exceeds 2 IoU points"
        )
    not_rejected = 0
    for o in protocol:
        _, p = mannwhitney_u(o.per_scene_fusion_at_100, o.per_scene_sar)
        if p >= 0.05:
            not_rejected += 1
    assert not_rejected >= 2, f"rank test rejected parity in {3 - not_rejected}/3 seeds"


def test_criterion_7_sweep_is_non_increasing(protocol):
    for o in protocol:
        means = [row["mean_iou"] for row in o.sweep_fusion.rows]
        for lo, hi in zip(means[1:], means[:-1]):
            assert lo <= hi + 0.005, f"seed {o.seed}: sweep rose {hi:.4f} -> {lo:.4f}"


# -- criterion 8: exported diagnostics vanish over the missing half


def test_criterion_8_half_missing_diagnostics(small_dataset, tmp_path):
    ds = small_dataset
    scene = generate_scene(123, PARAMS)
    scene = dataclasses.replace(scene, validity=np.ones_like(scene.validity), msi=scene.msi.copy())
    scene = inject_missing(scene, 0.5, "band", fill=float(ds.meta["params"]["fill_value"]))
    assert (scene.validity[:, :32] == 0).all() and (scene.validity[:, 32:] == 1).all()

    model = build_model(ModelConfig(), seed=0)
    diag = diagnostics(model, scene, ds.stats)
    out = tmp_path / "diag.bin"
    export_diagnostics(out, diag, {})
    entries, meta = read_container(out)
    assert meta["kind"] == "smagnet-diagnostics"

    for lvl in range(1, 6):
        smg = entries[f"smg.level{lvl}.smg"]
        half = smg.shape[-1] // 2
        assert half >= 1
        left = np.abs(smg[..., :half]).max()
        assert left == 0.0, f"level {lvl}: SMG over missing half peaked at {left:.3e}"

    mse = entries["mse"]
    assert mse.shape == (64, 64)
    assert mse[:, :32].max() <= 1e-10, f"MSE over missing half: {mse[:, :32].max():.3e}"


# -- criterion 9: same seed, same bytes


def test_criterion_9_byte_identical_reruns(tmp_path):
    data = tmp_path / "data"
    cfg = tmp_path / "cfg.json"
    run = [
        sys.executable, "-m", "smagnet.cli",
        "gen-data", "--out", str(data), "--scenes", "30", "--size", "64", "--seed", "5",
    ]
    assert subprocess.run(run, capture_output=True).returncode == 0
    cfg.write_text(json.dumps({"data": {"dir": str(data)}, "train": {"epochs": 3, "batch_size": 8}}))

    for name in ("one", "two"):  # fresh interpreter each: no inherited RNG or hash state
        out = tmp_path / name
        for argv in (
            ["train", "--config", str(cfg), "--out", str(out), "--seed", "11"],
            ["eval", "--run", str(out), "--data", str(data)],
        ):
            proc = subprocess.run([sys.executable, "-m", "smagnet.cli", *argv], capture_output=True)
            assert proc.returncode == 0, proc.stderr.decode()

    for name in ("history.csv", "checkpoint.bin", "eval.json", "per_scene.csv"):
        a = (tmp_path / "one" / name).read_bytes()
        b = (tmp_path / "two" / name).read_bytes()
        assert a == b, f"{name} differs between identical seeded runs"
