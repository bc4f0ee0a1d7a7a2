"""Metrics, missing-data robustness sweeps, rank statistics, diagnostics.

Everything here emits plain data (counts, CSV-ready rows, tensor
containers); rendering lives with the CLI. Aggregate metrics are pooled
(micro-averaged) confusion counts over a split; per-scene metrics are kept
alongside for distributional tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from itertools import combinations

import numpy as np

from .autodiff import no_grad
from .autodiff.serialization import write_container
from .data import Dataset, Scene, _value_noise, child_seed, prepare_inputs
from .errors import DataError
from .training import predict_probs

SWEEP_RATIOS = (0.0, 0.25, 0.5, 0.75, 1.0)
MISSING_PATTERNS = ("band", "blobs")

NDVI_EDGES = np.round(np.linspace(-1.0, 1.0, 21), 10)
NIR_EDGES = np.round(np.linspace(0.0, 1.0, 11), 10)


# -- confusion counting and metrics --------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    def to_json(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def _as_binary(arr: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(arr)
    if a.dtype != bool and not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1), found other values")
    return a.astype(bool)


def confusion(pred: np.ndarray, label: np.ndarray) -> ConfusionCounts:
    p = _as_binary(pred, "pred")
    y = _as_binary(label, "label")
    if p.shape != y.shape:
        raise ValueError(f"confusion shapes differ: {p.shape} vs {y.shape}")
    tp = int(np.count_nonzero(p & y))
    fp = int(np.count_nonzero(p & ~y))
    fn = int(np.count_nonzero(~p & y))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def metrics_from_counts(c: ConfusionCounts) -> dict[str, float]:
    """OA/precision/recall/IoU; zero denominators resolve to 1.0.

    The degenerate rule keeps water-free scenes aggregable: a prediction
    with no positives and no actual positives is perfect, not undefined.
    """

    def ratio(num: int, den: int) -> float:
        return num / den if den else 1.0

    return {
        "oa": ratio(c.tp + c.tn, c.total),
        "precision": ratio(c.tp, c.tp + c.fp),
        "recall": ratio(c.tp, c.tp + c.fn),
        "iou": ratio(c.tp, c.tp + c.fp + c.fn),
    }


# -- split evaluation ------------------------------------------------------------


@dataclass
class SceneEval:
    scene_id: str
    counts: ConfusionCounts
    metrics: dict[str, float]


@dataclass
class EvalReport:
    split: str
    head: str
    threshold: float
    per_scene: list[SceneEval]
    counts: ConfusionCounts
    pooled: dict[str, float]

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "head": self.head,
            "threshold": self.threshold,
            "n_scenes": len(self.per_scene),
            "counts": self.counts.to_json(),
            "pooled": self.pooled,
            "mean_per_scene": {
                k: float(np.mean([s.metrics[k] for s in self.per_scene]))
                for k in ("oa", "precision", "recall", "iou")
            },
        }


def evaluate(
    model,
    dataset: Dataset,
    split: str = "test",
    threshold: float = 0.5,
    batch_size: int = 16,
    head: str = "fused",
    scenes: list[Scene] | None = None,
) -> EvalReport:
    """Threshold the requested head over a split and report metrics.

    `scenes` substitutes an explicit scene list (e.g. after missingness
    injection) while keeping the dataset's normalization statistics.
    """
    scene_list = scenes if scenes is not None else dataset.split(split)
    if not scene_list:
        raise DataError(f"split {split!r} is empty")
    prepared = [prepare_inputs(s, dataset.stats) for s in scene_list]
    probs = predict_probs(model, prepared, batch_size, head=head)
    per_scene = []
    total = ConfusionCounts(0, 0, 0, 0)
    for scene, prob in zip(scene_list, probs):
        c = confusion(prob >= threshold, scene.label)
        total = total + c
        per_scene.append(SceneEval(scene.scene_id, c, metrics_from_counts(c)))
    return EvalReport(split, head, float(threshold), per_scene, total, metrics_from_counts(total))


# -- missingness injection -------------------------------------------------------


def inject_missing(
    scene: Scene,
    ratio: float,
    pattern: str = "band",
    rng: np.random.Generator | None = None,
    fill: float = 0.0,
) -> Scene:
    """Mark a fraction of the MSI raster missing and fill it.

    The surviving valid-pixel count is floor((1-ratio)*H*W) intersected
    with the scene's own validity; SAR and label are untouched. The band
    pattern grows from the left edge column by column; blobs carve out the
    low regions of a smooth random field.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"missing ratio must lie in [0,1], got {ratio}")
    if pattern not in MISSING_PATTERNS:
        raise ValueError(f"unknown missing pattern {pattern!r} (use band or blobs)")
    h, w = scene.validity.shape
    k = h * w - int((1.0 - ratio) * h * w)  # pixels to remove
    if k == 0:
        return scene
    missing = np.zeros(h * w, dtype=bool)
    if pattern == "band":
        missing[:k] = True
        missing = missing.reshape((h, w), order="F")  # fill whole columns, left first
    else:
        if rng is None:
            raise ValueError("blobs pattern requires an rng")
        field = _value_noise(rng, h, w, 8) + 0.5 * _value_noise(rng, h, w, 4)
        missing[np.argpartition(field.ravel(), k - 1)[:k]] = True
        missing = missing.reshape((h, w))
    validity = scene.validity.copy()
    validity[missing] = 0
    msi = scene.msi.copy()
    msi[:, validity == 0] = fill
    return replace(scene, msi=msi, validity=validity)


@dataclass
class SweepResult:
    pattern: str
    ratios: tuple[float, ...]
    rows: list[dict]  # ratio, mean_iou, std_iou (one per ratio, ascending)
    delta: float  # mean IoU at min ratio - mean IoU at max ratio
    run_iou: dict[tuple[float, int], float]  # (ratio, seed) -> pooled IoU
    records: list[dict]  # per (ratio, seed, scene) metric rows


def robustness_sweep(
    model,
    dataset: Dataset,
    threshold: float,
    ratios=SWEEP_RATIOS,
    seeds=(0, 1, 2),
    pattern: str = "band",
    split: str = "test",
    batch_size: int = 16,
) -> SweepResult:
    """Evaluate one trained model under increasing MSI missingness.

    Each (ratio, seed) pair gets its own injection stream; the model and
    threshold never change. Reported IoU per run is pooled over the split,
    and per-scene rows are kept for rank tests.
    """
    if not np.isfinite(threshold):
        raise DataError("robustness sweep requires a finite selected threshold")
    ratios = tuple(sorted(float(r) for r in ratios))
    fill = float(dataset.meta.get("params", {}).get("fill_value", 0.0))
    base = dataset.split(split)
    rows, records, run_iou = [], [], {}
    for ratio in ratios:
        per_seed = []
        for seed in seeds:
            rng = np.random.default_rng(child_seed(seed, "inject", int(round(ratio * 100))))
            scenes = [inject_missing(s, ratio, pattern, rng, fill) for s in base]
            rep = evaluate(model, dataset, split, threshold, batch_size, scenes=scenes)
            per_seed.append(rep.pooled["iou"])
            run_iou[(ratio, int(seed))] = rep.pooled["iou"]
            for se in rep.per_scene:
                records.append(
                    {
                        "ratio": ratio,
                        "seed": int(seed),
                        "scene_id": se.scene_id,
                        **{k: se.metrics[k] for k in ("iou", "oa", "precision", "recall")},
                    }
                )
        arr = np.asarray(per_seed, dtype=np.float64)
        rows.append(
            {"ratio": ratio, "mean_iou": float(arr.mean()), "std_iou": float(arr.std())}
        )
    delta = rows[0]["mean_iou"] - rows[-1]["mean_iou"]
    return SweepResult(pattern, ratios, rows, delta, run_iou, records)


# -- Mann-Whitney U ---------------------------------------------------------------


def _midranks(vals: np.ndarray) -> np.ndarray:
    order = np.argsort(vals, kind="stable")
    sv = vals[order]
    ranks = np.empty(len(vals), dtype=np.float64)
    i = 0
    while i < len(sv):
        j = i
        while j < len(sv) and sv[j] == sv[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0
        i = j
    return ranks


def mannwhitney_u(sample_a, sample_b, method: str = "auto") -> tuple[float, float]:
    """Two-sided Mann-Whitney U: (min-U statistic, p).

    Exact p by enumerating all C(n+m, n) group assignments of the pooled
    values when both samples have at most 8 elements; otherwise the
    tie-corrected normal approximation with continuity correction.
    ``method`` forces a branch ("exact"/"approx") for cross-validation.
    """
    if method not in ("auto", "exact", "approx"):
        raise ValueError(f"unknown method {method!r}")
    a = np.asarray(sample_a, dtype=np.float64).reshape(-1)
    b = np.asarray(sample_b, dtype=np.float64).reshape(-1)
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise ValueError("mannwhitney_u requires non-empty samples")
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    u_a = float(ranks[:n].sum()) - n * (n + 1) / 2.0
    u_min = min(u_a, n * m - u_a)

    exact_ok = n <= 8 and m <= 8
    if method == "exact" and not exact_ok:
        raise ValueError("exact enumeration is limited to samples of size <= 8")
    use_exact = exact_ok if method == "auto" else method == "exact"
    if use_exact:
        gt = (pooled[:, None] > pooled[None, :]).astype(np.float64)
        gt += 0.5 * (pooled[:, None] == pooled[None, :])
        total = math.comb(n + m, n)
        hits = 0
        idx = np.arange(n + m)
        for combo in combinations(range(n + m), n):
            sel = np.zeros(n + m, dtype=bool)
            sel[list(combo)] = True
            u = gt[np.ix_(idx[sel], idx[~sel])].sum()
            if min(u, n * m - u) <= u_min + 1e-9:
                hits += 1
        return u_min, hits / total

    # tie-corrected normal approximation, continuity-corrected toward the mean
    _, t = np.unique(pooled, return_counts=True)
    big_n = n + m
    correction = float(((t**3 - t).sum())) / (big_n * (big_n - 1))
    sigma2 = n * m / 12.0 * ((big_n + 1) - correction)
    if sigma2 <= 0:
        return u_min, 1.0
    z = (u_min - n * m / 2.0 + 0.5) / math.sqrt(sigma2)
    p = 1.0 + math.erf(z / math.sqrt(2.0))  # 2 * Phi(z)
    return u_min, min(1.0, p)


# -- spectral-index misclassification histograms -----------------------------------


def ndvi(red: np.ndarray, nir: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """(NIR - Red) / (NIR + Red), zero where the denominator vanishes."""
    red = np.asarray(red, dtype=np.float64)
    nir = np.asarray(nir, dtype=np.float64)
    denom = nir + red
    safe = np.where(denom > eps, denom, 1.0)
    return np.where(denom > eps, (nir - red) / safe, 0.0)


def misclass_histogram(
    pred: np.ndarray,
    label: np.ndarray,
    index_map: np.ndarray,
    valid: np.ndarray,
    edges: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """FN and FP counts binned by a spectral index, valid pixels only."""
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or (np.diff(edges) <= 0).any():
        raise ValueError("histogram edges must be strictly increasing")
    p = _as_binary(pred, "pred")
    y = _as_binary(label, "label")
    v = _as_binary(valid, "valid")
    fn = np.histogram(index_map[v & y & ~p], bins=edges)[0]
    fp = np.histogram(index_map[v & ~y & p], bins=edges)[0]
    return fn, fp


def eval_histograms(
    model, dataset: Dataset, split: str, threshold: float, batch_size: int = 16
) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """NDVI and NIR misclassification histograms pooled over a split.

    Indices come from the raw (un-normalized) reflectances, so bins match
    the physical [0,1] / [-1,1] ranges.
    """
    scene_list = dataset.split(split)
    prepared = [prepare_inputs(s, dataset.stats) for s in scene_list]
    probs = predict_probs(model, prepared, batch_size)
    acc = {
        "ndvi": [NDVI_EDGES, np.zeros(len(NDVI_EDGES) - 1, np.int64), np.zeros(len(NDVI_EDGES) - 1, np.int64)],
        "nir": [NIR_EDGES, np.zeros(len(NIR_EDGES) - 1, np.int64), np.zeros(len(NIR_EDGES) - 1, np.int64)],
    }
    for scene, prob in zip(scene_list, probs):
        pred = prob >= threshold
        red, nir_band = scene.msi[0], scene.msi[3]
        for key, index in (("ndvi", ndvi(red, nir_band)), ("nir", nir_band)):
            fn, fp = misclass_histogram(pred, scene.label, index, scene.validity, acc[key][0])
            acc[key][1] += fn
            acc[key][2] += fp
    return {k: (v[0], v[1], v[2]) for k, v in acc.items()}


# -- gate/decoder diagnostics --------------------------------------------------------


@dataclass
class Diagnostics:
    scene_id: str
    states: list  # SMGState per level, ascending
    prehead_fused: np.ndarray  # (C,H,W)
    prehead_sar: np.ndarray
    mse_map: np.ndarray  # (H,W) channel-mean squared difference


def diagnostics(model, scene: Scene, stats) -> Diagnostics:
    """Gate/mask/SMG pyramid plus the decoder-divergence MSE map for one scene."""
    sar, msi, val, _ = prepare_inputs(scene, stats)
    with no_grad():
        out = model.forward(sar[None], msi[None], val[None], training=False, collect=True)
    if out.smg_states is None or out.prehead_sar is None:
        raise DataError("diagnostics requires a dual-stream model with both decoder paths")
    fused = out.prehead.data[0]
    sar_only = out.prehead_sar.data[0]
    diff = fused.astype(np.float64) - sar_only.astype(np.float64)
    mse = (diff * diff).mean(axis=0)
    return Diagnostics(scene.scene_id, out.smg_states, fused, sar_only, mse)


def export_diagnostics(path, diag: Diagnostics, meta: dict | None = None) -> None:
    entries: dict[str, np.ndarray] = {}
    for st in diag.states:
        entries[f"smg.level{st.level}.gate"] = st.gate[0]
        entries[f"smg.level{st.level}.mask"] = st.mask[0]
        entries[f"smg.level{st.level}.smg"] = st.smg[0]
    entries["prehead.fused"] = diag.prehead_fused
    entries["prehead.sar"] = diag.prehead_sar
    entries["mse"] = diag.mse_map
    info = {"kind": "smagnet-diagnostics", "scene_id": diag.scene_id}
    if meta:
        info.update(meta)
    write_container(path, entries, info)
