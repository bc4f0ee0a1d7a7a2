"""Synthetic paired SAR/MSI flood scenes: generation, statistics, splits, I/O.

Scenes are fully determined by a master seed: every raster draws from its own
named child stream derived with a splitmix64 chain, so regenerating any scene
is bit-identical and independent of generation order.

A scene holds:
  sar      (2,H,W) float32, dB-like backscatter (VV, VH); water is darker and
           multiplicative gamma speckle is applied in the linear domain
  msi      (4,H,W) float32 reflectances in [0,1] (red, green, blue, nir); NIR
           is depressed over water; invalid pixels carry the fill value
  validity (H,W) uint8, 0 under synthetic cloud cover
  label    (H,W) uint8 water mask
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import serialization
from .errors import DataError

BAND_NAMES = ("vv", "vh", "red", "green", "blue", "nir")

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def child_seed(master: int, *tags) -> int:
    """Derive a named child seed from a master seed (splitmix64 chain).

    Tags may be ints or strings; strings are folded through blake2s so the
    derivation is stable across processes and platforms.
    """
    s = master & _MASK64
    for tag in tags:
        if isinstance(tag, str):
            tag = int.from_bytes(
                hashlib.blake2s(tag.encode("utf-8"), digest_size=8).digest(), "little"
            )
        s = splitmix64(s ^ (int(tag) & _MASK64))
    return s


@dataclass(frozen=True)
class GenParams:
    """Knobs for scene synthesis. Spatial extents must be multiples of 32."""

    size: int = 64
    water_fraction_range: tuple[float, float] = (0.05, 0.45)
    speckle_shape: float = 4.0
    water_offset_db: float = -8.0
    nir_absorption: float = 0.35
    cloud_coverage_range: tuple[float, float] = (0.0, 0.4)
    fill_value: float = 0.0
    # texture shaping (not part of the protocol contract)
    label_cell: int = 16
    terrain_cell: int = 8
    terrain_db_mean: float = -11.0
    terrain_db_amp: float = 2.5
    vh_offset_db: float = -5.0
    reflectance_noise: float = 0.02

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["water_fraction_range"] = list(self.water_fraction_range)
        d["cloud_coverage_range"] = list(self.cloud_coverage_range)
        return d


@dataclass
class Scene:
    scene_id: str
    sar: np.ndarray
    msi: np.ndarray
    validity: np.ndarray
    label: np.ndarray

    @property
    def size(self) -> int:
        return self.sar.shape[-1]

    def water_fraction(self) -> float:
        return float(self.label.mean())


@dataclass
class NormStats:
    """Per-band mean/std over the training split; MSI over valid pixels only."""

    mean: np.ndarray  # (6,) float64
    std: np.ndarray  # (6,) float64

    def to_json(self) -> dict:
        return {
            "bands": list(BAND_NAMES),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
        }

    @staticmethod
    def from_json(d: dict) -> "NormStats":
        return NormStats(np.asarray(d["mean"], np.float64), np.asarray(d["std"], np.float64))


@dataclass
class Dataset:
    scenes: dict[str, Scene]
    splits: dict[str, list[str]]
    stats: NormStats
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Scene]:
        return [self.scenes[i] for i in self.splits[name]]


# -- noise fields -------------------------------------------------------------


def _value_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    """Bilinear value noise: random lattice, interpolated to pixel centres."""
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.standard_normal((gh, gw))
    ys = (np.arange(h) + 0.5) / cell
    xs = (np.arange(w) + 0.5) / cell
    y0 = ys.astype(np.int64)
    x0 = xs.astype(np.int64)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g = grid[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
    g += grid[np.ix_(y0, x0 + 1)] * (1 - fy) * fx
    g += grid[np.ix_(y0 + 1, x0)] * fy * (1 - fx)
    g += grid[np.ix_(y0 + 1, x0 + 1)] * fy * fx
    return g


def _smooth_field(rng: np.random.Generator, size: int, cell: int) -> np.ndarray:
    f = _value_noise(rng, size, size, cell) + 0.5 * _value_noise(rng, size, size, max(cell // 2, 2))
    f -= f.mean()
    sd = f.std()
    return f / (sd if sd > 0 else 1.0)


def _threshold_for_fraction(field: np.ndarray, target: float, seed: int) -> float:
    """Bisect a threshold so that mean(field > t) hits target within 0.02."""
    lo, hi = float(field.min()) - 1.0, float(field.max()) + 1.0
    mid = 0.5 * (lo + hi)
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        frac = float((field > mid).mean())
        if abs(frac - target) <= 0.002:
            return mid
        if frac > target:
            lo = mid
        else:
            hi = mid
    if abs(float((field > mid).mean()) - target) <= 0.02:
        return mid
    raise DataError(
        f"scene seed {seed}: water fraction {target:.3f} unreachable after 100 "
        f"threshold-search iterations"
    )


# -- scene synthesis ----------------------------------------------------------


def generate_scene(seed: int, params: GenParams, scene_id: str | None = None) -> Scene:
    """Synthesize one scene; bit-identical for identical (seed, params)."""
    size = params.size
    if size % 32 != 0:
        raise DataError(f"scene size {size} must be a multiple of 32")
    rng_label = np.random.default_rng(child_seed(seed, "label"))
    rng_terrain = np.random.default_rng(child_seed(seed, "terrain"))
    rng_speckle = np.random.default_rng(child_seed(seed, "speckle"))
    rng_msi = np.random.default_rng(child_seed(seed, "msi"))
    rng_cloud = np.random.default_rng(child_seed(seed, "clouds"))

    target = float(rng_label.uniform(*params.water_fraction_range))
    field = _smooth_field(rng_label, size, params.label_cell)
    label = (field > _threshold_for_fraction(field, target, seed)).astype(np.uint8)

    terrain = _smooth_field(rng_terrain, size, params.terrain_cell)
    water = label.astype(np.float64)

    # SAR: dB-like terrain minus the water offset inside the label, speckled
    # multiplicatively in the linear-intensity domain
    base_vv = params.terrain_db_mean + params.terrain_db_amp * terrain
    base_vh = base_vv + params.vh_offset_db
    sar = np.empty((2, size, size), np.float32)
    for i, base in enumerate((base_vv, base_vh)):
        db = base + params.water_offset_db * water
        lin = np.power(10.0, db / 10.0)
        lin *= rng_speckle.gamma(params.speckle_shape, 1.0 / params.speckle_shape, (size, size))
        sar[i] = (10.0 * np.log10(np.maximum(lin, 1e-12))).astype(np.float32)

    # MSI: four reflectances correlated through the shared terrain field,
    # NIR reduced by the absorption depth over water
    t01 = np.clip(0.5 + 0.25 * terrain, 0.0, 1.0)
    noise = lambda: params.reflectance_noise * rng_msi.standard_normal((size, size))
    red = 0.12 + 0.25 * t01 + noise()
    green = 0.16 + 0.28 * t01 + noise()
    blue = 0.10 + 0.20 * t01 + noise()
    nir = 0.30 + 0.45 * t01 + noise() - params.nir_absorption * water
    msi = np.clip(np.stack([red, green, blue, nir]), 0.0, 1.0).astype(np.float32)

    coverage = float(rng_cloud.uniform(*params.cloud_coverage_range))
    if coverage <= 0.0:
        validity = np.ones((size, size), np.uint8)
    else:
        cfield = _smooth_field(rng_cloud, size, params.label_cell)
        cut = float(np.quantile(cfield, 1.0 - coverage))
        validity = (cfield < cut).astype(np.uint8)
    msi[:, validity == 0] = params.fill_value

    sid = scene_id if scene_id is not None else f"s{seed & _MASK64:016x}"
    return Scene(sid, sar, msi, validity, label)


# -- statistics and model-input preparation -----------------------------------


def compute_norm_stats(scenes: list[Scene]) -> NormStats:
    """Per-band mean/std in float64; MSI bands use valid pixels only."""
    if not scenes:
        raise DataError("compute_norm_stats: empty scene list")
    sums = np.zeros(6, np.float64)
    sqs = np.zeros(6, np.float64)
    counts = np.zeros(6, np.float64)
    for sc in scenes:
        sar = sc.sar.astype(np.float64)
        sums[:2] += sar.sum(axis=(1, 2))
        sqs[:2] += (sar**2).sum(axis=(1, 2))
        counts[:2] += sar[0].size
        valid = sc.validity.astype(bool)
        if valid.any():
            msi = sc.msi[:, valid].astype(np.float64)
            sums[2:] += msi.sum(axis=1)
            sqs[2:] += (msi**2).sum(axis=1)
            counts[2:] += msi.shape[1]
    if (counts == 0).any():
        raise DataError("compute_norm_stats: a band has no valid pixels in this split")
    mean = sums / counts
    var = np.maximum(sqs / counts - mean**2, 0.0)
    std = np.maximum(np.sqrt(var), 1e-6)
    return NormStats(mean, std)


def prepare_inputs(scene: Scene, stats: NormStats):
    """Normalized float32 model inputs; invalid MSI pixels re-filled with 0."""
    mean = stats.mean.astype(np.float32)
    std = stats.std.astype(np.float32)
    sar = (scene.sar - mean[:2, None, None]) / std[:2, None, None]
    msi = (scene.msi - mean[2:, None, None]) / std[2:, None, None]
    validity = scene.validity.astype(np.float32)
    msi = msi * validity[None]
    return sar.astype(np.float32), msi.astype(np.float32), validity, scene.label.astype(np.float32)


# -- splitting ----------------------------------------------------------------


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer apportionment of `total` proportional to `weights`."""
    if total <= 0 or weights.sum() == 0:
        return np.zeros(len(weights), np.int64)
    quota = weights * (total / weights.sum())
    base = np.floor(quota).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(quota - base), kind="stable")
        base[order[:short]] += 1
    return base


def stratified_split(
    scenes: list[Scene], seed: int, ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
) -> tuple[dict[str, list[str]], str | None]:
    """6:2:2 split stratified on water-fraction quintiles.

    Validation and test sizes are floored at the global level
    (floor(ratio*N) each, remainder to train) and apportioned across
    quintiles by largest remainder, so each split's quintile histogram is
    within one scene of the global proportion. Fewer than 5 scenes falls
    back to a plain random split and returns a warning string.
    """
    n = len(scenes)
    if n < 2:
        raise DataError(f"stratified_split: need at least 2 scenes, got {n}")
    rng = np.random.default_rng(child_seed(seed, "split"))
    ids = np.array([s.scene_id for s in scenes])
    n_val = int(np.floor(ratios[1] * n))
    n_test = int(np.floor(ratios[2] * n))

    if n < 5:
        order = rng.permutation(n)
        val = ids[order[:n_val]]
        test = ids[order[n_val : n_val + n_test]]
        train = ids[order[n_val + n_test :]]
        splits = {
            "train": sorted(train.tolist()),
            "val": sorted(val.tolist()),
            "test": sorted(test.tolist()),
        }
        return splits, "fewer scenes than strata; plain random split"

    fracs = np.array([s.water_fraction() for s in scenes])
    bounds = np.quantile(fracs, [0.2, 0.4, 0.6, 0.8])
    strata = np.searchsorted(bounds, fracs, side="right")
    sizes = np.bincount(strata, minlength=5).astype(np.float64)
    val_q = _largest_remainder(sizes, n_val)
    test_q = _largest_remainder(sizes, n_test)
    # guard degenerate strata: never draw more than the stratum holds
    for q in range(5):
        over = val_q[q] + test_q[q] - int(sizes[q])
        if over > 0:
            take = min(over, test_q[q])
            test_q[q] -= take
            val_q[q] -= over - take

    train, val, test = [], [], []
    for q in range(5):
        members = ids[strata == q]
        members = members[rng.permutation(len(members))]
        v, t = int(val_q[q]), int(test_q[q])
        val.extend(members[:v])
        test.extend(members[v : v + t])
        train.extend(members[v + t :])
    splits = {"train": sorted(train), "val": sorted(val), "test": sorted(test)}
    return splits, None


# -- dataset assembly and disk layout -----------------------------------------

MANIFEST_VERSION = 1
_RASTER_FILES = ("sar.bin", "msi.bin", "validity.bin", "label.bin")


def generate_dataset(n_scenes: int, seed: int, params: GenParams) -> Dataset:
    if n_scenes < 2:
        raise DataError(f"dataset needs at least 2 scenes, got {n_scenes}")
    scenes = [
        generate_scene(child_seed(seed, "scene", i), params, scene_id=f"{i:05d}")
        for i in range(n_scenes)
    ]
    splits, warning = stratified_split(scenes, seed)
    by_id = {s.scene_id: s for s in scenes}
    stats = compute_norm_stats([by_id[i] for i in splits["train"]])
    meta = {
        "format_version": MANIFEST_VERSION,
        "seed": int(seed),
        "scene_count": n_scenes,
        "params": params.to_json(),
        "warning": warning,
    }
    return Dataset({s.scene_id: s for s in scenes}, splits, stats, meta)


def write_dataset(root: str, ds: Dataset) -> None:
    os.makedirs(os.path.join(root, "scenes"), exist_ok=True)
    manifest = dict(ds.meta)
    manifest["format_version"] = MANIFEST_VERSION
    manifest["splits"] = ds.splits
    manifest["counts"] = {k: len(v) for k, v in ds.splits.items()}
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(root, "norm_stats.json"), "w") as f:
        json.dump(ds.stats.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    for sid, sc in ds.scenes.items():
        d = os.path.join(root, "scenes", sid)
        os.makedirs(d, exist_ok=True)
        serialization.write_tensor(os.path.join(d, "sar.bin"), sc.sar)
        serialization.write_tensor(os.path.join(d, "msi.bin"), sc.msi)
        serialization.write_tensor(os.path.join(d, "validity.bin"), sc.validity)
        serialization.write_tensor(os.path.join(d, "label.bin"), sc.label)


def read_dataset(root: str) -> Dataset:
    mpath = os.path.join(root, "manifest.json")
    if not os.path.exists(mpath):
        raise DataError(f"{root}: no manifest.json (not a dataset directory)")
    with open(mpath) as f:
        manifest = json.load(f)
    version = manifest.get("format_version")
    if version != MANIFEST_VERSION:
        raise DataError(f"{root}: manifest format_version {version} != {MANIFEST_VERSION}")
    with open(os.path.join(root, "norm_stats.json")) as f:
        stats = NormStats.from_json(json.load(f))
    splits = manifest["splits"]
    scenes: dict[str, Scene] = {}
    for sid in (i for split in splits.values() for i in split):
        d = os.path.join(root, "scenes", sid)
        try:
            rasters = [serialization.read_tensor(os.path.join(d, name)) for name in _RASTER_FILES]
        except (OSError, ValueError) as exc:
            raise DataError(f"scene {sid}: {exc}") from exc
        scenes[sid] = Scene(sid, *rasters)
    meta = {k: v for k, v in manifest.items() if k not in ("splits", "counts")}
    return Dataset(scenes, splits, stats, meta)
