"""Training loop: weighted dual-head BCE, Adam, augmentation, checkpoints.

All randomness (shuffling, augmentation draws) comes from named child
streams of the run seed, so identical configurations reproduce byte-
identical histories and checkpoints on the same machine.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .autodiff.serialization import read_container, write_container
from .data import Dataset, child_seed, prepare_inputs
from .errors import ConfigError, DataError, NumericError
from .models import ModelConfig, build_model

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss_total", "val_loss_sar", "val_loss_fused")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 0.0
    batch_size: int | None = None  # preset default: 16 (paper) / 8 (tiny)
    epochs: int | None = None  # preset default: 200 (paper) / 60 (tiny)
    loss_weight: float = 0.5  # w in w*BCE(sar) + (1-w)*BCE(fused)
    crop: int | None = None
    flip_horizontal: bool = True
    flip_vertical: bool = True
    seed: int = 0

    def resolve(self, preset: str) -> "TrainConfig":
        batch = self.batch_size if self.batch_size is not None else (8 if preset == "tiny" else 16)
        epochs = self.epochs if self.epochs is not None else (60 if preset == "tiny" else 200)
        out = dataclasses.replace(self, batch_size=batch, epochs=epochs)
        out.validate()
        return out

    def validate(self) -> None:
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.loss_weight <= 1.0:
            raise ConfigError(f"loss_weight must lie in [0,1], got {self.loss_weight}")
        if self.crop is not None and self.crop % 32 != 0:
            raise ConfigError(f"crop size must be a multiple of 32, got {self.crop}")


def total_loss(logits_sar: Tensor, logits_fused: Tensor, target: Tensor, w: float):
    """Weighted two-head objective; returns (loss, bce_sar, bce_fused)."""
    l_sar = ops.bce_with_logits(logits_sar, target)
    l_fused = ops.bce_with_logits(logits_fused, target)
    return w * l_sar + (1.0 - w) * l_fused, l_sar, l_fused


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def for_params(params: dict[str, Tensor]) -> "AdamState":
        return AdamState(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One bias-corrected Adam update in place; params without grads are skipped."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for k, p in params.items():
        g = p.grad
        if g is None:
            continue
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# -- augmentation --------------------------------------------------------------


def augment(rng: np.random.Generator, rasters: tuple, cfg: TrainConfig) -> tuple:
    """Random crop/flip applied with one draw set across all rasters.

    Every raster must share trailing (H,W) extents; channel-leading arrays
    are handled transparently. Draw order is fixed (crop row, crop col,
    flip H, flip V) so streams stay aligned across configurations.
    """
    h, w = rasters[0].shape[-2:]
    out = list(rasters)
    if cfg.crop is not None:
        if cfg.crop > h or cfg.crop > w:
            raise ConfigError(f"crop {cfg.crop} exceeds scene extents {h}x{w}")
        top = int(rng.integers(0, h - cfg.crop + 1))
        left = int(rng.integers(0, w - cfg.crop + 1))
        out = [r[..., top : top + cfg.crop, left : left + cfg.crop] for r in out]
    if cfg.flip_horizontal and rng.random() < 0.5:
        out = [r[..., ::-1] for r in out]
    if cfg.flip_vertical and rng.random() < 0.5:
        out = [r[..., ::-1, :] for r in out]
    return tuple(np.ascontiguousarray(r) for r in out)


# -- the loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_val_loss: float
    threshold: float
    threshold_warning: bool
    adam: AdamState


def _model_loss(model, out, target: Tensor, w: float):
    if out.logits_sar is not None:
        return total_loss(out.logits_sar, out.logits, target, w)
    loss = ops.bce_with_logits(out.logits, target)
    return loss, loss, loss


def _stack_batch(items: list[tuple]):
    sar = np.stack([it[0] for it in items])
    msi = np.stack([it[1] for it in items])
    val = np.stack([it[2] for it in items])
    lab = np.stack([it[3] for it in items])[:, None]
    return sar, msi, val, lab


def _split_losses(model, prepared: list[tuple], batch_size: int, w: float):
    total = l_sar = l_fused = 0.0
    with no_grad():
        for i in range(0, len(prepared), batch_size):
            chunk = prepared[i : i + batch_size]
            sar, msi, val, lab = _stack_batch(chunk)
            out = model.forward(sar, msi, val, training=False)
            loss, ls, lf = _model_loss(model, out, Tensor(lab), w)
            total += loss.item() * len(chunk)
            l_sar += ls.item() * len(chunk)
            l_fused += lf.item() * len(chunk)
    n = len(prepared)
    return total / n, l_sar / n, l_fused / n


def predict_probs(model, prepared: list[tuple], batch_size: int = 16, head: str = "fused") -> np.ndarray:
    """Probabilities from the fused (primary) or SAR head, stacked (N,H,W)."""
    outs = []
    with no_grad():
        for i in range(0, len(prepared), batch_size):
            sar, msi, val, _ = _stack_batch(prepared[i : i + batch_size])
            out = model.forward(sar, msi, val, training=False)
            if head == "fused":
                z = out.logits.data[:, 0]
            elif head == "sar":
                if out.logits_sar is None:
                    raise ValueError(f"model {model.cfg.arch} has no separate sar head")
                z = out.logits_sar.data[:, 0]
            else:
                raise ValueError(f"unknown head {head!r} (use fused or sar)")
            outs.append(np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z))))
    return np.concatenate(outs).astype(np.float32)


def select_threshold(probs: np.ndarray, labels: np.ndarray) -> tuple[float, bool]:
    """Threshold from the unique predicted probabilities maximizing IoU.

    Predictions are positive where prob >= threshold; ties in IoU break
    toward the smallest candidate. Degenerate labels (single class) return
    the 0.5 fallback with a warning flag.
    """
    probs = np.asarray(probs).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if probs.shape != y.shape:
        raise ValueError(f"select_threshold shapes differ: {probs.shape} vs {y.shape}")
    if y.all() or not y.any():
        return 0.5, True
    order = np.argsort(-probs, kind="stable")
    p = probs[order]
    ys = y[order]
    tp = np.cumsum(ys)
    fp = np.cumsum(~ys)
    pos = int(tp[-1])
    idx = np.append(np.nonzero(np.diff(p))[0], len(p) - 1)  # last slot per unique value
    iou = tp[idx] / (pos + fp[idx])
    pick = np.nonzero(iou == iou.max())[0][-1]  # descending candidates: last = smallest
    return float(p[idx][pick]), False


def train(model, dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    """Train on the dataset's train split, track best epoch by val loss.

    The model is left holding the best-validation-loss weights; the selected
    decision threshold is computed on the validation split with those
    weights.
    """
    cfg = cfg.resolve(model.cfg.preset)
    prepared = {
        name: [prepare_inputs(s, dataset.stats) for s in dataset.split(name)]
        for name in ("train", "val")
    }
    if not prepared["train"] or not prepared["val"]:
        raise DataError("training requires non-empty train and val splits")
    rng_shuffle = np.random.default_rng(child_seed(cfg.seed, "shuffle"))
    rng_aug = np.random.default_rng(child_seed(cfg.seed, "augment"))
    adam = AdamState.for_params(model.params)
    w = cfg.loss_weight
    n = len(prepared["train"])
    history: list[dict] = []
    best = (float("inf"), -1)
    snapshot = None

    for epoch in range(1, cfg.epochs + 1):
        order = rng_shuffle.permutation(n)
        epoch_loss = 0.0
        for bi in range(0, n, cfg.batch_size):
            batch = [augment(rng_aug, prepared["train"][i], cfg) for i in order[bi : bi + cfg.batch_size]]
            sar, msi, val, lab = _stack_batch(batch)
            out = model.forward(sar, msi, val, training=True)
            loss, _, _ = _model_loss(model, out, Tensor(lab), w)
            lv = loss.item()
            if not np.isfinite(lv):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch}, batch {bi // cfg.batch_size}"
                )
            loss.backward()
            adam_step(model.params, adam, cfg.lr, weight_decay=cfg.weight_decay)
            zero_grads(model.params)
            epoch_loss += lv * len(batch)
        vt, vs, vf = _split_losses(model, prepared["val"], cfg.batch_size, w)
        if not np.isfinite(vt):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        history.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss / n,
                "val_loss_total": vt,
                "val_loss_sar": vs,
                "val_loss_fused": vf,
            }
        )
        if vt < best[0]:
            best = (vt, epoch)
            snapshot = (
                {k: p.data.copy() for k, p in model.params.items()},
                {k: v.copy() for k, v in model.state.items()},
                {k: v.copy() for k, v in adam.m.items()},
                {k: v.copy() for k, v in adam.v.items()},
                adam.t,
            )

    params_bak, state_bak, m_bak, v_bak, t_bak = snapshot
    for k, p in model.params.items():
        p.data = params_bak[k]
    for k in model.state:
        model.state[k][...] = state_bak[k]
    best_adam = AdamState(m_bak, v_bak, t_bak)

    probs = predict_probs(model, prepared["val"], cfg.batch_size)
    labels = np.stack([it[3] for it in prepared["val"]])
    threshold, warn = select_threshold(probs, labels)
    return TrainResult(history, best[1], best[0], threshold, warn, best_adam)


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_KIND = "smagnet-checkpoint"


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    params: dict[str, np.ndarray]
    state: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int
    epoch: int
    best_val_loss: float
    threshold: float
    threshold_warning: bool
    seed: int


def save_checkpoint(path, model, result: TrainResult, seed: int) -> None:
    entries: dict[str, np.ndarray] = {}
    for k, p in model.params.items():
        entries[k] = p.data
    for k, v in model.state.items():
        entries[k] = v
    for k, v in result.adam.m.items():
        entries[f"adam.m.{k}"] = v
    for k, v in result.adam.v.items():
        entries[f"adam.v.{k}"] = v
    meta = {
        "kind": CHECKPOINT_KIND,
        "model": model.cfg.to_json(),
        "epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "threshold": result.threshold,
        "threshold_warning": result.threshold_warning,
        "adam_t": result.adam.t,
        "seed": int(seed),
    }
    write_container(path, entries, meta)


def load_checkpoint(path) -> Checkpoint:
    entries, meta = read_container(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise DataError(f"{path}: not a checkpoint container")
    params, state, adam_m, adam_v = {}, {}, {}, {}
    for k, v in entries.items():
        if k.startswith("adam.m."):
            adam_m[k[len("adam.m.") :]] = v
        elif k.startswith("adam.v."):
            adam_v[k[len("adam.v.") :]] = v
        elif k.endswith(".running_mean") or k.endswith(".running_var"):
            state[k] = v
        else:
            params[k] = v
    return Checkpoint(
        ModelConfig.from_json(meta["model"]),
        params,
        state,
        adam_m,
        adam_v,
        int(meta["adam_t"]),
        int(meta["epoch"]),
        float(meta["best_val_loss"]),
        float(meta["threshold"]),
        bool(meta["threshold_warning"]),
        int(meta["seed"]),
    )


def restore_model(ckpt: Checkpoint):
    """Rebuild the checkpointed model; forward passes match bit-for-bit."""
    model = build_model(ckpt.model_cfg, ckpt.seed)
    missing = set(model.params) ^ set(ckpt.params)
    if missing:
        raise DataError(f"checkpoint parameter keys do not match model: {sorted(missing)[:4]}")
    for k, p in model.params.items():
        p.data = ckpt.params[k].copy()
    for k in model.state:
        if k not in ckpt.state:
            raise DataError(f"checkpoint missing state entry {k}")
        model.state[k][...] = ckpt.state[k]
    return model
