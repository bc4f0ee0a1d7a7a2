"""Spatially masked adaptive gated fusion of the two modality pyramids.

Per level: a 1x1 convolution over the concatenated features yields a
single-channel gate G in (0,1); the validity mask, average-pooled to the
level's extents, yields the spatial mask SM; their product SMG blends the
two features. In the default complementary mode

    fused = f_sar (x) (1 - SMG)  (+)  f_msi (x) SMG

so wherever SM is exactly 0 the fused feature equals the SAR feature
bit-for-bit and no gradient reaches the MSI side. Independent and cross
modes keep separate gates per stream and apply SM to the MSI-side gate only,
which annihilates the MSI contribution over missing pixels but still gates
the SAR stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .layers import init_conv

FUSION_MODES = ("complementary", "independent", "cross")


@dataclass(frozen=True)
class FusionConfig:
    mode: str = "complementary"
    spatial_mask: bool = True

    def validate(self) -> None:
        if self.mode not in FUSION_MODES:
            raise ValueError(f"fusion mode must be one of {FUSION_MODES}, got {self.mode!r}")


@dataclass
class SMGState:
    """Per-level gate / mask / product record for diagnostics export."""

    level: int
    gate: np.ndarray  # (B,1,h,w); MSI-side gate for two-gate modes
    mask: np.ndarray  # (B,1,h,w); ones when spatial masking is disabled
    smg: np.ndarray  # (B,1,h,w)


def build_mask_pyramid(validity: np.ndarray, shapes: list[tuple[int, int]]) -> list[np.ndarray]:
    """Average-pool a (B,H,W) validity mask to each pyramid level's extents.

    Every level extent must divide the input extent exactly; a level value is
    the mean of its (H/h)x(W/w) block, so it is 0 exactly where the block is
    entirely missing and 1 exactly where it is entirely valid.
    """
    v = np.asarray(validity, np.float32)
    if v.ndim == 2:
        v = v[None]
    b, h, w = v.shape
    out = []
    for lh, lw in shapes:
        if h % lh or w % lw:
            raise ValueError(f"mask pyramid: level {lh}x{lw} does not divide input {h}x{w}")
        fy, fx = h // lh, w // lw
        pooled = v.reshape(b, lh, fy, lw, fx).mean(axis=(2, 4), dtype=np.float32)
        out.append(pooled[:, None])
    return out


def gate_map(f_sar: Tensor, f_msi: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Single-channel sigmoid gate from the concatenated features (1x1 conv)."""
    return ops.sigmoid(ops.conv2d(ops.concat_channels(f_sar, f_msi), w, b))


def smag_fuse(f_sar, f_msi, gates, mask: np.ndarray | None, mode: str = "complementary"):
    """Blend one pyramid level; returns (fused, SMGState).

    ``gates`` is the single gate tensor in complementary mode, or the
    (sar_gate, msi_gate) pair for independent/cross. ``mask`` is the pooled
    validity for this level, or None when spatial masking is disabled.
    """
    if mask is None:
        mask_t = Tensor(np.ones((f_sar.shape[0], 1) + f_sar.shape[2:], f_sar.data.dtype))
    else:
        mask_t = Tensor(np.asarray(mask, f_sar.data.dtype))
    if mode == "complementary":
        g = gates
        smg = mask_t * g
        fused = f_sar * (1.0 - smg) + f_msi * smg
    elif mode in ("independent", "cross"):
        g_sar, g_msi = gates
        g = g_msi
        smg = mask_t * g_msi
        fused = f_sar * g_sar + f_msi * smg
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    return fused, SMGState(0, g.data, mask_t.data, smg.data)


class FusionModule:
    """Per-level gate parameters plus the full pyramid fusion pass."""

    def __init__(self, channels: tuple, cfg: FusionConfig, seed: int, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.channels = tuple(channels)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        for lvl, c in enumerate(self.channels, start=1):
            if cfg.mode == "complementary":
                init_conv(self.params, rng, f"level{lvl}.gate", 1, 2 * c, 1, dtype, bias=True)
            elif cfg.mode == "independent":
                init_conv(self.params, rng, f"level{lvl}.gate_sar", 1, 2 * c, 1, dtype, bias=True)
                init_conv(self.params, rng, f"level{lvl}.gate_msi", 1, 2 * c, 1, dtype, bias=True)
            else:  # cross: each gate reads the opposite single feature
                init_conv(self.params, rng, f"level{lvl}.gate_sar", 1, c, 1, dtype, bias=True)
                init_conv(self.params, rng, f"level{lvl}.gate_msi", 1, c, 1, dtype, bias=True)

    def __call__(self, sar_pyr: list[Tensor], msi_pyr: list[Tensor], validity: np.ndarray):
        """Fuse the pyramids; returns (fused levels, SMGState per level)."""
        if len(sar_pyr) != len(self.channels) or len(msi_pyr) != len(self.channels):
            raise ValueError(
                f"fusion expects {len(self.channels)} levels, got "
                f"{len(sar_pyr)}/{len(msi_pyr)}"
            )
        p = self.params
        masks: list[np.ndarray | None]
        if self.cfg.spatial_mask:
            masks = build_mask_pyramid(validity, [t.shape[2:] for t in sar_pyr])
        else:
            masks = [None] * len(sar_pyr)
        fused, states = [], []
        for i, (fs, fm, mask) in enumerate(zip(sar_pyr, msi_pyr, masks)):
            lvl = i + 1
            if self.cfg.mode == "complementary":
                gates = gate_map(fs, fm, p[f"level{lvl}.gate.w"], p[f"level{lvl}.gate.b"])
            elif self.cfg.mode == "independent":
                gates = (
                    gate_map(fs, fm, p[f"level{lvl}.gate_sar.w"], p[f"level{lvl}.gate_sar.b"]),
                    gate_map(fs, fm, p[f"level{lvl}.gate_msi.w"], p[f"level{lvl}.gate_msi.b"]),
                )
            else:
                gates = (
                    ops.sigmoid(ops.conv2d(fm, p[f"level{lvl}.gate_sar.w"], p[f"level{lvl}.gate_sar.b"])),
                    ops.sigmoid(ops.conv2d(fs, p[f"level{lvl}.gate_msi.w"], p[f"level{lvl}.gate_msi.b"])),
                )
            out, st = smag_fuse(fs, fm, gates, mask, self.cfg.mode)
            st.level = lvl
            fused.append(out)
            states.append(st)
        return fused, states
