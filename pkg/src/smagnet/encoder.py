"""Residual encoders producing five-level feature pyramids.

A stem convolution halves the input once; four residual stages halve it
again each (the first via max-pool), yielding features at 1/2 .. 1/32 of the
input extents. The two modality encoders share this architecture but are
instantiated with disjoint parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .layers import apply_norm, conv, init_conv, init_norm


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int
    channels: tuple = (16, 32, 64, 128, 256)
    blocks_per_stage: tuple = (1, 1, 1, 1, 1)
    block: str = "basic"  # "basic" | "bottleneck"
    stem_kernel: int = 3

    @staticmethod
    def tiny(in_channels: int) -> "EncoderConfig":
        return EncoderConfig(in_channels)

    @staticmethod
    def paper(in_channels: int) -> "EncoderConfig":
        # ResNet-50-shaped: bottleneck blocks, widths {64,...,2048}, stem 7x7
        return EncoderConfig(
            in_channels,
            channels=(64, 256, 512, 1024, 2048),
            blocks_per_stage=(1, 3, 4, 6, 3),
            block="bottleneck",
            stem_kernel=7,
        )

    def validate(self) -> None:
        if len(self.channels) != 5 or len(self.blocks_per_stage) != 5:
            raise ValueError(
                f"encoder needs 5 stages, got channels={self.channels}, "
                f"blocks_per_stage={self.blocks_per_stage}"
            )
        if self.block not in ("basic", "bottleneck"):
            raise ValueError(f"unknown block kind {self.block!r}")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ValueError("blocks_per_stage entries must be >= 1")


def preset_encoder(preset: str, in_channels: int) -> EncoderConfig:
    if preset == "tiny":
        return EncoderConfig.tiny(in_channels)
    if preset == "paper":
        return EncoderConfig.paper(in_channels)
    raise ValueError(f"unknown encoder preset {preset!r}")


class Encoder:
    """Five-stage residual pyramid encoder over (B,Cin,H,W) inputs."""

    def __init__(self, cfg: EncoderConfig, seed: int, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        ch = cfg.channels

        init_conv(self.params, rng, "stage1.stem", ch[0], cfg.in_channels, cfg.stem_kernel, dtype)
        init_norm(self.params, self.state, "stage1.stem_bn", ch[0], dtype)
        for j in range(1, cfg.blocks_per_stage[0]):
            self._init_block(rng, f"stage1.block{j}", ch[0], ch[0], dtype)
        prev = ch[0]
        for k in range(2, 6):
            width = ch[k - 1]
            for j in range(cfg.blocks_per_stage[k - 1]):
                self._init_block(rng, f"stage{k}.block{j}", prev if j == 0 else width, width, dtype)
            prev = width

    def _init_block(self, rng, key: str, cin: int, cout: int, dtype) -> None:
        p, s = self.params, self.state
        if self.cfg.block == "basic":
            init_conv(p, rng, f"{key}.conv1", cout, cin, 3, dtype)
            init_norm(p, s, f"{key}.bn1", cout, dtype)
            init_conv(p, rng, f"{key}.conv2", cout, cout, 3, dtype)
            init_norm(p, s, f"{key}.bn2", cout, dtype)
        else:
            mid = max(cout // 4, 1)
            init_conv(p, rng, f"{key}.conv1", mid, cin, 1, dtype)
            init_norm(p, s, f"{key}.bn1", mid, dtype)
            init_conv(p, rng, f"{key}.conv2", mid, mid, 3, dtype)
            init_norm(p, s, f"{key}.bn2", mid, dtype)
            init_conv(p, rng, f"{key}.conv3", cout, mid, 1, dtype)
            init_norm(p, s, f"{key}.bn3", cout, dtype)
        if cin != cout:
            init_conv(p, rng, f"{key}.proj", cout, cin, 1, dtype)
            init_norm(p, s, f"{key}.proj_bn", cout, dtype)

    def _block(self, key: str, x: Tensor, stride: int, training: bool) -> Tensor:
        p, s = self.params, self.state
        if self.cfg.block == "basic":
            h = ops.relu(apply_norm(p, s, f"{key}.bn1", conv(p, f"{key}.conv1", x, stride, 1), training))
            h = apply_norm(p, s, f"{key}.bn2", conv(p, f"{key}.conv2", h, 1, 1), training)
        else:
            h = ops.relu(apply_norm(p, s, f"{key}.bn1", conv(p, f"{key}.conv1", x), training))
            h = ops.relu(apply_norm(p, s, f"{key}.bn2", conv(p, f"{key}.conv2", h, stride, 1), training))
            h = apply_norm(p, s, f"{key}.bn3", conv(p, f"{key}.conv3", h), training)
        if f"{key}.proj.w" in p:
            shortcut = apply_norm(p, s, f"{key}.proj_bn", conv(p, f"{key}.proj", x, stride), training)
        elif stride != 1:
            raise ValueError(f"{key}: strided block requires a projection shortcut")
        else:
            shortcut = x
        return ops.relu(h + shortcut)

    def __call__(self, x: Tensor, training: bool = False) -> list[Tensor]:
        """Return the five-level pyramid at 1/2, 1/4, 1/8, 1/16, 1/32 scale."""
        b, c, h, w = x.shape
        if h % 32 or w % 32:
            raise ValueError(f"encoder input extents {h}x{w} must be multiples of 32")
        cfg = self.cfg
        feats: list[Tensor] = []
        x = ops.relu(
            apply_norm(
                self.params,
                self.state,
                "stage1.stem_bn",
                conv(self.params, "stage1.stem", x, 2, cfg.stem_kernel // 2),
                training,
            )
        )
        for j in range(1, cfg.blocks_per_stage[0]):
            x = self._block(f"stage1.block{j}", x, 1, training)
        feats.append(x)
        x = ops.pool2d("max", x, 2, 2)
        for k in range(2, 6):
            for j in range(cfg.blocks_per_stage[k - 1]):
                stride = 2 if (k > 2 and j == 0) else 1
                x = self._block(f"stage{k}.block{j}", x, stride, training)
            feats.append(x)
        return feats
