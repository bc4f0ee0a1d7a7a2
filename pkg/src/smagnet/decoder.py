"""Weight-shared decoder over one or two feature pyramids, plus the 1x1 head.

Five stages: each up-convs (kernel 2, stride 2) and refines with two
convolution+ReLU layers; stages 1-4 concatenate the skip at pyramid level
5-k before refining, stage 5 has no skip and restores full resolution (the
pyramid tops out at 1/2 scale). The refining convolutions default to 1x1 so
a decoded pixel depends only on the pyramid cells that contain it — that
locality is what makes the two decoding paths agree exactly over fully
missing regions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .layers import init_conv


@dataclass(frozen=True)
class DecoderConfig:
    widths: tuple = (64, 32, 16, 16, 8)
    conv_kernel: int = 1

    @staticmethod
    def tiny() -> "DecoderConfig":
        return DecoderConfig()

    @staticmethod
    def paper() -> "DecoderConfig":
        return DecoderConfig(widths=(256, 128, 64, 32, 16))

    def validate(self) -> None:
        if len(self.widths) != 5:
            raise ValueError(f"decoder needs 5 stage widths, got {self.widths}")
        if self.conv_kernel % 2 != 1:
            raise ValueError(f"decoder conv kernel must be odd, got {self.conv_kernel}")


def preset_decoder(preset: str) -> DecoderConfig:
    if preset == "tiny":
        return DecoderConfig.tiny()
    if preset == "paper":
        return DecoderConfig.paper()
    raise ValueError(f"unknown decoder preset {preset!r}")


def decoder_block(prev: Tensor, skip: Tensor | None, params: dict, key: str, kernel: int) -> Tensor:
    """Up-conv, optional skip concat, then two conv+ReLU refinements."""
    pad = kernel // 2
    x = ops.conv_transpose2d(prev, params[f"{key}.up.w"], params[f"{key}.up.b"], stride=2)
    if skip is not None:
        if skip.shape[2:] != x.shape[2:]:
            raise ValueError(
                f"{key}: skip extents {skip.shape[2:]} != upsampled {x.shape[2:]}"
            )
        x = ops.concat_channels(x, skip)
    x = ops.relu(ops.conv2d(x, params[f"{key}.conv1.w"], params[f"{key}.conv1.b"], pad=pad))
    x = ops.relu(ops.conv2d(x, params[f"{key}.conv2.w"], params[f"{key}.conv2.b"], pad=pad))
    return x


def init_decoder_params(
    cfg: DecoderConfig, enc_channels: tuple, seed: int, dtype=np.float32
) -> dict[str, Tensor]:
    cfg.validate()
    params: dict[str, Tensor] = {}
    rng = np.random.default_rng(seed)
    prev = enc_channels[4]
    for k in range(1, 6):
        width = cfg.widths[k - 1]
        skip_ch = enc_channels[4 - k] if k <= 4 else 0
        init_conv(params, rng, f"stage{k}.up", width, prev, 2, dtype, bias=True, transpose=True)
        kk = cfg.conv_kernel
        init_conv(params, rng, f"stage{k}.conv1", width, width + skip_ch, kk, dtype, bias=True)
        init_conv(params, rng, f"stage{k}.conv2", width, width, kk, dtype, bias=True)
        prev = width
    init_conv(params, rng, "head", 1, cfg.widths[4], 1, dtype, bias=True)
    return params


class Decoder:
    """Decodes a pyramid to (logits, pre-head features); parameters reusable
    across any number of pyramids (the weight-shared dual path)."""

    def __init__(self, cfg: DecoderConfig, enc_channels: tuple, seed: int, dtype=np.float32):
        self.cfg = cfg
        self.enc_channels = tuple(enc_channels)
        self.params = init_decoder_params(cfg, self.enc_channels, seed, dtype)

    def __call__(self, pyramid: list[Tensor]) -> tuple[Tensor, Tensor]:
        if len(pyramid) != 5:
            raise ValueError(f"decoder expects a 5-level pyramid, got {len(pyramid)}")
        x = pyramid[4]
        for k in range(1, 5):
            x = decoder_block(x, pyramid[4 - k], self.params, f"stage{k}", self.cfg.conv_kernel)
        x = decoder_block(x, None, self.params, "stage5", self.cfg.conv_kernel)
        logits = ops.conv2d(x, self.params["head.w"], self.params["head.b"])
        return logits, x
