"""Model assembly: the dual-encoder fusion network and the two baselines.

Every model exposes the same surface — a flat ``params``/``state`` namespace
(the checkpoint key space) and ``forward(sar, msi, validity)`` returning a
``ModelOutput`` — so the training and evaluation loops stay
architecture-agnostic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .data import child_seed
from .decoder import Decoder, preset_decoder
from .encoder import Encoder, preset_encoder
from .errors import ConfigError
from .fusion import FusionConfig, FusionModule, SMGState

ARCHS = ("smagnet", "unet-sar", "unet-concat")
SAR_CHANNELS = 2
MSI_CHANNELS = 4


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "smagnet"
    preset: str = "tiny"
    fusion_mode: str = "complementary"
    spatial_mask: bool = True
    shared_decoder: bool = True
    decoder_conv_kernel: int = 1

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ConfigError(f"model arch must be one of {ARCHS}, got {self.arch!r}")
        if self.preset not in ("tiny", "paper"):
            raise ConfigError(f"model preset must be tiny/paper, got {self.preset!r}")

    def to_json(self) -> dict:
        return {
            "arch": self.arch,
            "preset": self.preset,
            "fusion_mode": self.fusion_mode,
            "spatial_mask": self.spatial_mask,
            "shared_decoder": self.shared_decoder,
            "decoder_conv_kernel": self.decoder_conv_kernel,
        }

    @staticmethod
    def from_json(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass
class ModelOutput:
    logits: Tensor  # primary head (fused for smagnet)
    logits_sar: Tensor | None = None
    smg_states: list[SMGState] = field(default_factory=list)
    prehead: Tensor | None = None
    prehead_sar: Tensor | None = None


def _prefix(into_params: dict, into_state: dict, prefix: str, params: dict, state: dict | None = None):
    for k, v in params.items():
        into_params[f"{prefix}.{k}"] = v
    for k, v in (state or {}).items():
        into_state[f"{prefix}.{k}"] = v


class SMAGNet:
    """Two modality encoders, per-level masked gated fusion, shared decoder."""

    def __init__(self, cfg: ModelConfig, seed: int, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        enc_cfg_sar = preset_encoder(cfg.preset, SAR_CHANNELS)
        enc_cfg_msi = preset_encoder(cfg.preset, MSI_CHANNELS)
        dec_cfg = preset_decoder(cfg.preset)
        if cfg.decoder_conv_kernel != dec_cfg.conv_kernel:
            dec_cfg = type(dec_cfg)(widths=dec_cfg.widths, conv_kernel=cfg.decoder_conv_kernel)
        self.enc_sar = Encoder(enc_cfg_sar, child_seed(seed, "init", "enc_sar"), dtype)
        self.enc_msi = Encoder(enc_cfg_msi, child_seed(seed, "init", "enc_msi"), dtype)
        self.fusion = FusionModule(
            enc_cfg_sar.channels,
            FusionConfig(cfg.fusion_mode, cfg.spatial_mask),
            child_seed(seed, "init", "fuse"),
            dtype,
        )
        self.decoder = Decoder(dec_cfg, enc_cfg_sar.channels, child_seed(seed, "init", "dec"), dtype)
        self.decoder_sar = None
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, np.ndarray] = {}
        _prefix(self.params, self.state, "enc_sar", self.enc_sar.params, self.enc_sar.state)
        _prefix(self.params, self.state, "enc_msi", self.enc_msi.params, self.enc_msi.state)
        _prefix(self.params, self.state, "fuse", self.fusion.params)
        if cfg.shared_decoder:
            _prefix(self.params, self.state, "dec", self.decoder.params)
        else:
            # ablation: clone the decoder into two disjoint parameter sets
            self.decoder_sar = Decoder(dec_cfg, enc_cfg_sar.channels, 0, dtype)
            for k, v in self.decoder.params.items():
                self.decoder_sar.params[k] = Tensor(v.data.copy(), requires_grad=True)
            _prefix(self.params, self.state, "dec_fused", self.decoder.params)
            _prefix(self.params, self.state, "dec_sar", self.decoder_sar.params)

    def forward(self, sar, msi, validity, training: bool = False, collect: bool = False) -> ModelOutput:
        sar_pyr = self.enc_sar(Tensor(sar), training)
        msi_pyr = self.enc_msi(Tensor(msi), training)
        fused_pyr, states = self.fusion(sar_pyr, msi_pyr, validity)
        logits_fused, pre_f = self.decoder(fused_pyr)
        sar_decoder = self.decoder_sar if self.decoder_sar is not None else self.decoder
        logits_sar, pre_s = sar_decoder(sar_pyr)
        return ModelOutput(
            logits=logits_fused,
            logits_sar=logits_sar,
            smg_states=states if collect else [],
            prehead=pre_f if collect else None,
            prehead_sar=pre_s if collect else None,
        )


class _SingleEncoderUNet:
    arch_prefix = "enc_sar"

    def __init__(self, cfg: ModelConfig, seed: int, in_channels: int, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        enc_cfg = preset_encoder(cfg.preset, in_channels)
        dec_cfg = preset_decoder(cfg.preset)
        if cfg.decoder_conv_kernel != dec_cfg.conv_kernel:
            dec_cfg = type(dec_cfg)(widths=dec_cfg.widths, conv_kernel=cfg.decoder_conv_kernel)
        self.encoder = Encoder(enc_cfg, child_seed(seed, "init", "enc_sar"), dtype)
        self.decoder = Decoder(dec_cfg, enc_cfg.channels, child_seed(seed, "init", "dec"), dtype)
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, np.ndarray] = {}
        _prefix(self.params, self.state, self.arch_prefix, self.encoder.params, self.encoder.state)
        _prefix(self.params, self.state, "dec", self.decoder.params)

    def _input(self, sar, msi, validity) -> Tensor:
        raise NotImplementedError

    def forward(self, sar, msi, validity, training: bool = False, collect: bool = False) -> ModelOutput:
        pyr = self.encoder(self._input(sar, msi, validity), training)
        logits, pre = self.decoder(pyr)
        return ModelOutput(logits=logits, prehead=pre if collect else None)


class UNetSar(_SingleEncoderUNet):
    """SAR-only baseline: one encoder, one decoding path."""

    def __init__(self, cfg: ModelConfig, seed: int, dtype=np.float32):
        super().__init__(cfg, seed, SAR_CHANNELS, dtype)

    def _input(self, sar, msi, validity) -> Tensor:
        return Tensor(sar)


class UNetConcat(_SingleEncoderUNet):
    """Early-fusion baseline: SAR and masked MSI stacked on channels."""

    def __init__(self, cfg: ModelConfig, seed: int, dtype=np.float32):
        super().__init__(cfg, seed, SAR_CHANNELS + MSI_CHANNELS, dtype)

    def _input(self, sar, msi, validity) -> Tensor:
        return Tensor(np.concatenate([sar, msi], axis=1))


def build_model(cfg: ModelConfig, seed: int, dtype=np.float32):
    cfg.validate()
    if cfg.arch == "smagnet":
        return SMAGNet(cfg, seed, dtype)
    if cfg.arch == "unet-sar":
        return UNetSar(cfg, seed, dtype)
    return UNetConcat(cfg, seed, dtype)


def parameter_count(model) -> int:
    return int(sum(p.data.size for p in model.params.values()))
