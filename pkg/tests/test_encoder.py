"""Encoder pyramid geometry, parameter naming, and normalization state."""

import numpy as np
import pytest

from smagnet.autodiff import Tensor
from smagnet.encoder import Encoder, EncoderConfig, preset_encoder


def _tiny(in_ch=2):
    return Encoder(preset_encoder("tiny", in_ch), seed=1)


def test_pyramid_shapes_tiny():
    enc = _tiny()
    feats = enc(Tensor(np.zeros((2, 2, 64, 64), np.float32)), training=False)
    shapes = [f.shape for f in feats]
    assert shapes == [
        (2, 16, 32, 32),
        (2, 32, 16, 16),
        (2, 64, 8, 8),
        (2, 128, 4, 4),
        (2, 256, 2, 2),
    ]


def test_extent_must_divide_32():
    enc = _tiny()
    with pytest.raises(ValueError, match="32"):
        enc(Tensor(np.zeros((1, 2, 48, 64), np.float32)), training=False)


def test_channel_count_checked():
    enc = _tiny(in_ch=2)
    with pytest.raises(ValueError):
        enc(Tensor(np.zeros((1, 4, 64, 64), np.float32)), training=False)


def test_param_namespace_is_stagewise():
    enc = _tiny()
    keys = set(enc.params)
    assert "stage1.stem.w" in keys
    assert "stage2.block0.conv1.w" in keys
    assert all(k.startswith("stage") for k in keys)
    # running stats live in state, not params
    assert any(k.endswith(".running_mean") for k in enc.state)
    assert not any(k.endswith(".running_mean") for k in keys)


def test_training_mode_updates_running_stats():
    enc = _tiny()
    key = next(k for k in enc.state if k.endswith("running_mean"))
    before = enc.state[key].copy()
    x = Tensor(np.random.default_rng(0).standard_normal((4, 2, 64, 64)).astype(np.float32))
    enc(x, training=True)
    assert not np.array_equal(enc.state[key], before)
    frozen = enc.state[key].copy()
    enc(x, training=False)
    np.testing.assert_array_equal(enc.state[key], frozen)


def test_paper_preset_has_bottleneck_widths():
    cfg = preset_encoder("paper", 3)
    assert cfg.channels == (64, 256, 512, 1024, 2048)
    assert cfg.blocks_per_stage == (1, 3, 4, 6, 3)


def test_projection_only_where_channels_change():
    enc = _tiny()
    proj_keys = [k for k in enc.params if ".proj" in k]
    # every stage transition changes width, so each stage's first block projects
    stages = {k.split(".")[0] for k in proj_keys}
    assert stages == {"stage2", "stage3", "stage4", "stage5"}


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        EncoderConfig(in_channels=2, channels=(16, 32), blocks_per_stage=(1, 1, 1, 1, 1)).validate()
