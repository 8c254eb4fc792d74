import numpy as np
import pytest

from mscsanet import unet
from mscsanet.mscsa import MSCSAConfig
from mscsanet.ops3d import ConfigError
from mscsanet.tensor import Tensor
from mscsanet.unet import (
    CheckpointError,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)


TINY = ModelConfig(channels=(2, 4, 8))


def _input(rng, n=1, e=8):
    return Tensor(rng.standard_normal((n, 1, e, e, e)).astype(np.float32))


def test_forward_output_shape():
    rng = np.random.default_rng(0)
    params = unet.init_params(TINY, 0)
    x = _input(rng)
    y = unet.forward(x, params, TINY, mode="eval")
    assert y.shape == (1, 2, 8, 8, 8)


def test_encoder_halves_resolution_per_stage():
    rng = np.random.default_rng(1)
    params = unet.init_params(TINY, 0)
    stages = unet.encoder_forward(_input(rng), params, TINY, mode="eval")
    assert [s.shape[2] for s in stages] == [8, 4, 2]
    assert [s.shape[1] for s in stages] == [2, 4, 8]


def test_input_divisibility_enforced():
    params = unet.init_params(TINY, 0)
    x = Tensor(np.zeros((1, 1, 6, 8, 8), dtype=np.float32))
    with pytest.raises(ConfigError):
        unet.forward(x, params, TINY)


def test_residual_backbone_differs_from_plain():
    rng = np.random.default_rng(2)
    plain = TINY
    res = ModelConfig(channels=(2, 4, 8), backbone="residual")
    params = unet.init_params(plain, 0)
    x = _input(rng)
    y1 = unet.forward(x, params, plain, mode="eval").data
    y2 = unet.forward(x, params, res, mode="eval").data
    assert np.abs(y1 - y2).max() > 1e-6


def test_backbone_params_identical_with_and_without_attention():
    cfg_off = ModelConfig(channels=(2, 4, 8))
    cfg_on = ModelConfig(channels=(2, 4, 8), mscsa=MSCSAConfig(target_stage=2, heads=2))
    p_off = unet.init_params(cfg_off, 7)
    p_on = unet.init_params(cfg_on, 7)
    for key in p_off:
        np.testing.assert_array_equal(p_off[key].data, p_on[key].data)
    assert any(k.startswith("mscsa.") for k in p_on)


def test_init_is_deterministic_per_seed():
    a = unet.init_params(TINY, 3)
    b = unet.init_params(TINY, 3)
    c = unet.init_params(TINY, 4)
    for key in a:
        np.testing.assert_array_equal(a[key].data, b[key].data)
    assert any(np.any(a[k].data != c[k].data) for k in a)


def test_config_text_roundtrip():
    cfg = ModelConfig(
        channels=(4, 8, 16, 32),
        backbone="residual",
        mscsa=MSCSAConfig(target_stage=2, heads=2, c_k=16, dwconv_kernel=5),
    )
    back = ModelConfig.from_text(cfg.to_text())
    assert back.channels == cfg.channels
    assert back.backbone == cfg.backbone
    assert back.mscsa.target_stage == 2
    assert back.mscsa.heads == 2
    assert back.mscsa.c_k == 16
    assert back.mscsa.c_v is None
    assert back.mscsa.dwconv_kernel == 5
    off = ModelConfig.from_text(ModelConfig(channels=(2, 4)).to_text())
    assert off.mscsa is None


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    params = unet.init_params(TINY, 5)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert sorted(loaded) == sorted(params)
    for key in params:
        np.testing.assert_array_equal(loaded[key].data, params[key].data)
        assert loaded[key].requires_grad == params[key].requires_grad


def test_checkpoint_magic_and_truncation(tmp_path):
    params = unet.init_params(TINY, 5)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    raw = path.read_bytes()
    assert raw.startswith(b"MSCSAv1")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(raw[: len(raw) - 10])
    with pytest.raises(CheckpointError):
        load_checkpoint(trunc)


def test_predict_probabilities_normalized():
    rng = np.random.default_rng(8)
    params = unet.init_params(TINY, 0)
    vol = rng.standard_normal((10, 9, 8)).astype(np.float32)
    probs = unet.predict(vol, params, TINY, patch=(8, 8, 8), overlap=0.5)
    assert probs.shape == (2, 10, 9, 8)
    np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-4)


def test_predict_small_volume_padded_and_cropped():
    params = unet.init_params(TINY, 0)
    vol = np.zeros((5, 6, 7), dtype=np.float32)
    probs = unet.predict(vol, params, TINY, patch=(8, 8, 8))
    assert probs.shape == (2, 5, 6, 7)


def test_gaussian_map_center_heavy():
    g = unet._gaussian_map((8, 8, 8), np.float32)
    assert g.max() == g[3, 3, 3] or g.max() == g[4, 4, 4]
    assert g.min() > 0
    assert g[0, 0, 0] < g[4, 4, 4]


def test_tile_starts_cover_extent():
    starts = unet._tile_starts(20, 8, 4)
    assert starts[0] == 0
    assert starts[-1] == 12
    covered = set()
    for s in starts:
        covered.update(range(s, s + 8))
    assert covered == set(range(20))


def test_param_count_counts_trainable_only():
    params = unet.init_params(TINY, 0)
    total = unet.param_count(params)
    manual = sum(
        p.size
        for k, p in params.items()
        if not k.endswith(("running_mean", "running_var"))
    )
    assert total == manual
