import math
import struct
import zlib

import numpy as np
import pytest

from adaptor.data import SynthSpec, gen_synthetic, sample_batches, split_cache
from adaptor.errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    HeaderError,
    TrainingAborted,
    TruncatedError,
    VersionError,
)
from adaptor.network import TAU_MAX, TAU_MIN, AdaptorConfig, init_params
from adaptor.trainer import (
    TrainConfig,
    TrainState,
    adam_step,
    batch_loss,
    decode_checkpoint,
    encode_checkpoint,
    evaluate_loss,
    load_checkpoint,
    pretrain,
    resume_config,
    save_checkpoint,
)

SMALL = AdaptorConfig(d_img=6, d_txt=5, d_shared=8, n_layers=1, n_heads=2, d_ffn=4)


def _cache(n=48, seed=0, **kw):
    spec = SynthSpec(n_samples=n, d_latent=4, d_img=6, d_txt=5, seed=seed, **kw)
    return gen_synthetic(spec)


def _config(**kw):
    base = dict(lr=1e-3, batch_size=8, epochs=2, seed=1, adaptor=SMALL, deterministic=True)
    base.update(kw)
    return TrainConfig(**base)


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.alpha, cfg.lr) == (0.75, 2e-5)
    assert init_params(cfg.adaptor, 0).tau == pytest.approx(0.07)


def test_config_validation():
    for bad in (dict(alpha=1.0), dict(lr=0.0), dict(batch_size=1), dict(epochs=-1),
                dict(beta1=1.0), dict(grad_clip=0.0)):
        with pytest.raises(ConfigError):
            _config(**bad).validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": 1e-3, "momentum": 0.9})
    rt = TrainConfig.from_dict(_config().to_dict())
    assert rt == _config()


def test_adam_matches_hand_computation():
    state = TrainState.fresh(init_params(SMALL, 0))
    name = "img_proj.w"
    w0 = state.params[name].data.copy()
    rng = np.random.default_rng(0)
    g1, g2 = rng.normal(size=w0.shape), rng.normal(size=w0.shape)
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    adam_step(state, {name: g1}, lr, b1, b2, eps)
    adam_step(state, {name: g2}, lr, b1, b2, eps)
    # oracle: explicit two-step recurrence
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1**2
    w1 = w0 - lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2**2
    w2 = w1 - lr * (m2 / (1 - b1**2)) / (np.sqrt(v2 / (1 - b2**2)) + eps)
    assert np.allclose(state.params[name].data, w2, rtol=0, atol=1e-15)
    assert state.step == 2
    # first step moves every coordinate by about lr
    assert np.allclose(np.abs(w1 - w0), lr, rtol=1e-5)


def test_nan_gradient_aborts_naming_the_parameter():
    state = TrainState.fresh(init_params(SMALL, 0))
    g = np.zeros_like(state.params["txt_proj.b"].data)
    g[0] = np.nan
    before = state.params.checksum()
    with pytest.raises(TrainingAborted, match="txt_proj.b"):
        adam_step(state, {"txt_proj.b": g}, 1e-3)
    assert state.params.checksum() == before and state.step == 0


def test_unknown_or_misshapen_gradients_rejected():
    state = TrainState.fresh(init_params(SMALL, 0))
    with pytest.raises(ConfigError):
        adam_step(state, {"nope": np.zeros(1)}, 1e-3)
    with pytest.raises(ConfigError):
        adam_step(state, {"img_proj.b": np.zeros(3)}, 1e-3)


@pytest.mark.parametrize("direction", [1.0, -1.0])
def test_temperature_is_clamped(direction):
    state = TrainState.fresh(init_params(SMALL, 0))
    g = np.array(-direction)
    for _ in range(400):
        adam_step(state, {"log_tau": g}, 0.5)
    assert TAU_MIN - 1e-12 <= state.params.tau <= TAU_MAX + 1e-9
    assert state.params.tau == pytest.approx(TAU_MAX if direction > 0 else TAU_MIN)


def test_first_batch_loss_near_log_batch_when_outputs_coincide():
    cache = _cache(n=128, n_classes=1, noise_sigma=0.01)
    params = init_params(SMALL, 0)
    batch = sample_batches(cache, 64, 0, 0)[0]
    value = batch_loss(params, batch, 0.75)[1].total
    assert abs(value - math.log(64)) <= 0.15 * math.log(64)


def test_training_reduces_loss_and_logs_each_epoch():
    cache = _cache()
    seen = []
    state, log = pretrain(_config(epochs=6), cache, on_epoch=seen.append)
    assert [r["epoch"] for r in log] == list(range(1, 7))
    assert seen == log
    assert log[-1]["step"] == 6 * (48 // 8)
    assert log[-1]["loss"] < log[0]["loss"]
    assert all(r["wall_ms"] == 0.0 for r in log)
    for r in log:
        assert r["loss"] == pytest.approx(0.75 * r["l_i2t"] + 0.25 * r["l_t2i"], abs=1e-12)


def test_validation_loss_reported():
    parts = split_cache(_cache(n=80), (0.6, 0.2))
    _, log = pretrain(_config(epochs=1), parts["train"], val_cache=parts["val"])
    assert np.isfinite(log[0]["val_loss"])
    state = TrainState.fresh(init_params(SMALL, 1))
    assert evaluate_loss(state.params, parts["val"], 8, 0.75) > 0


def test_same_config_is_bitwise_deterministic():
    cache = _cache()
    s1, l1 = pretrain(_config(), cache)
    s2, l2 = pretrain(_config(), cache)
    assert l1 == l2 and s1.params.checksum() == s2.params.checksum()


def test_resume_equals_uninterrupted(tmp_path):
    cache = _cache()
    full, log_full = pretrain(_config(epochs=5), cache)
    part, log_a = pretrain(_config(epochs=3), cache)
    save_checkpoint(part, _config(epochs=3), tmp_path / "c.adpk")
    loaded, saved_cfg = load_checkpoint(tmp_path / "c.adpk")
    resumed, log_b = pretrain(resume_config(saved_cfg, epochs=5), cache, loaded)
    assert resumed.params.checksum() == full.params.checksum()
    assert log_a + log_b == log_full
    assert resumed.step == full.step and resumed.epoch == 5


def test_pretrain_input_checks():
    cache = _cache()
    with pytest.raises(ConfigError):
        pretrain(_config(adaptor=AdaptorConfig(d_img=7, d_txt=5, d_shared=8, n_heads=2)), cache)
    with pytest.raises(ConfigError):
        pretrain(_config(batch_size=64), cache)
    with pytest.raises(ConfigError):
        pretrain(_config(), split_cache(_cache(n=80))["val"])


def test_checkpoint_round_trip():
    state, _ = pretrain(_config(epochs=1), _cache())
    blob = encode_checkpoint(state, _config(epochs=1))
    back, cfg = decode_checkpoint(blob)
    assert cfg == _config(epochs=1)
    assert back.params.checksum() == state.params.checksum()
    assert (back.step, back.epoch) == (state.step, state.epoch)
    for k in state.m:
        assert np.array_equal(back.m[k], state.m[k]) and np.array_equal(back.v[k], state.v[k])
    assert encode_checkpoint(back, cfg) == blob


def test_checkpoint_errors():
    blob = encode_checkpoint(TrainState.fresh(init_params(SMALL, 0)), _config())
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"ADPC" + blob[4:])
    with pytest.raises(VersionError):
        decode_checkpoint(blob[:4] + struct.pack("<I", 2) + blob[8:])
    with pytest.raises(TruncatedError):
        decode_checkpoint(blob[:-1])
    with pytest.raises(TruncatedError):
        decode_checkpoint(blob[:10])
    with pytest.raises(HeaderError):
        decode_checkpoint(blob + b"x")
    flipped = bytearray(blob)
    flipped[-20] ^= 1
    with pytest.raises(ChecksumError):
        decode_checkpoint(bytes(flipped))
    # a valid CRC over garbage metadata is still a structured error
    hdr = struct.pack("<4sIIQ", b"ADPK", 1, 3, 0) + b"{x}"
    with pytest.raises(HeaderError):
        decode_checkpoint(hdr + struct.pack("<I", zlib.crc32(hdr)))


def test_loss_halves_on_learnable_data():
    ratios = []
    for seed in range(3):
        train = split_cache(gen_synthetic(SynthSpec.benchmark(seed=seed)))["train"]
        _, log = pretrain(TrainConfig(lr=1e-3, seed=seed, deterministic=True), train)
        ratios.append(log[-1]["loss"] / log[0]["loss"])
    assert np.mean(ratios) < 0.5


def test_full_scale_settings_are_expressible():
    cfg = TrainConfig(batch_size=1024, epochs=50, lr=2e-5).validate()
    assert (cfg.batch_size, cfg.epochs, cfg.lr, cfg.alpha) == (1024, 50, 2e-5, 0.75)


def test_loss_decreases_each_epoch_on_aligned_data():
    # tight, well-separated classes floor the loss near ln(batch / classes)
    # within two epochs, so the overlapping benchmark preset is used here
    for seed in range(3):
        train = split_cache(gen_synthetic(SynthSpec.benchmark(seed=seed)))["train"]
        _, log = pretrain(TrainConfig(lr=1e-3, epochs=5, seed=seed, deterministic=True), train)
        losses = [r["loss"] for r in log]
        assert all(b < a for a, b in zip(losses, losses[1:])), losses
