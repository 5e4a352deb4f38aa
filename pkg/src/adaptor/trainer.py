"""Adam pre-training of the adaptor on cached embeddings, plus checkpoints.

ADPK checkpoint layout (little-endian)::

    magic b"ADPK" | version u32 | meta_len u32 | payload_len u64
    meta      canonical JSON (sorted keys): train config, step, epoch, tensor names/shapes
    payload   for each tensor in meta order: value f64, adam m f64, adam v f64
    footer    CRC-32 (u32) of every preceding byte
"""

from __future__ import annotations

import json
import math
import os
import struct
import time
import zlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import EmbeddingCache, PairedBatch, sample_batches
from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    FormatError,
    HeaderError,
    TrainingAborted,
    TruncatedError,
    VersionError,
)
from .network import (
    LOG_TAU_MAX,
    LOG_TAU_MIN,
    AdaptorConfig,
    AdaptorParams,
    encode_pairs,
    init_params,
    parameter_shapes,
)
from .objective import check_alpha, similarity_matrix, total_loss
from .tensor import Tensor

CKPT_MAGIC = b"ADPK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIQ")


def deterministic_from_env() -> bool:
    return os.environ.get("ADAPTOR_DETERMINISTIC", "0") == "1"


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.75
    lr: float = 2e-5
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    adaptor: AdaptorConfig = field(default_factory=AdaptorConfig)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None
    deterministic: bool = field(default_factory=deterministic_from_env)

    def validate(self) -> "TrainConfig":
        check_alpha(self.alpha)
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("invalid Adam hyperparameters")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive when set")
        self.adaptor.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adaptor"] = self.adaptor.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        if "adaptor" in d:
            d["adaptor"] = AdaptorConfig.from_dict(d["adaptor"])
        try:
            return cls(**d).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class TrainState:
    """Parameters, Adam moments and counters.

    Batch order is a pure function of (seed, epoch), so the epoch counter is
    the only sampler state that needs saving.
    """

    params: AdaptorParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0

    @classmethod
    def fresh(cls, params: AdaptorParams) -> "TrainState":
        return cls(
            params,
            {k: np.zeros_like(t.data) for k, t in params},
            {k: np.zeros_like(t.data) for k, t in params},
        )


def adam_step(
    state: TrainState,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> TrainState:
    """One bias-corrected Adam update, in place; the temperature is clamped after."""
    for name, g in grads.items():
        if name not in state.params.tensors:
            raise ConfigError(f"gradient for unknown parameter {name!r}")
        if g.shape != state.params[name].shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape for {name!r}")
        if not np.isfinite(g).all():
            raise TrainingAborted(name)
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, g in grads.items():
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        p = state.params[name]
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    state.params.clamp_tau()
    return state


def batch_loss(params: AdaptorParams, batch: PairedBatch, alpha: float):
    """Forward one batch; returns the differentiable loss and its breakdown."""
    x, t = encode_pairs(batch.img, batch.txt, len(batch), params)
    tau = T.exp(params.log_tau)
    return total_loss(similarity_matrix(x, t), tau, alpha)


def _gradients(params: AdaptorParams, clip: float | None) -> dict[str, np.ndarray]:
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params}
    if clip is not None:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > clip:
            grads = {k: g * (clip / norm) for k, g in grads.items()}
    return grads


@contextmanager
def _single_thread(enabled: bool):
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def check_compatible(config: AdaptorConfig, cache: EmbeddingCache) -> None:
    if cache.d_img != config.d_img or cache.d_txt != config.d_txt:
        raise ConfigError(
            f"cache dims (d_img={cache.d_img}, d_txt={cache.d_txt}) do not match adaptor "
            f"config (d_img={config.d_img}, d_txt={config.d_txt})"
        )


def evaluate_loss(params: AdaptorParams, cache: EmbeddingCache, batch_size: int, alpha: float, seed: int = 0) -> float:
    """Mean batch loss over a cache without touching gradients."""
    frozen = AdaptorParams(params.config, {k: Tensor(t.data) for k, t in params})
    bs = min(batch_size, cache.n_samples)
    losses = [batch_loss(frozen, b, alpha)[1].total for b in sample_batches(cache, bs, seed, 0)]
    return float(np.mean(losses))


def pretrain(
    config: TrainConfig,
    cache: EmbeddingCache,
    state: TrainState | None = None,
    val_cache: EmbeddingCache | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run epochs ``state.epoch .. config.epochs - 1``; returns the state and per-epoch metrics."""
    config.validate()
    check_compatible(config.adaptor, cache)
    if cache.split != "train":
        raise ConfigError(f"pre-training needs a train split cache, got {cache.split!r}")
    if cache.n_samples < config.batch_size:
        raise ConfigError(f"cache has {cache.n_samples} samples, fewer than batch_size {config.batch_size}")
    if state is None:
        state = TrainState.fresh(init_params(config.adaptor, config.seed))
    elif state.params.config != config.adaptor:
        raise ConfigError("checkpoint adaptor config differs from the train config")
    log: list[dict] = []
    with _single_thread(config.deterministic):
        while state.epoch < config.epochs:
            t0 = time.perf_counter()
            parts = []
            for batch in sample_batches(cache, config.batch_size, config.seed, state.epoch):
                state.params.zero_grad()
                loss, br = batch_loss(state.params, batch, config.alpha)
                loss.backward()
                adam_step(state, _gradients(state.params, config.grad_clip), config.lr,
                          config.beta1, config.beta2, config.eps)
                parts.append((br.total, br.l_i2t, br.l_t2i))
            state.params.zero_grad()
            state.epoch += 1
            mean = np.mean(parts, axis=0)
            record = {
                "epoch": state.epoch,
                "step": state.step,
                "loss": float(mean[0]),
                "l_i2t": float(mean[1]),
                "l_t2i": float(mean[2]),
                "tau": state.params.tau,
                "wall_ms": 0.0 if config.deterministic else round(1e3 * (time.perf_counter() - t0), 3),
            }
            if val_cache is not None and val_cache.n_samples >= 2:
                record["val_loss"] = evaluate_loss(state.params, val_cache, config.batch_size, config.alpha)
            log.append(record)
            if on_epoch is not None:
                on_epoch(record)
    return state, log


# -- checkpoints ---------------------------------------------------------------
def encode_checkpoint(state: TrainState, config: TrainConfig) -> bytes:
    names = list(state.params.tensors)
    meta = {
        "format": "ADPK",
        "config": config.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "tensors": [[k, list(state.params[k].shape)] for k in names],
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(
        np.ascontiguousarray(arr, dtype="<f8").tobytes()
        for k in names
        for arr in (state.params[k].data, state.m[k], state.v[k])
    )
    body = _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(meta_bytes), len(payload)) + meta_bytes + payload
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(state: TrainState, config: TrainConfig, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(state, config))
    os.replace(tmp, path)


def _parse_meta(meta_bytes: bytes) -> dict:
    try:
        meta = json.loads(meta_bytes.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"checkpoint metadata is not valid JSON: {exc}") from None
    if not isinstance(meta, dict) or not {"config", "step", "epoch", "tensors"} <= set(meta):
        raise HeaderError("checkpoint metadata is missing required fields")
    return meta


def decode_checkpoint(blob: bytes) -> tuple[TrainState, TrainConfig]:
    if len(blob) < 4 or blob[:4] != CKPT_MAGIC:
        raise BadMagicError(f"not an ADPK file (magic {blob[:4]!r})")
    if len(blob) < _CKPT_HEADER.size:
        raise TruncatedError("checkpoint header truncated")
    _, version, meta_len, payload_len = _CKPT_HEADER.unpack_from(blob)
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported ADPK version {version} (expected {CKPT_VERSION})")
    expected = _CKPT_HEADER.size + meta_len + payload_len + 4
    if len(blob) < expected:
        raise TruncatedError(f"checkpoint is {len(blob)} bytes, header implies {expected}")
    if len(blob) > expected:
        raise HeaderError(f"checkpoint is {len(blob)} bytes, header implies {expected}; trailing data")
    (stored,) = struct.unpack_from("<I", blob, expected - 4)
    actual = zlib.crc32(blob[:expected - 4])
    if stored != actual:
        raise ChecksumError(f"checkpoint CRC-32 mismatch: stored {stored:08x}, computed {actual:08x}")
    meta = _parse_meta(blob[_CKPT_HEADER.size:_CKPT_HEADER.size + meta_len])
    try:
        config = TrainConfig.from_dict(meta["config"])
        step, epoch = int(meta["step"]), int(meta["epoch"])
        listed = [(str(k), tuple(int(s) for s in shape)) for k, shape in meta["tensors"]]
    except (ConfigError, TypeError, ValueError) as exc:
        raise HeaderError(f"checkpoint metadata invalid: {exc}") from None
    if listed != list(parameter_shapes(config.adaptor).items()):
        raise HeaderError("checkpoint tensor list does not match its adaptor config")
    sizes = [int(np.prod(shape)) for _, shape in listed]
    if 8 * 3 * sum(sizes) != payload_len:
        raise HeaderError("checkpoint payload length does not match tensor shapes")
    offset = _CKPT_HEADER.size + meta_len
    tensors, m, v = {}, {}, {}
    for (name, shape), size in zip(listed, sizes):
        arrays = []
        for _ in range(3):
            arrays.append(np.frombuffer(blob, "<f8", size, offset).reshape(shape).astype(np.float64))
            offset += 8 * size
        tensors[name] = Tensor(arrays[0], requires_grad=True)
        m[name], v[name] = arrays[1], arrays[2]
    if step < 0 or epoch < 0:
        raise HeaderError("negative step or epoch counter")
    state = TrainState(AdaptorParams(config.adaptor, tensors), m, v, step, epoch)
    return state, config


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    return decode_checkpoint(Path(path).read_bytes())


def resume_config(saved: TrainConfig, **overrides) -> TrainConfig:
    return replace(saved, **overrides).validate()
