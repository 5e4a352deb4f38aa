"""The Adaptor module: per-modality projections plus cross-attention blocks.

Both branches run the *same* block weights (unless ``share_branches`` is
off).  Inputs for a batch are stacked row-wise, ``B`` samples of ``T``
tokens each, and attention is restricted to each sample's own block.

Two cross-modal wirings are available.  With ``"query_partner"`` (default)
the partner modality supplies the queries and the stream being updated
supplies keys and values, so every value that reaches a stream's residual
is computed from that stream's own tokens; the partner only decides how they
are mixed.  With a single token per side this reduces exactly to the
self-attention path used when the partner is absent.  With
``"kv_partner"`` the stream being updated supplies the queries and reads
values from the partner.  That copies partner content into each output, so a
paired forward can match a pair regardless of whether the two sides
correspond; it is kept for ablations.

Parameter count, with ``d = d_shared``, ``f = d_ffn`` and ``L = n_layers``::

    projections  (d_img + 1) * d + (d_txt + 1) * d
    per block    4 * (d*d + d)          Q, K, V, output projections + biases
                 2 * d*f + f + d        feedforward pair + biases
                 4 * d                  two layer-norm gain/bias pairs
    temperature  1

    total = projections + L * blocks_per_layer * per_block + 1

where ``blocks_per_layer`` is 1 with shared branch weights and 2 without.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

TAU_MIN, TAU_MAX = 0.01, 100.0
LOG_TAU_MIN, LOG_TAU_MAX = math.log(TAU_MIN), math.log(TAU_MAX)
TAU_INIT = 0.07
LN_EPS = 1e-5
WIRINGS = ("query_partner", "kv_partner")


@dataclass(frozen=True)
class AdaptorConfig:
    d_img: int = 48
    d_txt: int = 32
    d_shared: int = 48
    n_layers: int = 2
    n_heads: int = 4
    d_ffn: int = 8
    pooling: str = "mean"
    normalize_outputs: bool = True
    share_branches: bool = True
    wiring: str = "query_partner"

    def validate(self) -> "AdaptorConfig":
        for name in ("d_img", "d_txt", "d_shared", "n_heads", "d_ffn"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.d_shared % self.n_heads:
            raise ConfigError(
                f"d_shared ({self.d_shared}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.pooling != "mean":
            raise ConfigError(f"unsupported pooling {self.pooling!r}; only 'mean'")
        if self.wiring not in WIRINGS:
            raise ConfigError(f"wiring must be one of {WIRINGS}, got {self.wiring!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown adaptor config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def branch_names(self) -> tuple[str, ...]:
        return ("shared",) if self.share_branches else ("img", "txt")


@dataclass
class ModalEmbedding:
    """Frozen-encoder output for one sample: a tokens x d matrix."""

    tokens: np.ndarray
    modality: str

    def __post_init__(self):
        self.tokens = np.atleast_2d(np.asarray(self.tokens, dtype=np.float64))
        if self.modality not in ("image", "text"):
            raise ConfigError(f"modality must be 'image' or 'text', got {self.modality!r}")
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise DimensionError(f"need at least one token, got shape {self.tokens.shape}")


@dataclass
class AdaptorParams:
    config: AdaptorConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def log_tau(self) -> Tensor:
        return self.tensors["log_tau"]

    @property
    def tau(self) -> float:
        return math.exp(float(self.log_tau.data))

    def clamp_tau(self) -> None:
        self.log_tau.data = np.clip(self.log_tau.data, LOG_TAU_MIN, LOG_TAU_MAX)

    def n_scalars(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        T.zero_grads(self.tensors.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "AdaptorParams":
        return AdaptorParams(
            self.config,
            {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()},
        )


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def parameter_shapes(config: AdaptorConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every trainable tensor, in canonical order."""
    d, f = config.d_shared, config.d_ffn
    shapes: dict[str, tuple[int, ...]] = {
        "img_proj.w": (config.d_img, d),
        "img_proj.b": (d,),
        "txt_proj.w": (config.d_txt, d),
        "txt_proj.b": (d,),
    }
    for layer in range(config.n_layers):
        for branch in config.branch_names():
            p = f"layers.{layer}.{branch}."
            shapes[p + "ln1.g"] = (d,)
            shapes[p + "ln1.b"] = (d,)
            for m in ("q", "k", "v", "o"):
                shapes[p + f"attn.w{m}"] = (d, d)
                shapes[p + f"attn.b{m}"] = (d,)
            shapes[p + "ln2.g"] = (d,)
            shapes[p + "ln2.b"] = (d,)
            shapes[p + "ffn.w1"] = (d, f)
            shapes[p + "ffn.b1"] = (f,)
            shapes[p + "ffn.w2"] = (f, d)
            shapes[p + "ffn.b2"] = (d,)
    shapes["log_tau"] = ()
    return shapes


def init_params(config: AdaptorConfig, seed: int) -> AdaptorParams:
    config.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "log_tau":
            value = np.array(math.log(TAU_INIT))
        elif len(shape) == 2:
            value = _glorot(rng, *shape)
        elif leaf == "g":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        tensors[name] = Tensor(value, requires_grad=True)
    return AdaptorParams(config, tensors)


def param_count(config: AdaptorConfig) -> int:
    config.validate()
    d, f = config.d_shared, config.d_ffn
    projections = (config.d_img + 1) * d + (config.d_txt + 1) * d
    per_block = 4 * (d * d + d) + 2 * d * f + f + d + 4 * d
    blocks = config.n_layers * len(config.branch_names())
    return projections + blocks * per_block + 1


# -- forward ----------------------------------------------------------------
def _block_params(params: AdaptorParams, layer: int, branch: str) -> dict[str, Tensor]:
    prefix = f"layers.{layer}.{branch}."
    return {k[len(prefix):]: t for k, t in params.tensors.items() if k.startswith(prefix)}


def cross_attention_block(
    own_tokens: Tensor,
    partner_tokens: Tensor,
    layer_params: dict[str, Tensor],
    n_heads: int,
    n_groups: int = 1,
    attn_weights: list | None = None,
    wiring: str = "query_partner",
) -> Tensor:
    """Pre-norm block updating ``own_tokens``; returns a tensor of the same shape.

    ``y = own + Attn(...)`` then ``out = y + FFN(LN(y))``.  Passing the same
    tensor twice gives plain self-attention under either wiring.  Under
    ``"query_partner"`` the attention rows belong to the partner's queries, so
    each sample's rows are averaged and added to every one of its own tokens.
    """
    own, partner = T.as_tensor(own_tokens), T.as_tensor(partner_tokens)
    p = layer_params
    d = p["attn.wq"].shape[0]
    if own.shape[1] != d or partner.shape[1] != d:
        raise DimensionError(f"block expects width {d}, got {own.shape} and {partner.shape}")
    if wiring not in WIRINGS:
        raise ConfigError(f"unknown wiring {wiring!r}")
    h_own = T.layer_norm(own, p["ln1.g"], p["ln1.b"], LN_EPS)
    h_partner = h_own if partner is own else T.layer_norm(partner, p["ln1.g"], p["ln1.b"], LN_EPS)
    if wiring == "kv_partner":
        hq, hkv = h_own, h_partner
    else:
        hq, hkv = h_partner, h_own
    q = T.linear(hq, p["attn.wq"], p["attn.bq"])
    k = T.linear(hkv, p["attn.wk"], p["attn.bk"])
    v = T.linear(hkv, p["attn.wv"], p["attn.bv"])
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    heads = [
        T.grouped_attention(
            T.cols(q, h * dh, (h + 1) * dh),
            T.cols(k, h * dh, (h + 1) * dh),
            T.cols(v, h * dh, (h + 1) * dh),
            n_groups,
            scale,
            attn_weights,
        )
        for h in range(n_heads)
    ]
    mixed = heads[0] if n_heads == 1 else T.hstack(heads)
    update = T.linear(mixed, p["attn.wo"], p["attn.bo"])
    if wiring == "kv_partner" or partner is own:
        y = own + update
    else:
        t_own = own.shape[0] // n_groups
        pooled = T.reshape(T.group_mean(update, n_groups), (n_groups, 1, d))
        y = T.reshape(T.reshape(own, (n_groups, t_own, d)) + pooled, own.shape)
    hidden = T.gelu(T.linear(T.layer_norm(y, p["ln2.g"], p["ln2.b"], LN_EPS), p["ffn.w1"], p["ffn.b1"]))
    return y + T.linear(hidden, p["ffn.w2"], p["ffn.b2"])


def _stack(samples, modality: str, width: int) -> tuple[np.ndarray, int]:
    """Stack a batch of token matrices (all with the same token count)."""
    if isinstance(samples, np.ndarray) and samples.ndim == 2:
        mats = [samples]
    else:
        mats = [s.tokens if isinstance(s, ModalEmbedding) else np.atleast_2d(s) for s in samples]
    counts = {m.shape[0] for m in mats}
    if len(counts) != 1:
        raise DimensionError(f"{modality} samples in a batch must share a token count, got {sorted(counts)}")
    for m in mats:
        if m.shape[1] != width:
            raise DimensionError(f"{modality} embedding width {m.shape[1]} != configured {width}")
    return np.vstack(mats), len(mats)


def _project(tokens: np.ndarray, params: AdaptorParams, which: str) -> Tensor:
    return T.linear(Tensor(tokens), params[f"{which}_proj.w"], params[f"{which}_proj.b"])


def _finish(tokens: Tensor, n: int, config: AdaptorConfig) -> Tensor:
    pooled = T.group_mean(tokens, n)
    return T.l2_normalize_rows(pooled) if config.normalize_outputs else pooled


def encode_pairs(
    img_tokens: np.ndarray,
    txt_tokens: np.ndarray,
    n: int,
    params: AdaptorParams,
    attn_weights: list | None = None,
) -> tuple[Tensor, Tensor]:
    """Batched paired forward.

    ``img_tokens`` is (n * Ti) x d_img, ``txt_tokens`` (n * Tt) x d_txt, with
    sample ``i`` occupying the ``i``-th row block of each.  Returns the n x
    d_shared image and text outputs.
    """
    cfg = params.config
    if img_tokens.shape[1] != cfg.d_img or txt_tokens.shape[1] != cfg.d_txt:
        raise DimensionError(
            f"inputs of width {img_tokens.shape[1]}/{txt_tokens.shape[1]} do not match "
            f"d_img={cfg.d_img}/d_txt={cfg.d_txt}"
        )
    x = _project(img_tokens, params, "img")
    t = _project(txt_tokens, params, "txt")
    img_branch, txt_branch = (cfg.branch_names() * 2)[:2]
    for layer in range(cfg.n_layers):
        bi = _block_params(params, layer, img_branch)
        bt = _block_params(params, layer, txt_branch)
        x, t = (
            cross_attention_block(x, t, bi, cfg.n_heads, n, attn_weights, cfg.wiring),
            cross_attention_block(t, x, bt, cfg.n_heads, n, attn_weights, cfg.wiring),
        )
    return _finish(x, n, cfg), _finish(t, n, cfg)


def encode_single(
    tokens: np.ndarray,
    n: int,
    params: AdaptorParams,
    modality: str = "image",
    attn_weights: list | None = None,
) -> Tensor:
    """Self-attention path for one modality (Q = K = V = own tokens).

    Used whenever the partner modality is absent: retrieval indexing and
    image-only downstream features.
    """
    cfg = params.config
    which = "img" if modality == "image" else "txt"
    width = cfg.d_img if which == "img" else cfg.d_txt
    if tokens.shape[1] != width:
        raise DimensionError(f"{modality} width {tokens.shape[1]} != configured {width}")
    branch = cfg.branch_names()[0 if which == "img" or cfg.share_branches else 1]
    x = _project(tokens, params, which)
    for layer in range(cfg.n_layers):
        x = cross_attention_block(x, x, _block_params(params, layer, branch), cfg.n_heads, n, attn_weights)
    return _finish(x, n, cfg)


def adaptor_forward(
    img: ModalEmbedding, txt: ModalEmbedding, params: AdaptorParams, attn_weights: list | None = None
) -> tuple[Tensor, Tensor]:
    if img.modality != "image" or txt.modality != "text":
        raise ConfigError("adaptor_forward expects (image, text) embeddings")
    x, t = encode_pairs(img.tokens, txt.tokens, 1, params, attn_weights)
    return T.reshape(x, (x.shape[1],)), T.reshape(t, (t.shape[1],))


def adaptor_forward_image_only(
    img: ModalEmbedding, params: AdaptorParams, attn_weights: list | None = None
) -> Tensor:
    if img.modality != "image":
        raise ConfigError("adaptor_forward_image_only expects an image embedding")
    x = encode_single(img.tokens, 1, params, "image", attn_weights)
    return T.reshape(x, (x.shape[1],))


def embed_images(images: np.ndarray, params: AdaptorParams, tokens: int = 1, chunk: int = 1024) -> np.ndarray:
    """Frozen image-only features for a stacked array, without building gradients."""
    frozen = _frozen_view(params)
    n = images.shape[0] // tokens
    out = []
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        out.append(encode_single(images[lo * tokens:hi * tokens], hi - lo, frozen, "image").data)
    return np.vstack(out) if out else np.zeros((0, params.config.d_shared))


def embed_texts(texts: np.ndarray, params: AdaptorParams, tokens: int = 1, chunk: int = 1024) -> np.ndarray:
    frozen = _frozen_view(params)
    n = texts.shape[0] // tokens
    out = []
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        out.append(encode_single(texts[lo * tokens:hi * tokens], hi - lo, frozen, "text").data)
    return np.vstack(out) if out else np.zeros((0, params.config.d_shared))


def _frozen_view(params: AdaptorParams) -> AdaptorParams:
    # same arrays, but no tape is recorded and no grads can reach the originals
    return AdaptorParams(params.config, {k: Tensor(t.data) for k, t in params.tensors.items()})
