"""Embedding caches, the synthetic paired-embedding generator and batching.

ADPC cache layout (little-endian)::

    offset size  field
    0      4     magic b"ADPC"
    4      4     version (u32, = 1)
    8      8     n_samples (u64)
    16     4     d_img (u32)
    20     4     d_txt (u32)
    24     4     tokens_img (u32)
    28     4     tokens_txt (u32)
    32     1     has_labels (u8, 0/1)
    33     1     split (u8: 0 train, 1 val, 2 test)
    34     6     reserved, zero
    40     ...   payload: image f32[n*tokens_img*d_img], text f32[n*tokens_txt*d_txt],
                 labels u32[n] if has_labels
    end-4  4     CRC-32 of the payload (u32)

Floats are held as float64 in memory but always lie on the float32 grid, so a
write/read round trip is exact.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    DimensionError,
    HeaderError,
    TruncatedError,
    VersionError,
)
from .network import ModalEmbedding

CACHE_MAGIC = b"ADPC"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sIQIIIIBB6s")
SPLITS = ("train", "val", "test")


@dataclass
class EmbeddingCache:
    img: np.ndarray  # (n * tokens_img) x d_img
    txt: np.ndarray  # (n * tokens_txt) x d_txt
    labels: np.ndarray | None = None
    tokens_img: int = 1
    tokens_txt: int = 1
    split: str = "train"

    def __post_init__(self):
        self.img = _to_f32_grid(self.img)
        self.txt = _to_f32_grid(self.txt)
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.tokens_img < 1 or self.tokens_txt < 1:
            raise DimensionError("token counts must be >= 1")
        if self.img.shape[0] % self.tokens_img or self.txt.shape[0] % self.tokens_txt:
            raise DimensionError("row counts are not multiples of the token counts")
        n_img = self.img.shape[0] // self.tokens_img
        n_txt = self.txt.shape[0] // self.tokens_txt
        if n_img != n_txt:
            raise DimensionError(f"unpaired cache: {n_img} images vs {n_txt} texts")
        if not (np.isfinite(self.img).all() and np.isfinite(self.txt).all()):
            raise DimensionError("cache contains non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n_img,):
                raise DimensionError(f"expected {n_img} labels, got shape {self.labels.shape}")
            if (self.labels < 0).any():
                raise DimensionError("labels must be non-negative")

    @property
    def n_samples(self) -> int:
        return self.img.shape[0] // self.tokens_img

    @property
    def d_img(self) -> int:
        return self.img.shape[1]

    @property
    def d_txt(self) -> int:
        return self.txt.shape[1]

    def image_rows(self, idx: Sequence[int] | np.ndarray) -> np.ndarray:
        return _gather(self.img, idx, self.tokens_img)

    def text_rows(self, idx: Sequence[int] | np.ndarray) -> np.ndarray:
        return _gather(self.txt, idx, self.tokens_txt)

    def pooled_images(self) -> np.ndarray:
        """Per-sample token mean of the raw image embeddings."""
        return self.img.reshape(self.n_samples, self.tokens_img, self.d_img).mean(axis=1)

    def subset(self, idx, split: str | None = None) -> "EmbeddingCache":
        idx = np.asarray(idx, dtype=np.int64)
        return EmbeddingCache(
            self.image_rows(idx),
            self.text_rows(idx),
            None if self.labels is None else self.labels[idx],
            self.tokens_img,
            self.tokens_txt,
            split or self.split,
        )

    def equals(self, other: "EmbeddingCache") -> bool:
        if (self.labels is None) != (other.labels is None):
            return False
        return (
            self.split == other.split
            and self.tokens_img == other.tokens_img
            and self.tokens_txt == other.tokens_txt
            and self.img.shape == other.img.shape
            and self.txt.shape == other.txt.shape
            and self.img.tobytes() == other.img.tobytes()
            and self.txt.tobytes() == other.txt.tobytes()
            and (self.labels is None or np.array_equal(self.labels, other.labels))
        )


def _to_f32_grid(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise DimensionError(f"embedding block must be 2-D, got shape {a.shape}")
    return a.astype(np.float32).astype(np.float64)


def _gather(block: np.ndarray, idx, tokens: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if tokens == 1:
        return block[idx]
    rows = (idx[:, None] * tokens + np.arange(tokens)[None, :]).ravel()
    return block[rows]


# -- synthetic data ----------------------------------------------------------
BENCHMARK_EXTRAS = {"class_sep": 0.075, "nuisance_dim": 2, "nuisance_scale": 2.0}


@dataclass(frozen=True)
class SynthSpec:
    """Desk-scale stand-in for two frozen encoders looking at the same scenes.

    Class centers are drawn as ``class_sep * N(0, I)`` in a ``d_latent`` space,
    each sample's latent is its center plus ``noise_sigma * N(0, I)``, and each
    modality sees ``map @ latent + noise_sigma * N(0, I)`` through a fixed
    Gaussian full-rank map.  ``nuisance_dim`` > 0 adds an image-only factor of
    scale ``nuisance_scale`` living in a random ``nuisance_dim``-dimensional
    subspace: variation a frozen vision encoder picks up but no report text
    can predict.
    """

    n_samples: int = 512
    d_latent: int = 8
    d_img: int = 48
    d_txt: int = 32
    n_classes: int = 3
    noise_sigma: float = 0.05
    seed: int = 0
    class_sep: float = 1.0
    nuisance_dim: int = 0
    nuisance_scale: float = 0.0

    def validate(self) -> "SynthSpec":
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.d_latent < 1:
            raise ConfigError("d_latent must be >= 1")
        if self.d_latent > min(self.d_img, self.d_txt):
            raise ConfigError(
                f"d_latent ({self.d_latent}) must not exceed min(d_img, d_txt) "
                f"= {min(self.d_img, self.d_txt)}"
            )
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if not self.noise_sigma >= 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not self.class_sep >= 0:
            raise ConfigError("class_sep must be >= 0")
        if not 0 <= self.nuisance_dim <= self.d_img or not self.nuisance_scale >= 0:
            raise ConfigError("nuisance_dim must lie in [0, d_img] and nuisance_scale be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def benchmark(cls, **overrides) -> "SynthSpec":
        """Overlapping classes plus a strong image-only nuisance.

        Raw image embeddings separate the classes poorly here while the shared
        latent separates them well, which leaves room for an adaptor to help.
        """
        return cls(**{**BENCHMARK_EXTRAS, **overrides}).validate()

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
        try:
            return cls(**d).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class SynthWorld:
    """The hidden quantities behind a generated cache (for oracles)."""

    centers: np.ndarray
    img_map: np.ndarray
    txt_map: np.ndarray
    latents: np.ndarray
    labels: np.ndarray = field(repr=False)


def gen_synthetic(spec: SynthSpec, split: str = "train", return_world: bool = False):
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, sigma = spec.n_samples, spec.noise_sigma
    centers = spec.class_sep * rng.standard_normal((spec.n_classes, spec.d_latent))
    img_map = rng.standard_normal((spec.d_img, spec.d_latent))
    txt_map = rng.standard_normal((spec.d_txt, spec.d_latent))
    labels = rng.permutation(np.arange(n) % spec.n_classes)
    latents = centers[labels] + sigma * rng.standard_normal((n, spec.d_latent))
    img = latents @ img_map.T + sigma * rng.standard_normal((n, spec.d_img))
    txt = latents @ txt_map.T + sigma * rng.standard_normal((n, spec.d_txt))
    if spec.nuisance_dim:
        basis, _ = np.linalg.qr(rng.standard_normal((spec.d_img, spec.nuisance_dim)))
        img = img + spec.nuisance_scale * rng.standard_normal((n, spec.nuisance_dim)) @ basis.T
    cache = EmbeddingCache(img, txt, labels, split=split)
    if return_world:
        return cache, SynthWorld(centers, img_map, txt_map, latents, labels)
    return cache


def split_cache(cache: EmbeddingCache, fractions=(0.8, 0.1, 0.1)) -> dict[str, EmbeddingCache]:
    """Contiguous train/val/test split; samples are already i.i.d. shuffled."""
    n = cache.n_samples
    n_train = int(math.floor(fractions[0] * n))
    n_val = int(math.floor(fractions[1] * n))
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, n)}
    return {name: cache.subset(np.arange(lo, hi), split=name) for name, (lo, hi) in bounds.items()}


# -- binary format -------------------------------------------------------------
def encode_cache(cache: EmbeddingCache) -> bytes:
    if cache.n_samples == 0:
        raise ConfigError("refusing to write an empty cache")
    payload = b"".join(
        [
            cache.img.astype("<f4").tobytes(),
            cache.txt.astype("<f4").tobytes(),
            b"" if cache.labels is None else cache.labels.astype("<u4").tobytes(),
        ]
    )
    header = _HEADER.pack(
        CACHE_MAGIC,
        CACHE_VERSION,
        cache.n_samples,
        cache.d_img,
        cache.d_txt,
        cache.tokens_img,
        cache.tokens_txt,
        int(cache.labels is not None),
        SPLITS.index(cache.split),
        bytes(6),
    )
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def write_cache(cache: EmbeddingCache, path) -> None:
    Path(path).write_bytes(encode_cache(cache))


@dataclass(frozen=True)
class CacheHeader:
    version: int
    n_samples: int
    d_img: int
    d_txt: int
    tokens_img: int
    tokens_txt: int
    has_labels: bool
    split: str

    def payload_size(self) -> int:
        n = self.n_samples
        floats = n * self.tokens_img * self.d_img + n * self.tokens_txt * self.d_txt
        return 4 * floats + (4 * n if self.has_labels else 0)


def parse_cache_header(blob: bytes) -> CacheHeader:
    if len(blob) < 4 or blob[:4] != CACHE_MAGIC:
        raise BadMagicError(f"not an ADPC file (magic {blob[:4]!r})")
    if len(blob) < _HEADER.size:
        raise TruncatedError(f"header needs {_HEADER.size} bytes, file has {len(blob)}")
    _, version, n, d_img, d_txt, t_img, t_txt, has_labels, split, reserved = _HEADER.unpack_from(blob)
    if version != CACHE_VERSION:
        raise VersionError(f"unsupported ADPC version {version} (expected {CACHE_VERSION})")
    if n == 0 or 0 in (d_img, d_txt, t_img, t_txt):
        raise HeaderError("header declares an empty dimension")
    if has_labels not in (0, 1):
        raise HeaderError(f"has_labels byte must be 0 or 1, got {has_labels}")
    if split >= len(SPLITS):
        raise HeaderError(f"unknown split code {split}")
    if reserved != bytes(6):
        raise HeaderError("reserved header bytes are not zero")
    return CacheHeader(version, n, d_img, d_txt, t_img, t_txt, bool(has_labels), SPLITS[split])


def decode_cache(blob: bytes) -> EmbeddingCache:
    h = parse_cache_header(blob)
    size = h.payload_size()
    expected = _HEADER.size + size + 4
    if len(blob) < expected:
        raise TruncatedError(f"file is {len(blob)} bytes, header implies {expected}")
    if len(blob) > expected:
        raise HeaderError(f"file is {len(blob)} bytes, header implies {expected}; trailing data")
    payload = blob[_HEADER.size:_HEADER.size + size]
    (stored,) = struct.unpack_from("<I", blob, _HEADER.size + size)
    actual = zlib.crc32(payload)
    if stored != actual:
        raise ChecksumError(f"payload CRC-32 mismatch: stored {stored:08x}, computed {actual:08x}")
    n_img = h.n_samples * h.tokens_img * h.d_img
    n_txt = h.n_samples * h.tokens_txt * h.d_txt
    img = np.frombuffer(payload, "<f4", n_img, 0).reshape(-1, h.d_img)
    txt = np.frombuffer(payload, "<f4", n_txt, 4 * n_img).reshape(-1, h.d_txt)
    labels = None
    if h.has_labels:
        labels = np.frombuffer(payload, "<u4", h.n_samples, 4 * (n_img + n_txt)).astype(np.int64)
    try:
        return EmbeddingCache(img, txt, labels, h.tokens_img, h.tokens_txt, h.split)
    except (DimensionError, ConfigError) as exc:
        raise HeaderError(f"payload fails validation: {exc}") from None


def read_cache(path) -> EmbeddingCache:
    return decode_cache(Path(path).read_bytes())


def read_text_dump(path, split: str = "train") -> tuple[list[str], EmbeddingCache]:
    """Import ``id label img... | txt...`` lines (label ``-`` for unlabelled)."""
    ids, labels, imgs, txts = [], [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        left, sep, right = line.partition("|")
        head = left.split()
        if not sep or len(head) < 3:
            raise HeaderError(f"line {lineno}: expected 'id label img... | txt...'")
        try:
            imgs.append([float(v) for v in head[2:]])
            txts.append([float(v) for v in right.split()])
            labels.append(None if head[1] == "-" else int(head[1]))
        except ValueError as exc:
            raise HeaderError(f"line {lineno}: {exc}") from None
        ids.append(head[0])
    if not ids:
        raise HeaderError("no samples in text dump")
    if len({len(r) for r in imgs}) != 1 or len({len(r) for r in txts}) != 1 or not txts[0]:
        raise HeaderError("ragged embedding widths in text dump")
    if any(l is None for l in labels) and not all(l is None for l in labels):
        raise HeaderError("labels must be given for all samples or none")
    lab = None if labels[0] is None else np.array(labels)
    return ids, EmbeddingCache(np.array(imgs), np.array(txts), lab, split=split)


# -- batching ------------------------------------------------------------------
@dataclass
class PairedBatch:
    img: np.ndarray  # stacked image tokens
    txt: np.ndarray
    indices: np.ndarray
    labels: np.ndarray | None = None
    tokens_img: int = 1
    tokens_txt: int = 1

    def __len__(self) -> int:
        return len(self.indices)

    def image_embeddings(self) -> list[ModalEmbedding]:
        return [ModalEmbedding(m, "image") for m in np.split(self.img, len(self))]

    def text_embeddings(self) -> list[ModalEmbedding]:
        return [ModalEmbedding(m, "text") for m in np.split(self.txt, len(self))]


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def sample_batches(cache: EmbeddingCache, batch_size: int, seed: int, epoch: int) -> list[PairedBatch]:
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2 for in-batch negatives, got {batch_size}")
    if batch_size > cache.n_samples:
        raise ConfigError(f"batch_size {batch_size} exceeds cache size {cache.n_samples}")
    perm = epoch_permutation(cache.n_samples, seed, epoch)
    batches = []
    for b in range(cache.n_samples // batch_size):
        idx = perm[b * batch_size:(b + 1) * batch_size]
        batches.append(
            PairedBatch(
                cache.image_rows(idx),
                cache.text_rows(idx),
                idx,
                None if cache.labels is None else cache.labels[idx],
                cache.tokens_img,
                cache.tokens_txt,
            )
        )
    return batches


def pool_feature_map(feature_map) -> np.ndarray:
    """Channel-wise spatial mean of a channels x h x w map."""
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim != 3 or fm.shape[0] == 0 or fm.shape[1] * fm.shape[2] == 0:
        raise DimensionError(f"expected a non-empty channels x h x w map, got shape {fm.shape}")
    return fm.reshape(fm.shape[0], -1).mean(axis=1)
