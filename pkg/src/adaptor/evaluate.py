"""Downstream evaluation on frozen adaptor features.

Retrieval recall, a small classification probe trained with cross entropy on
top of frozen features, AUROC by the rank statistic, and a leave-one-out
nearest-centroid separability score.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .data import EmbeddingCache
from .errors import ConfigError, DimensionError
from .network import AdaptorParams, embed_images, embed_texts
from .tensor import Tensor

LABEL_FRACTIONS = (0.01, 0.10, 1.00)


def recall_at_k(img_out: np.ndarray, txt_out: np.ndarray, k: int) -> float:
    """Fraction of images whose own text is among the top-k texts by inner product.

    Ties are broken in favour of the lower text index.
    """
    img_out, txt_out = np.asarray(img_out, float), np.asarray(txt_out, float)
    if img_out.ndim != 2 or img_out.shape != txt_out.shape:
        raise DimensionError(f"need two n x d matrices of equal shape, got {img_out.shape}, {txt_out.shape}")
    n = img_out.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"k must lie in [1, {n}], got {k}")
    S = img_out @ txt_out.T
    pos = np.diag(S)[:, None]
    lower = np.arange(n)[None, :] < np.arange(n)[:, None]
    rank = (S > pos).sum(axis=1) + ((S == pos) & lower).sum(axis=1)
    return float((rank < k).mean())


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties averaged)."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("AUROC needs both positive and negative samples")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def separability_score(features: np.ndarray, labels) -> float:
    """Leave-one-out nearest-centroid accuracy.

    Each sample is assigned to the closest class centroid, its own class's
    centroid being recomputed without it.  A sample that is alone in its class
    only sees the other centroids and therefore counts as an error.  Distance
    ties go to the lower class id.
    """
    x = np.asarray(features, float)
    y = np.asarray(labels)
    classes, y_idx = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ConfigError("separability needs at least two classes")
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DimensionError("features must be n x d with one label per row")
    counts = np.bincount(y_idx).astype(float)
    sums = np.zeros((len(classes), x.shape[1]))
    np.add.at(sums, y_idx, x)
    centroids = sums / counts[:, None]
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    rows = np.arange(x.shape[0])
    own_n = counts[y_idx]
    with np.errstate(divide="ignore", invalid="ignore"):
        own = (sums[y_idx] - x) / (own_n - 1)[:, None]
    d2[rows, y_idx] = np.where(own_n > 1, ((x - own) ** 2).sum(axis=1), np.inf)
    return float((d2.argmin(axis=1) == y_idx).mean())


@dataclass(frozen=True)
class ProbeConfig:
    """Probe head settings; ``hidden_dim=None`` uses the feature width."""

    hidden_dim: int | None = None
    lr: float = 1e-2
    epochs: int = 200
    data_fraction: float = 1.0
    seed: int = 0

    def validate(self) -> "ProbeConfig":
        if not 0.0 < self.data_fraction <= 1.0:
            raise ConfigError(f"data_fraction must lie in (0, 1], got {self.data_fraction}")
        if (self.hidden_dim is not None and self.hidden_dim < 1) or self.epochs < 0 or not self.lr > 0:
            raise ConfigError("invalid probe hyperparameters")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown probe config keys: {sorted(unknown)}")
        return cls(**d).validate()


def stratified_subset(labels, fraction: float, seed: int) -> np.ndarray:
    """Sorted indices keeping ``round(fraction * n_c)`` (at least 1) samples of each class."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        take = max(1, int(round(fraction * len(members))))
        keep.append(rng.permutation(members)[:take])
    return np.sort(np.concatenate(keep))


@dataclass
class ProbeResult:
    accuracy: float
    auroc: float | None
    n_train: int
    n_test: int
    train_loss: float


def linear_probe(train_x, train_y, test_x, test_y, config: ProbeConfig) -> ProbeResult:
    """Train linear -> ReLU -> linear with cross entropy on frozen features.

    Features arrive as plain arrays, so nothing upstream can receive a gradient.
    Full-batch Adam on the stratified ``data_fraction`` subset of the training set.
    """
    config.validate()
    train_x, test_x = np.asarray(train_x, float), np.asarray(test_x, float)
    train_y, test_y = np.asarray(train_y), np.asarray(test_y)
    sub = stratified_subset(train_y, config.data_fraction, config.seed)
    train_x, train_y = train_x[sub], train_y[sub]
    classes = np.unique(np.concatenate([train_y, test_y]))
    if len(np.unique(train_y)) < 2:
        raise ConfigError("probe training subset contains a single class")
    y_idx = np.searchsorted(classes, train_y)
    n, d = train_x.shape
    rng = np.random.default_rng(config.seed)
    h, c = config.hidden_dim or d, len(classes)
    b1, b2 = math.sqrt(6 / (d + h)), math.sqrt(6 / (h + c))
    params = {
        "w1": Tensor(rng.uniform(-b1, b1, (d, h)), requires_grad=True),
        "b1": Tensor(np.zeros(h), requires_grad=True),
        "w2": Tensor(rng.uniform(-b2, b2, (h, c)), requires_grad=True),
        "b2": Tensor(np.zeros(c), requires_grad=True),
    }
    onehot = np.eye(c)[y_idx]
    m = {k: np.zeros_like(p.data) for k, p in params.items()}
    v = {k: np.zeros_like(p.data) for k, p in params.items()}
    xt = Tensor(train_x)
    loss_value = float("nan")
    for step in range(1, config.epochs + 1):
        T.zero_grads(params.values())
        logits = _head(xt, params)
        loss = T.scale(T.tsum(T.mul(T.log_softmax(logits, axis=1), onehot)), -1.0 / n)
        loss.backward()
        loss_value = loss.item()
        for k, p in params.items():
            g = p.grad
            m[k] = 0.9 * m[k] + 0.1 * g
            v[k] = 0.999 * v[k] + 0.001 * g * g
            p.data = p.data - config.lr * (m[k] / (1 - 0.9**step)) / (np.sqrt(v[k] / (1 - 0.999**step)) + 1e-8)
    logits = _head(Tensor(test_x), params).data
    pred = classes[logits.argmax(axis=1)]
    acc = float((pred == test_y).mean())
    score_auc = None
    if c == 2 and len(np.unique(test_y)) == 2:
        z = logits - logits.max(axis=1, keepdims=True)
        prob = np.exp(z[:, 1]) / np.exp(z).sum(axis=1)
        score_auc = auroc(prob, test_y == classes[1])
    return ProbeResult(acc, score_auc, int(n), int(len(test_y)), loss_value)


def _head(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    return T.linear(T.relu(T.linear(x, p["w1"], p["b1"])), p["w2"], p["b2"])


@dataclass
class EvalReport:
    recall_at_k: dict[str, float]
    probe_accuracy: float | None
    probe_auroc: float | None
    separability_before: float | None
    separability_after: float | None
    adaptor_checksum_before: str
    adaptor_checksum_after: str
    config: dict = field(default_factory=dict)

    @property
    def frozen(self) -> bool:
        return self.adaptor_checksum_before == self.adaptor_checksum_after

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adaptor_frozen"] = self.frozen
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def retrieval_embeddings(params: AdaptorParams, cache: EmbeddingCache) -> tuple[np.ndarray, np.ndarray]:
    """Image and text outputs, each computed without the other modality."""
    return (
        embed_images(cache.img, params, cache.tokens_img),
        embed_texts(cache.txt, params, cache.tokens_txt),
    )


def evaluate(
    params: AdaptorParams,
    cache: EmbeddingCache,
    probe: ProbeConfig = ProbeConfig(),
    ks: Sequence[int] = (1, 5, 10),
    train_cache: EmbeddingCache | None = None,
) -> EvalReport:
    """Full frozen evaluation of an adaptor on a labelled cache.

    The probe trains on ``train_cache`` if given; otherwise the cache is split
    in half per class, the first half being the probe training pool.
    """
    before = params.checksum()
    x_hat, t_hat = retrieval_embeddings(params, cache)
    n = cache.n_samples
    recalls = {str(k): recall_at_k(x_hat, t_hat, k) for k in ks if k <= n}
    acc = auc = sep_before = sep_after = None
    if cache.labels is not None and len(np.unique(cache.labels)) >= 2:
        sep_before = separability_score(cache.pooled_images(), cache.labels)
        sep_after = separability_score(x_hat, cache.labels)
        if train_cache is not None:
            tr_x, tr_y = embed_images(train_cache.img, params, train_cache.tokens_img), train_cache.labels
            te_x, te_y = x_hat, cache.labels
        else:
            pool = stratified_subset(cache.labels, 0.5, probe.seed)
            rest = np.setdiff1d(np.arange(n), pool)
            tr_x, tr_y, te_x, te_y = x_hat[pool], cache.labels[pool], x_hat[rest], cache.labels[rest]
        res = linear_probe(tr_x, tr_y, te_x, te_y, probe)
        acc, auc = res.accuracy, res.auroc
    after = params.checksum()
    return EvalReport(
        recall_at_k=recalls,
        probe_accuracy=acc,
        probe_auroc=auc,
        separability_before=sep_before,
        separability_after=sep_after,
        adaptor_checksum_before=before,
        adaptor_checksum_after=after,
        config={"probe": asdict(probe), "ks": list(ks), "n_samples": n},
    )
