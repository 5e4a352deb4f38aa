"""Symmetric temperature-scaled contrastive objective.

``S[k][j]`` is the inner product of image output ``k`` with text output ``j``.
The image-to-text term normalises each row over texts, the text-to-image
term each column over images; both average over the batch and divide
similarities by the temperature before the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError
from .tensor import Tensor

DEFAULT_ALPHA = 0.75


@dataclass(frozen=True)
class LossBreakdown:
    l_i2t: float
    l_t2i: float
    total: float
    alpha: float
    tau: float


def similarity_matrix(img_out, txt_out) -> Tensor:
    img_out, txt_out = T.as_tensor(img_out), T.as_tensor(txt_out)
    if img_out.ndim != 2 or txt_out.ndim != 2:
        raise DimensionError("similarity_matrix needs two n x d matrices")
    if img_out.shape[0] == 0:
        raise DimensionError("empty batch")
    if img_out.shape != txt_out.shape:
        raise DimensionError(f"batch shapes differ: {img_out.shape} vs {txt_out.shape}")
    return T.matmul(img_out, T.transpose(txt_out))


def _scaled_logits(S, tau) -> Tensor:
    S = T.as_tensor(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] == 0:
        raise DimensionError(f"similarity matrix must be square and non-empty, got {S.shape}")
    tau_t = T.as_tensor(tau)
    if not float(tau_t.data) > 0.0:
        raise NumericError(f"temperature must be positive, got {float(tau_t.data)}")
    return S / tau_t


def info_nce_i2t(S, tau) -> Tensor:
    """Mean over rows of -log softmax_j(S[k, j] / tau)[k]."""
    logp = T.log_softmax(_scaled_logits(S, tau), axis=1)
    return T.scale(T.mean(T.diag(logp)), -1.0)


def info_nce_t2i(S, tau) -> Tensor:
    """Column-normalised counterpart; exactly ``info_nce_i2t(S.T, tau)``."""
    return info_nce_i2t(T.transpose(T.as_tensor(S)), tau)


def check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    return alpha


def total_loss(S, tau, alpha: float = DEFAULT_ALPHA) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum ``alpha * l_i2t + (1 - alpha) * l_t2i``.

    Returns the differentiable total together with a plain-float breakdown.
    """
    alpha = check_alpha(alpha)
    S = T.as_tensor(S)
    l_i2t = info_nce_i2t(S, tau)
    l_t2i = info_nce_t2i(S, tau)
    total = T.scale(l_i2t, alpha) + T.scale(l_t2i, 1.0 - alpha)
    breakdown = LossBreakdown(
        l_i2t=l_i2t.item(),
        l_t2i=l_t2i.item(),
        total=total.item(),
        alpha=alpha,
        tau=float(T.as_tensor(tau).data),
    )
    return total, breakdown
