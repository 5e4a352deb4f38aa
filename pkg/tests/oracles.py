"""Independent reference computations used as test oracles.

Nothing here touches the autograd engine: gradients are central finite
differences of plain numpy callables, everything else is brute force.
"""

import numpy as np

H = 1e-5
REL_TOL = 1e-4


def numeric_grad(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error.

    The denominator is floored at 1e-5 so that a gradient that is exactly zero
    (e.g. a key bias, which softmax cannot see) is compared in absolute terms
    against finite-difference noise instead of dividing noise by noise.
    """
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-5)
    return float(num / den)


def infonce_rows(S: np.ndarray, tau: float) -> float:
    """Image-to-text loss written as the plain per-row sum."""
    n = S.shape[0]
    total = 0.0
    for k in range(n):
        row = S[k] / tau
        m = row.max()
        total += -(row[k] - m - np.log(np.exp(row - m).sum()))
    return total / n


def nearest_centroid_loo(x: np.ndarray, y: np.ndarray) -> float:
    """Leave-one-out nearest centroid, one sample at a time."""
    classes = np.unique(y)
    hits = 0
    for i in range(len(y)):
        mask = np.ones(len(y), bool)
        mask[i] = False
        best, best_d = None, np.inf
        for c in classes:
            members = x[mask & (y == c)]
            if len(members) == 0:
                continue
            d = ((x[i] - members.mean(axis=0)) ** 2).sum()
            if d < best_d:
                best, best_d = c, d
        hits += best == y[i]
    return hits / len(y)


def auroc_pairs(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a random positive outranks a random negative (ties count half)."""
    pos, neg = scores[labels], scores[~labels]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (len(pos) * len(neg)))


def recall_brute(x: np.ndarray, t: np.ndarray, k: int) -> float:
    """Rank by a stable sort on (-score, index)."""
    n = x.shape[0]
    hits = 0
    for i in range(n):
        scores = [float(x[i] @ t[j]) for j in range(n)]
        order = sorted(range(n), key=lambda j: (-scores[j], j))
        hits += i in order[:k]
    return hits / n
