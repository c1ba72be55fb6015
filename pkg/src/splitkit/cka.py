"""Linear centered kernel alignment between layer representations.

Feature-space linear CKA: column-center both matrices, then

    cka(X, Y) = ||Xc^T Yc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F)

All accumulation happens in float64 — Frobenius products over thousands of
token rows lose too much precision in float32.  The layer-partition detector
simply tries every split point and keeps the one whose two blocks are most
self-similar relative to their cross-similarity.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor
from .vit import FeatureStack


def _as_f64(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.asarray(arr, dtype=np.float64)


def linear_cka(X, Y, return_degenerate: bool = False):
    """CKA between (n, d1) and (n, d2) feature matrices; n >= 2 rows.

    Returns 0.0 (flagged degenerate) when either centered matrix vanishes.
    """
    X, Y = _as_f64(X), _as_f64(Y)
    if X.ndim != 2 or Y.ndim != 2:
        raise ValueError("linear_cka expects 2-D feature matrices")
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"row counts differ: {X.shape[0]} vs {Y.shape[0]}")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 feature rows")
    if not (np.isfinite(X).all() and np.isfinite(Y).all()):
        raise ValueError("non-finite values in feature matrices")

    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    cross = np.linalg.norm(Xc.T @ Yc, "fro") ** 2
    dx = np.linalg.norm(Xc.T @ Xc, "fro")
    dy = np.linalg.norm(Yc.T @ Yc, "fro")
    if dx == 0.0 or dy == 0.0:
        return (0.0, True) if return_degenerate else 0.0
    value = float(cross / (dx * dy))
    return (value, False) if return_degenerate else value


@dataclass
class CKAMatrix:
    M: np.ndarray  # (L, L) float32
    n: int         # pooled feature rows per layer
    config_hash: str
    degenerate_pairs: int = 0

    @property
    def L(self) -> int:
        return self.M.shape[0]


def _pool_layer_rows(stacks: list[FeatureStack], layer: int, drop_cls: bool) -> np.ndarray:
    rows = []
    for s in stacks:
        f = s[layer].data
        rows.append(f[1:] if drop_cls else f)
    return np.concatenate(rows, axis=0)


def cka_matrix(stacks, drop_cls: bool = True) -> CKAMatrix:
    """Pairwise CKA between all layers, features pooled over a batch of stacks."""
    if isinstance(stacks, FeatureStack):
        stacks = [stacks]
    stacks = list(stacks)
    if not stacks:
        raise ValueError("empty batch of feature stacks")
    L = len(stacks[0])
    feats = [_pool_layer_rows(stacks, i, drop_cls) for i in range(L)]
    n = feats[0].shape[0]
    if n < 2:
        raise ValueError("need at least 2 pooled feature rows")

    M = np.eye(L, dtype=np.float32)
    degenerate = 0
    for i in range(L):
        for j in range(i, L):
            value, bad = linear_cka(feats[i], feats[j], return_degenerate=True)
            degenerate += int(bad)
            M[i, j] = M[j, i] = np.float32(value)

    digest = hashlib.sha256(
        f"L={L} n={n} d={feats[0].shape[1]} drop_cls={drop_cls}".encode()
    ).hexdigest()[:16]
    return CKAMatrix(M=M, n=n, config_hash=digest, degenerate_pairs=degenerate)


def cka_matrix_from_features(feats: list[np.ndarray]) -> CKAMatrix:
    """Pairwise CKA over pre-pooled per-layer feature matrices."""
    if not feats:
        raise ValueError("no feature matrices")
    L = len(feats)
    M = np.eye(L, dtype=np.float32)
    degenerate = 0
    for i in range(L):
        for j in range(i, L):
            value, bad = linear_cka(feats[i], feats[j], return_degenerate=True)
            degenerate += int(bad)
            M[i, j] = M[j, i] = np.float32(value)
    digest = hashlib.sha256(
        f"L={L} n={feats[0].shape[0]} d={feats[0].shape[1]}".encode()
    ).hexdigest()[:16]
    return CKAMatrix(M=M, n=feats[0].shape[0], config_hash=digest, degenerate_pairs=degenerate)


def partition_layers(M) -> int:
    """Split index s in [1, L-1] maximizing mean within-block CKA minus mean
    cross-block CKA for blocks [0, s) and [s, L); ties go to the smaller s."""
    M = M.M if isinstance(M, CKAMatrix) else np.asarray(M, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    L = M.shape[0]
    if M.shape != (L, L) or L < 2:
        raise ValueError("partition_layers expects a square matrix with L >= 2")
    best_s, best_score = 1, -np.inf
    for s in range(1, L):
        a = M[:s, :s]
        b = M[s:, s:]
        cross = M[:s, s:]
        within = (a.sum() + b.sum()) / (a.size + b.size)
        score = within - cross.mean()
        if score > best_score:
            best_score, best_s = score, s
    return best_s
