"""Learnable-prototype baselines and head parameter accounting.

Two parametric heads share one code path:

* ``softmax``: a linear projection, logits ``w_c . i`` (optionally + bias);
* ``query``: cosine logits between normalized embeddings and unit query rows.

Both store weights as (C, K, D). With K > 1 a class scores as its best
(closest) vector, mirroring the nonparametric min-distance rule but with
gradient-trained vectors. K = 1 is the usual one-vector-per-class head.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .embedding import (
    DistanceMeasure,
    check_embeddings,
    distance_matrix,
    normalize_rows,
    normalize_rows_backward,
    softmax_neg,
)
from .errors import DimensionMismatch, InvalidShape
from .losses import _neg_log_softmax

SOFTMAX = "softmax"
QUERY = "query"
PARAMETRIC = "parametric"
NONPARAMETRIC = "nonparametric"


@dataclass(frozen=True)
class ParametricHead:
    variant: str
    weights: np.ndarray           # (C, K, D)
    bias: np.ndarray | None = None  # (C,), softmax variant only

    def __post_init__(self):
        if self.variant not in (SOFTMAX, QUERY):
            raise ValueError(f"unknown head variant {self.variant!r}")
        if self.weights.ndim != 3:
            raise InvalidShape(f"head weights must be (C, K, D), got {self.weights.shape}")
        if self.bias is not None and (self.variant != SOFTMAX or self.bias.shape != (self.weights.shape[0],)):
            raise InvalidShape("bias is only supported as a (C,) vector on the softmax head")

    @property
    def n_params(self) -> int:
        return self.weights.size + (0 if self.bias is None else self.bias.size)


def init_head(variant: str, C: int, D: int, K: int = 1, seed: int = 0, bias: bool = False) -> ParametricHead:
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((C * K, D))
    if variant == QUERY:
        w, _ = normalize_rows(w)
    else:
        w = w / np.sqrt(D)
    return ParametricHead(variant, w.reshape(C, K, D), np.zeros(C) if bias else None)


def _logits(head: ParametricHead, e: np.ndarray):
    C, K, D = head.weights.shape
    if e.shape[1] != D:
        raise DimensionMismatch(f"embedding dim {e.shape[1]} != head dim {D}")
    w = head.weights.reshape(C * K, D)
    if head.variant == QUERY:
        e_hat, e_norm = normalize_rows(e)
        w_hat, w_norm = normalize_rows(w)
        logits = e_hat @ w_hat.T
        aux = (e_hat, e_norm, w_hat, w_norm)
    else:
        logits = e @ w.T
        aux = None
    logits = logits.reshape(-1, C, K)
    if head.bias is not None:
        logits = logits + head.bias[None, :, None]
    return logits, aux


def _class_scores(logits):
    k_star = np.argmax(logits, axis=2)
    return np.take_along_axis(logits, k_star[:, :, None], axis=2)[:, :, 0], k_star


def head_posterior(head: ParametricHead, e) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 2:
        raise InvalidShape(f"embeddings must be (N, D), got {e.shape}")
    scores, _ = _class_scores(_logits(head, e)[0])
    return softmax_neg(-scores)


def head_predict(head: ParametricHead, e) -> np.ndarray:
    return np.argmax(head_posterior(head, e), axis=1)


def unified_posterior(G, e, measure="inner") -> np.ndarray:
    """Softmax of ``-<i, g_c>`` over class vectors ``G`` (C, D).

    ``measure`` is ``"inner"`` (negative inner product), ``"cosine"``
    (negative cosine similarity of the normalized inputs), or a
    :class:`DistanceMeasure` applied to the inputs as given.
    """
    G = np.asarray(G, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if G.ndim != 2 or e.ndim != 2 or G.shape[1] != e.shape[1]:
        raise DimensionMismatch(f"G {G.shape} and embeddings {e.shape} are incompatible")
    if isinstance(measure, DistanceMeasure):
        dist = distance_matrix(check_embeddings(e, measure), G, measure)
    elif measure == "inner":
        dist = -(e @ G.T)
    elif measure == "cosine":
        dist = -(normalize_rows(e)[0] @ normalize_rows(G)[0].T)
    else:
        raise ValueError(f"unknown measure {measure!r}")
    return softmax_neg(dist)


def head_loss(head: ParametricHead, e, labels):
    """Mean cross-entropy of the head; returns ``(loss, dweights, dbias, de)``."""
    e = np.asarray(e, dtype=np.float64)
    labels = np.asarray(labels)
    C, K, D = head.weights.shape
    if labels.shape != (e.shape[0],):
        raise DimensionMismatch("need one label per embedding row")
    n = e.shape[0]
    logits, aux = _logits(head, e)
    scores, k_star = _class_scores(logits)
    nll, dz = _neg_log_softmax(scores, labels)
    dscores = dz / n
    dlogits = np.zeros_like(logits)
    np.put_along_axis(dlogits, k_star[:, :, None], dscores[:, :, None], axis=2)
    dbias = dscores.sum(axis=0) if head.bias is not None else None
    dl = dlogits.reshape(n, C * K)
    w = head.weights.reshape(C * K, D)
    if head.variant == QUERY:
        e_hat, e_norm, w_hat, w_norm = aux
        de = normalize_rows_backward(e_hat, e_norm, dl @ w_hat)
        dw = normalize_rows_backward(w_hat, w_norm, dl.T @ e_hat)
    else:
        de = dl @ w
        dw = dl.T @ e
    return float(nll.mean()), dw.reshape(C, K, D), dbias, de


def apply_head_step(head: ParametricHead, dw, dbias, lr: float) -> ParametricHead:
    w = head.weights - lr * dw
    if head.variant == QUERY:
        C, K, D = w.shape
        w = normalize_rows(w.reshape(C * K, D))[0].reshape(C, K, D)
    bias = None if head.bias is None else head.bias - lr * dbias
    return replace(head, weights=w, bias=bias)


def head_train_step(head: ParametricHead, e, labels, lr: float) -> ParametricHead:
    """One SGD step on the head's cross-entropy. Query rows are re-projected to unit norm."""
    if lr == 0:
        return head
    _, dw, db, _ = head_loss(head, e, labels)
    return apply_head_step(head, dw, db, lr)


@dataclass(frozen=True)
class HeadParamCount:
    scheme: str
    C: int
    K: int
    D: int
    learnable_head_params: int


def param_count(scheme: str, C: int, K: int, D: int) -> HeadParamCount:
    """Learnable prototype parameters of a head: C*K*D if parametric, else 0."""
    if scheme not in (PARAMETRIC, NONPARAMETRIC):
        raise ValueError(f"scheme must be {PARAMETRIC!r} or {NONPARAMETRIC!r}, got {scheme!r}")
    if min(C, K, D) < 1:
        raise ValueError("C, K, D must be positive")
    n = C * K * D if scheme == PARAMETRIC else 0
    return HeadParamCount(scheme, C, K, D, n)
