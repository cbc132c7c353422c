"""Training objectives over pixel-prototype distances and their gradients.

Every loss is a mean over pixels and returns ``(value, grad)`` where ``grad``
has the shape of the embeddings. Under the cosine measure the gradient is
taken through the row normalization, i.e. it is the gradient of
``loss(normalize(e))`` evaluated at the (unit) input. Prototypes are read
through the bank's read-only view and never receive a gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import Assignment
from .embedding import (
    DistanceMeasure,
    as_protos,
    check_embeddings,
    distance_matrix,
    distance_matrix_backward,
)
from .errors import ClassMismatch, DimensionMismatch, MissingAssignment


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.01
    lambda2: float = 0.01
    tau: float = 0.1

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    ppc: float
    ppd: float
    total: float
    grad: np.ndarray


class _Distances:
    """Distances from a batch to every prototype, shared by all three losses."""

    def __init__(self, e, bank, measure):
        self.measure = measure
        self.e = check_embeddings(e, measure)
        protos = as_protos(bank)
        if protos.shape[2] != self.e.shape[1]:
            raise DimensionMismatch(f"embedding dim {self.e.shape[1]} != prototype dim {protos.shape[2]}")
        self.C, self.K, D = protos.shape
        self.flat_protos = protos.reshape(self.C * self.K, D)
        self.flat = distance_matrix(self.e, self.flat_protos, measure)  # (N, C*K)

    @property
    def n(self) -> int:
        return self.e.shape[0]

    def backward(self, grad_flat: np.ndarray) -> np.ndarray:
        g = distance_matrix_backward(self.e, self.flat_protos, self.flat, grad_flat, self.measure)
        if self.measure.normalized:
            g = g - np.sum(g * self.e, axis=1, keepdims=True) * self.e
        return g


def _neg_log_softmax(logits: np.ndarray, target: np.ndarray):
    """Per-row ``-log softmax(logits)[target]`` and its gradient w.r.t. logits."""
    rows = np.arange(logits.shape[0])
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1)
    nll = np.log(denom) - z[rows, target]
    dz = ez / denom[:, None]
    dz[rows, target] -= 1.0
    return nll, dz


def _labels(labels, n, C):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionMismatch("need one label per embedding row")
    if labels.min() < 0 or labels.max() >= C:
        raise ClassMismatch(f"labels must lie in [0, {C})")
    return labels


def _positive_index(assign: Assignment, n: int, C: int, K: int) -> np.ndarray:
    cls = np.asarray(assign.cls)
    k = np.asarray(assign.k)
    if cls.shape != (n,) or k.shape != (n,):
        raise DimensionMismatch("need one assignment per embedding row")
    if np.any(k < 0):
        raise MissingAssignment(f"{int(np.sum(k < 0))} pixel(s) have no prototype assignment")
    if np.any(k >= K) or np.any(cls < 0) or np.any(cls >= C):
        raise DimensionMismatch("assignment index out of range")
    return cls * K + k


def _ce(dd: _Distances, labels):
    labels = _labels(labels, dd.n, dd.C)
    dist = dd.flat.reshape(dd.n, dd.C, dd.K)
    k_star = np.argmin(dist, axis=2)
    s = np.take_along_axis(dist, k_star[:, :, None], axis=2)[:, :, 0]
    nll, dz = _neg_log_softmax(-s, labels)
    ds = -dz / dd.n
    g = np.zeros_like(dist)
    # min-pooling backprop: full subgradient to the argmin prototype
    np.put_along_axis(g, k_star[:, :, None], ds[:, :, None], axis=2)
    return float(nll.mean()), g.reshape(dd.n, -1)


def _ppc(dd: _Distances, pos: np.ndarray, tau: float):
    nll, dz = _neg_log_softmax(-dd.flat / tau, pos)
    return float(nll.mean()), -dz / (tau * dd.n)


def _ppd(dd: _Distances, pos: np.ndarray):
    rows = np.arange(dd.n)
    gap = dd.flat[rows, pos] - dd.measure.lower_bound  # 1 - i.p under cosine
    g = np.zeros_like(dd.flat)
    g[rows, pos] = 2.0 * gap / dd.n
    return float(np.mean(gap**2)), g


def loss_ce(e, labels, bank, measure: DistanceMeasure = DistanceMeasure()):
    """Cross-entropy over negated pixel-class distances."""
    dd = _Distances(e, bank, measure)
    value, g = _ce(dd, labels)
    return value, dd.backward(g)


def loss_ppc(e, assign: Assignment, bank, tau: float = 0.1,
             measure: DistanceMeasure = DistanceMeasure()):
    """Contrast each pixel's assigned prototype against all CK-1 others."""
    dd = _Distances(e, bank, measure)
    value, g = _ppc(dd, _positive_index(assign, dd.n, dd.C, dd.K), tau)
    return value, dd.backward(g)


def loss_ppd(e, assign: Assignment, bank, measure: DistanceMeasure = DistanceMeasure()):
    """Squared gap between each pixel and its assigned prototype; (1 - i.p)^2 for cosine."""
    dd = _Distances(e, bank, measure)
    value, g = _ppd(dd, _positive_index(assign, dd.n, dd.C, dd.K))
    return value, dd.backward(g)


def loss_total(e, labels, assign: Assignment, bank,
               measure: DistanceMeasure = DistanceMeasure(),
               weights: LossWeights = LossWeights()) -> LossBreakdown:
    dd = _Distances(e, bank, measure)
    labels = _labels(labels, dd.n, dd.C)
    pos = _positive_index(assign, dd.n, dd.C, dd.K)
    if np.any(np.asarray(assign.cls) != labels):
        raise ClassMismatch("assignments must pair every pixel with its own class")
    ce, g = _ce(dd, labels)
    ppc, g_ppc = _ppc(dd, pos, weights.tau)
    ppd, g_ppd = _ppd(dd, pos)
    total = ce + weights.lambda1 * ppc + weights.lambda2 * ppd
    g = g + weights.lambda1 * g_ppc + weights.lambda2 * g_ppd
    return LossBreakdown(ce=ce, ppc=ppc, ppd=ppd, total=total, grad=dd.backward(g))
