"""Balanced within-class assignment of pixels to prototypes.

Each class's pixels are spread over that class's K prototypes by a few
Sinkhorn-Knopp sweeps on ``exp(similarity / kappa)``: rows are pushed
towards mass N/K (equipartition), columns to mass 1 (one prototype per
pixel). The soft plan is then hardened by a per-pixel argmax.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .embedding import DistanceMeasure, as_protos, check_embeddings, distance_matrix
from .errors import DimensionMismatch, InvalidKappa, InvalidShape, NumericalOverflow

DEFAULT_KAPPA = 0.05
DEFAULT_ITERS = 3


@dataclass(frozen=True)
class AssignmentMatrix:
    L: np.ndarray  # (K, N)
    kappa: float
    iters: int


@dataclass(frozen=True)
class Assignment:
    """Per-pixel hard assignment: class ``cls[i]``, prototype ``k[i]`` (-1 = none)."""

    cls: np.ndarray
    k: np.ndarray

    @property
    def complete(self) -> bool:
        return bool(np.all(self.k >= 0))


def sinkhorn_scores(scores: np.ndarray, kappa: float = DEFAULT_KAPPA,
                    iters: int = DEFAULT_ITERS) -> np.ndarray:
    """Sinkhorn-Knopp on a (K, N) similarity matrix; returns the (K, N) plan.

    Columns of the result sum to 1; rows approach N/K as ``iters`` grows.
    """
    if not kappa > 0:
        raise InvalidKappa(f"kappa must be positive, got {kappa}")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or 0 in scores.shape:
        raise InvalidShape(f"scores must be a non-empty (K, N) matrix, got {scores.shape}")
    K, N = scores.shape

    # global shift cancels in the first total-mass normalization
    L = np.exp((scores - scores.max()) / kappa)
    L /= L.sum()
    for _ in range(iters):
        L /= L.sum(axis=1, keepdims=True)
        L /= K
        L /= L.sum(axis=0, keepdims=True)
        L /= N
    L *= N
    if not np.all(np.isfinite(L)):
        raise NumericalOverflow(f"Sinkhorn plan became non-finite (kappa={kappa})")
    return L


def sinkhorn_assign(P, X, kappa: float = DEFAULT_KAPPA, iters: int = DEFAULT_ITERS) -> AssignmentMatrix:
    """Soft assignment of the N columns of ``X`` (D, N) to the K columns of ``P`` (D, K)."""
    P = np.asarray(P, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if P.ndim != 2 or X.ndim != 2 or P.shape[0] != X.shape[0]:
        raise DimensionMismatch(f"P {P.shape} and X {X.shape} must share the leading dimension")
    return AssignmentMatrix(sinkhorn_scores(P.T @ X, kappa, iters), kappa, iters)


def harden(L) -> np.ndarray:
    """Per-pixel argmax over prototypes, lowest index on ties."""
    L = getattr(L, "L", L)
    return np.argmax(np.asarray(L), axis=0)


def cluster_batch_by_class(e, labels, bank, kappa: float = DEFAULT_KAPPA,
                           iters: int = DEFAULT_ITERS,
                           measure: DistanceMeasure = DistanceMeasure(),
                           return_soft: bool = False):
    """Hard (class, prototype) assignment for every pixel of a batch.

    Pixels are only ever matched to prototypes of their own label. Under
    non-cosine measures the similarity is the negated distance. With
    ``return_soft`` the per-class plans are returned too, keyed by class.
    """
    e = check_embeddings(e, measure)
    protos = as_protos(bank)
    C, K, D = protos.shape
    if e.shape[1] != D:
        raise DimensionMismatch(f"embedding dim {e.shape[1]} != prototype dim {D}")
    labels = np.asarray(labels)
    if labels.shape != (e.shape[0],):
        raise DimensionMismatch("need one label per embedding row")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise InvalidShape(f"labels must lie in [0, {C})")

    k_of = np.full(e.shape[0], -1, dtype=np.int64)
    soft = {}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if measure.normalized:
            scores = protos[c] @ e[idx].T
        else:
            scores = -distance_matrix(e[idx], protos[c], measure).T
        L = sinkhorn_scores(scores, kappa, iters)
        k_of[idx] = harden(L)
        if return_soft:
            soft[int(c)] = (idx, L)
    out = Assignment(cls=labels.astype(np.int64).copy(), k=k_of)
    return (out, soft) if return_soft else out


def write_assignment_csv(L, path) -> None:
    """Dump a (K, N) plan transposed to N rows under a ``k0..k{K-1}`` header."""
    L = np.asarray(getattr(L, "L", L))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"k{j}" for j in range(L.shape[0])])
        for col in L.T:
            w.writerow([format(float(v), ".17g") for v in col])
