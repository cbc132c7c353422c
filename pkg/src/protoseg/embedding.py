"""Embedding-space primitives: normalization, distances and nearest-prototype rules.

Embeddings are ``(N, D)`` float arrays, one row per pixel. Prototype banks
are ``(C, K, D)`` arrays (or anything exposing a ``protos`` attribute of that
shape). Under the cosine measure the rows of both must be unit-norm; this is
checked once on entry to each public function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InvalidShape, NonNormalized, ZeroVector

ZERO_NORM = 1e-12
UNIT_TOL = 1e-6

COSINE = "cosine"
STANDARD = "standard"
HUBERIZED = "huberized"
VARIANTS = (COSINE, STANDARD, HUBERIZED)


@dataclass(frozen=True)
class DistanceMeasure:
    """Pixel-prototype distance. ``delta`` is only read by the huberized form."""

    variant: str = COSINE
    delta: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown distance measure {self.variant!r}; expected one of {VARIANTS}")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")

    @property
    def normalized(self) -> bool:
        return self.variant == COSINE

    @property
    def lower_bound(self) -> float:
        """Smallest value the distance can take (reached at x == y)."""
        return -1.0 if self.variant == COSINE else 0.0


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm < ZERO_NORM:
        raise ZeroVector(f"cannot normalize vector with norm {norm:.3g}")
    return v / norm


def normalize_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise L2 normalization. Returns ``(unit_rows, norms)``."""
    z = np.asarray(z, dtype=np.float64)
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norms < ZERO_NORM):
        raise ZeroVector("cannot normalize a zero row")
    return z / norms, norms


def normalize_rows_backward(unit: np.ndarray, norms: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``z / |z|`` back to ``z``."""
    radial = np.sum(grad_unit * unit, axis=-1, keepdims=True)
    return (grad_unit - radial * unit) / norms


def _check_unit(x: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(x, axis=-1)
    bad = np.abs(norms - 1.0) > UNIT_TOL
    if np.any(bad):
        raise NonNormalized(f"{what} must be unit-norm under the cosine measure "
                            f"(worst norm {norms[bad].flat[0]:.9g})")


def check_embeddings(e, measure: DistanceMeasure) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 1 or e.shape[1] < 2:
        raise InvalidShape(f"embeddings must be (N>=1, D>=2), got shape {e.shape}")
    if not np.all(np.isfinite(e)):
        raise InvalidShape("embeddings contain non-finite entries")
    if measure.normalized:
        _check_unit(e, "embedding rows")
    return e


def as_protos(bank) -> np.ndarray:
    protos = np.asarray(getattr(bank, "protos", bank), dtype=np.float64)
    if protos.ndim != 3:
        raise InvalidShape(f"prototype bank must be (C, K, D), got shape {protos.shape}")
    return protos


def _inputs(e, bank, measure):
    e = check_embeddings(e, measure)
    protos = as_protos(bank)
    if protos.shape[2] != e.shape[1]:
        raise DimensionMismatch(f"embedding dim {e.shape[1]} != prototype dim {protos.shape[2]}")
    return e, protos


def distance(x, y, measure: DistanceMeasure = DistanceMeasure()) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionMismatch(f"shapes {x.shape} and {y.shape} differ")
    if measure.variant == COSINE:
        _check_unit(x, "x")
        _check_unit(y, "y")
        return float(-np.dot(x, y))
    sq = float(np.sum((x - y) ** 2))
    if measure.variant == STANDARD:
        return float(np.sqrt(sq))
    d = measure.delta
    return float(d * (np.sqrt(sq / d**2 + 1.0) - 1.0))


def distance_matrix(e: np.ndarray, p: np.ndarray, measure: DistanceMeasure) -> np.ndarray:
    """All pairwise distances between rows of ``e`` (N, D) and ``p`` (M, D)."""
    if measure.variant == COSINE:
        return -(e @ p.T)
    diff = e[:, None, :] - p[None, :, :]
    sq = np.einsum("nmd,nmd->nm", diff, diff)
    if measure.variant == STANDARD:
        return np.sqrt(sq)
    d = measure.delta
    return d * (np.sqrt(sq / d**2 + 1.0) - 1.0)


def distance_matrix_backward(e: np.ndarray, p: np.ndarray, dist: np.ndarray,
                             grad_dist: np.ndarray, measure: DistanceMeasure) -> np.ndarray:
    """Gradient w.r.t. ``e`` given upstream ``dL/d dist`` of shape (N, M).

    Prototypes are constants here; nothing flows back into ``p``.
    """
    if measure.variant == COSINE:
        return -(grad_dist @ p)
    if measure.variant == STANDARD:
        # subgradient 0 where e == p
        with np.errstate(divide="ignore"):
            w = np.where(dist > 0, 1.0 / np.where(dist > 0, dist, 1.0), 0.0)
    else:
        d = measure.delta
        w = 1.0 / (dist + d)  # == 1 / (delta * sqrt(|e-p|^2/delta^2 + 1))
    gw = grad_dist * w
    return gw.sum(axis=1, keepdims=True) * e - gw @ p


def all_prototype_distances(e, bank, measure: DistanceMeasure = DistanceMeasure()) -> np.ndarray:
    """Distances to every prototype, shape (N, C, K)."""
    e, protos = _inputs(e, bank, measure)
    c, k, dim = protos.shape
    return distance_matrix(e, protos.reshape(c * k, dim), measure).reshape(-1, c, k)


def pixel_class_distances(e, bank, measure: DistanceMeasure = DistanceMeasure()):
    """Distance from each pixel to the closest prototype of each class.

    Returns ``(s, argmin_k)``, both (N, C); ties go to the lowest k.
    """
    dist = all_prototype_distances(e, bank, measure)
    k_star = np.argmin(dist, axis=2)
    s = np.take_along_axis(dist, k_star[:, :, None], axis=2)[:, :, 0]
    return s, k_star


def classify(e, bank, measure: DistanceMeasure = DistanceMeasure()):
    """Winner-take-all over all (class, prototype) pairs.

    Returns ``(c_star, k_star)`` arrays of length N, ties resolved to the
    lexicographically smallest (c, k).
    """
    dist = all_prototype_distances(e, bank, measure)
    n, c, k = dist.shape
    flat = np.argmin(dist.reshape(n, c * k), axis=1)
    return flat // k, flat % k


def softmax_neg(s: np.ndarray) -> np.ndarray:
    """Row-wise softmax of ``-s`` with max-subtraction."""
    z = -s
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def class_posterior(e, bank, measure: DistanceMeasure = DistanceMeasure()) -> np.ndarray:
    s, _ = pixel_class_distances(e, bank, measure)
    return softmax_neg(s)
