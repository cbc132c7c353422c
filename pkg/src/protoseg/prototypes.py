"""Non-learnable prototype bank and its momentum update.

The bank holds ``C x K`` prototype vectors. It is never touched by gradient
descent: the only way to change it is :func:`update`, which returns a new
bank. Loss code gets read-only views through :attr:`PrototypeBank.protos`.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding import ZERO_NORM, check_embeddings, DistanceMeasure, normalize_rows
from .errors import ClassMismatch, DimensionMismatch, FormatError, InvalidShape, IoFailure

MAGIC = "PROTOBANK1"


class PrototypeBank:
    __slots__ = ("_protos", "normalized")

    def __init__(self, protos, normalized: bool = True):
        arr = np.array(protos, dtype=np.float64)  # private copy
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise InvalidShape(f"prototypes must be (C>=1, K>=1, D>=1), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidShape("prototypes contain non-finite entries")
        arr.setflags(write=False)
        self._protos = arr
        self.normalized = normalized

    @property
    def protos(self) -> np.ndarray:
        """Read-only (C, K, D) view."""
        return self._protos

    @property
    def shape(self) -> tuple[int, int, int]:
        return self._protos.shape

    C = property(lambda self: self._protos.shape[0])
    K = property(lambda self: self._protos.shape[1])
    D = property(lambda self: self._protos.shape[2])

    def __eq__(self, other):
        if not isinstance(other, PrototypeBank):
            return NotImplemented
        return self.normalized == other.normalized and np.array_equal(self._protos, other._protos)

    def __repr__(self):
        c, k, d = self.shape
        return f"PrototypeBank(C={c}, K={k}, D={d}, normalized={self.normalized})"


@dataclass(frozen=True)
class UpdateStats:
    counts: np.ndarray   # (C, K) pixels assigned this step
    updated: np.ndarray  # (C, K) bool, False exactly where counts == 0


def init(C: int, K: int, D: int, seed: int, normalized: bool = True) -> PrototypeBank:
    """Random unit prototypes drawn i.i.d. from an isotropic Gaussian."""
    if C < 1 or K < 1 or D < 1:
        raise InvalidShape(f"C, K, D must be positive, got {(C, K, D)}")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((C * K, D))
    # a zero draw is measure-zero; redraw keeps determinism anyway
    while np.any(np.linalg.norm(raw, axis=1) < ZERO_NORM):
        raw = rng.standard_normal((C * K, D))
    unit, _ = normalize_rows(raw)
    return PrototypeBank(unit.reshape(C, K, D), normalized=normalized)


def update(bank: PrototypeBank, e, labels, cls, k, mu: float,
           measure: DistanceMeasure | None = None) -> tuple[PrototypeBank, UpdateStats]:
    """Momentum update ``p <- mu * p + (1 - mu) * mean_assigned``.

    ``cls``/``k`` give each pixel's hard assignment; ``k < 0`` marks pixels
    without one. Under a normalized bank the assigned mean is L2-normalized
    and so is the result. Prototypes that receive no pixels are returned
    bit-identical.
    """
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {mu}")
    if measure is None:
        measure = DistanceMeasure() if bank.normalized else DistanceMeasure("standard")
    e = check_embeddings(e, measure)
    C, K, D = bank.shape
    if e.shape[1] != D:
        raise DimensionMismatch(f"embedding dim {e.shape[1]} != prototype dim {D}")
    labels = np.asarray(labels)
    cls = np.asarray(cls)
    k = np.asarray(k)
    if not (labels.shape == cls.shape == k.shape == (e.shape[0],)):
        raise DimensionMismatch("labels and assignments must have one entry per embedding row")

    has = k >= 0
    if np.any(cls[has] != labels[has]):
        bad = int(np.flatnonzero(has & (cls != labels))[0])
        raise ClassMismatch(f"pixel {bad} labelled {labels[bad]} but assigned to class {cls[bad]}")
    if np.any(k >= K) or np.any(cls[has] >= C) or np.any(cls[has] < 0):
        raise InvalidShape("assignment index out of range")

    flat = cls[has] * K + k[has]
    counts = np.bincount(flat, minlength=C * K)
    sums = np.zeros((C * K, D))
    np.add.at(sums, flat, e[has])

    protos = bank.protos.reshape(C * K, D).copy()
    hit = counts > 0
    stats = UpdateStats(counts=counts.reshape(C, K), updated=hit.reshape(C, K))
    if mu == 1.0:
        # renormalizing an already-unit vector can still flip low bits
        return bank, stats
    means = sums[hit] / counts[hit, None]
    if bank.normalized:
        means, _ = normalize_rows(means)
    mixed = mu * protos[hit] + (1.0 - mu) * means
    if bank.normalized:
        mixed, _ = normalize_rows(mixed)
    protos[hit] = mixed
    return PrototypeBank(protos.reshape(C, K, D), normalized=bank.normalized), stats


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def save(bank: PrototypeBank, path) -> None:
    C, K, D = bank.shape
    lines = [f"{MAGIC} {C} {K} {D}"]
    lines += [" ".join(fmt(x) for x in row) for row in bank.protos.reshape(C * K, D)]
    _atomic_write(path, "\n".join(lines) + "\n")


def load(path, normalized: bool = True) -> PrototypeBank:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty prototype file", line=1)
    head = lines[0].split()
    if len(head) != 4 or head[0] != MAGIC:
        raise FormatError(f"expected '{MAGIC} C K D' header", line=1)
    try:
        C, K, D = (int(t) for t in head[1:])
    except ValueError:
        raise FormatError("C, K, D must be integers", line=1) from None
    body = lines[1:]
    if len(body) != C * K:
        raise FormatError(f"expected {C * K} prototype rows, found {len(body)}", line=len(lines))
    rows = []
    for i, line in enumerate(body, start=2):
        parts = line.split()
        if len(parts) != D:
            raise FormatError(f"expected {D} values, found {len(parts)}", line=i)
        try:
            rows.append([float(t) for t in parts])
        except ValueError:
            raise FormatError("non-numeric value", line=i) from None
    return PrototypeBank(np.array(rows).reshape(C, K, D), normalized=normalized)
