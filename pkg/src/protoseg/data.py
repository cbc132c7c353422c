"""Synthetic multi-modal classification data and its CSV container.

Each class is a mixture of isotropic Gaussian blobs ("modes"), so a single
centroid per class describes it poorly while several sub-centroids do.

File format: header ``label,f0,...,f{D-1}[,split]`` then one row per
sample. The optional trailing ``split`` column holds ``train`` or ``val``.
Paths ending in ``.gz`` are gzip-compressed.
"""

from __future__ import annotations

import csv
import gzip
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidSpec, IoFailure

TRAIN = "train"
VAL = "val"
TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class SyntheticSpec:
    # defaults are the committed benchmark: overlapping blobs, so K=1 and
    # loss ablations separate instead of all saturating at 100%
    C: int = 4
    modes_per_class: int = 3
    samples_per_class: int = 300
    D_in: int = 8
    mode_separation: float = 1.5
    noise_scale: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        if min(self.C, self.modes_per_class, self.D_in) < 1:
            raise InvalidSpec("C, modes_per_class and D_in must be positive")
        if self.samples_per_class < 2:
            raise InvalidSpec("samples_per_class must be >= 2 so both splits see every class")
        if self.mode_separation <= 0 or self.noise_scale < 0:
            raise InvalidSpec("mode_separation must be positive and noise_scale non-negative")


@dataclass
class Dataset:
    X: np.ndarray                 # (N, D_in)
    labels: np.ndarray            # (N,) int
    split: np.ndarray             # (N,) str, TRAIN or VAL
    centers: np.ndarray | None = field(default=None, compare=False)  # (C, modes, D_in) when synthetic
    modes: np.ndarray | None = field(default=None, compare=False)    # (N,) generating mode index

    @property
    def C(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def subset(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.split == which
        return self.X[mask], self.labels[mask]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (np.array_equal(self.X, other.X) and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.split, other.split))


def _centers(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Rejection-sample mode centers with pairwise distance >= mode_separation."""
    total = spec.C * spec.modes_per_class
    scale = spec.mode_separation
    centers: list[np.ndarray] = []
    misses = 0
    while len(centers) < total:
        cand = rng.standard_normal(spec.D_in) * scale
        if all(np.linalg.norm(cand - c) >= spec.mode_separation for c in centers):
            centers.append(cand)
            misses = 0
        else:
            misses += 1
            if misses > 200:
                scale *= 1.5
                misses = 0
    return np.array(centers).reshape(spec.C, spec.modes_per_class, spec.D_in)


def stratified_split(labels: np.ndarray, rng: np.random.Generator,
                     train_fraction: float = TRAIN_FRACTION) -> np.ndarray:
    split = np.full(labels.shape, VAL, dtype=object)
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_train = min(max(1, int(round(train_fraction * idx.size))), idx.size - 1)
        split[idx[:n_train]] = TRAIN
    return split.astype(str)


def generate(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    centers = _centers(spec, rng)
    X, labels, modes = [], [], []
    for c in range(spec.C):
        # near-equal share per mode, remainder to the first modes
        per_mode = np.full(spec.modes_per_class, spec.samples_per_class // spec.modes_per_class)
        per_mode[: spec.samples_per_class % spec.modes_per_class] += 1
        for m, n in enumerate(per_mode):
            X.append(centers[c, m] + spec.noise_scale * rng.standard_normal((n, spec.D_in)))
            labels.append(np.full(n, c))
            modes.append(np.full(n, m))
    labels = np.concatenate(labels).astype(np.int64)
    return Dataset(np.concatenate(X), labels, stratified_split(labels, rng), centers,
                   np.concatenate(modes))


def _open(path, mode: str):
    path = Path(path)
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, mode + "b"), newline="")
    return open(path, mode, newline="")


def save(ds: Dataset, path) -> None:
    D = ds.X.shape[1]
    try:
        with _open(path, "w") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label"] + [f"f{j}" for j in range(D)] + ["split"])
            for y, x, s in zip(ds.labels, ds.X, ds.split):
                w.writerow([int(y)] + [format(float(v), ".17g") for v in x] + [s])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load(path, seed: int = 0) -> Dataset:
    """Read a dataset file. Files without a split column get a seeded stratified split."""
    try:
        with _open(path, "r") as fh:
            rows = list(csv.reader(fh))
    except (OSError, EOFError, gzip.BadGzipFile) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise FormatError("empty file", line=1)
    header = [h.strip() for h in rows[0]]
    has_split = bool(header) and header[-1] == "split"
    feats = header[1:-1] if has_split else header[1:]
    if not header or header[0] != "label" or not feats or feats != [f"f{j}" for j in range(len(feats))]:
        raise FormatError("header must be 'label,f0,...,f{D-1}' with an optional trailing 'split'", line=1)
    width = len(header)
    if len(rows) == 1:
        raise FormatError("no data rows", line=2)
    X, labels, split = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise FormatError(f"expected {width} fields, found {len(row)}", line=lineno)
        try:
            y = int(row[0])
            x = [float(v) for v in row[1:1 + len(feats)]]
        except ValueError:
            raise FormatError("non-numeric field", line=lineno) from None
        if y < 0:
            raise FormatError(f"negative label {y}", line=lineno)
        if has_split:
            s = row[-1].strip()
            if s not in (TRAIN, VAL):
                raise FormatError(f"split must be '{TRAIN}' or '{VAL}', got {s!r}", line=lineno)
            split.append(s)
        X.append(x)
        labels.append(y)
    labels = np.array(labels, dtype=np.int64)
    if has_split:
        split = np.array(split)
    else:
        split = stratified_split(labels, np.random.default_rng(seed))
    return Dataset(np.array(X, dtype=np.float64), labels, split)
