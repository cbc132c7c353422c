"""Small tanh MLP mapping raw features to (optionally unit-norm) embeddings.

Forward and backward are written out by hand; the backward pass includes
the final row normalization so upstream gradients can be taken w.r.t. the
unit embeddings directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding import normalize_rows, normalize_rows_backward
from .errors import FormatError, InvalidShape, IoFailure, StaleCache
from .prototypes import _atomic_write, fmt

MAGIC = "PROTOENC1"
DEFAULT_HIDDEN = (64, 64)


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.5
    iterations: int = 2000
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")


@dataclass
class ForwardCache:
    acts: list          # input to each layer; acts[0] is the raw batch
    out: np.ndarray     # final output (unit rows when normalizing)
    norms: np.ndarray | None
    version: int


class MlpEncoder:
    def __init__(self, sizes, seed: int = 0, normalize_output: bool = True):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise InvalidShape(f"layer sizes must have >= 2 positive entries, got {sizes}")
        self.sizes = sizes
        self.normalize_output = normalize_output
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(3.0 / fan_in)  # unit-variance preactivations for unit-variance inputs
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.version = 0

    @classmethod
    def from_params(cls, weights, biases, normalize_output: bool = True) -> "MlpEncoder":
        weights = [np.array(w, dtype=np.float64) for w in weights]
        biases = [np.array(b, dtype=np.float64) for b in biases]
        sizes = [weights[0].shape[0]] + [w.shape[1] for w in weights]
        enc = cls.__new__(cls)
        enc.sizes = sizes
        enc.normalize_output = normalize_output
        enc.weights, enc.biases = weights, biases
        enc.version = 0
        enc._check_shapes(list(zip(weights, biases)))
        return enc

    @property
    def params(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.weights, self.biases))

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.params)

    def _check_shapes(self, pairs) -> None:
        if len(pairs) != len(self.sizes) - 1:
            raise InvalidShape(f"expected {len(self.sizes) - 1} layers, got {len(pairs)}")
        for i, ((w, b), fan_in, fan_out) in enumerate(zip(pairs, self.sizes[:-1], self.sizes[1:])):
            if np.shape(w) != (fan_in, fan_out) or np.shape(b) != (fan_out,):
                raise InvalidShape(f"layer {i}: expected W {(fan_in, fan_out)} and b {(fan_out,)}, "
                                   f"got {np.shape(w)} and {np.shape(b)}")

    def forward(self, x) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise InvalidShape(f"input must be (N, {self.sizes[0]}), got {x.shape}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(self.params):
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
                acts.append(h)
        norms = None
        if self.normalize_output:
            h, norms = normalize_rows(h)
        return h, ForwardCache(acts=acts, out=h, norms=norms, version=self.version)

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: ForwardCache, grad_out) -> list[tuple[np.ndarray, np.ndarray]]:
        """Parameter gradients ``[(dW, db), ...]`` for an upstream gradient on the output."""
        if cache.version != self.version:
            raise StaleCache(f"cache from parameter version {cache.version}, encoder is at {self.version}")
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != cache.out.shape:
            raise InvalidShape(f"upstream gradient {g.shape} != output {cache.out.shape}")
        if self.normalize_output:
            g = normalize_rows_backward(cache.out, cache.norms, g)
        grads = []
        for i in range(len(self.weights) - 1, -1, -1):
            a = cache.acts[i]
            grads.append((a.T @ g, g.sum(axis=0)))
            if i > 0:
                g = (g @ self.weights[i].T) * (1.0 - a**2)
        return grads[::-1]

    def sgd_step(self, grads, lr: float) -> "MlpEncoder":
        self._check_shapes(grads)
        for i, (dw, db) in enumerate(grads):
            self.weights[i] = self.weights[i] - lr * dw
            self.biases[i] = self.biases[i] - lr * db
        self.version += 1
        return self

    def copy(self) -> "MlpEncoder":
        return MlpEncoder.from_params(self.weights, self.biases, self.normalize_output)


def save(enc: MlpEncoder, path) -> None:
    lines = [MAGIC, " ".join(str(s) for s in enc.sizes)]
    for w, b in enc.params:
        lines += [" ".join(fmt(x) for x in row) for row in w]
        lines.append(" ".join(fmt(x) for x in b))
    _atomic_write(path, "\n".join(lines) + "\n")


def load(path, normalize_output: bool = True) -> MlpEncoder:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if not lines or lines[0].strip() != MAGIC:
        raise FormatError(f"expected '{MAGIC}' header", line=1)
    try:
        sizes = [int(t) for t in lines[1].split()]
    except (IndexError, ValueError):
        raise FormatError("bad layer sizes line", line=2) from None
    pos = 2
    weights, biases = [], []

    def row(width):
        nonlocal pos
        if pos >= len(lines):
            raise FormatError("unexpected end of file", line=pos + 1)
        parts = lines[pos].split()
        if len(parts) != width:
            raise FormatError(f"expected {width} values, found {len(parts)}", line=pos + 1)
        try:
            vals = [float(t) for t in parts]
        except ValueError:
            raise FormatError("non-numeric value", line=pos + 1) from None
        pos += 1
        return vals

    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(np.array([row(fan_out) for _ in range(fan_in)]).reshape(fan_in, fan_out))
        biases.append(np.array(row(fan_out)))
    if pos != len(lines):
        raise FormatError("trailing data after last layer", line=pos + 1)
    return MlpEncoder.from_params(weights, biases, normalize_output)
