"""Training loop, evaluation, config files and ablation sweeps.

One nonparametric iteration is, in order: embed the batch, assign pixels to
their class's prototypes, evaluate the combined loss on the hard
assignments, take an SGD step on the encoder only, then move the assigned
prototypes towards the (pre-step) embeddings by momentum. Parametric
schemes replace the last three steps with plain cross-entropy training of
a learnable head.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, clustering, data, encoder as enc_mod, prototypes
from .data import SyntheticSpec
from .embedding import DistanceMeasure, classify
from .encoder import DEFAULT_HIDDEN, MlpEncoder, SgdConfig
from .errors import ConfigError, EmptySplit, NumericalDivergence
from .losses import LossBreakdown, LossWeights, loss_total

NONPARAMETRIC = "nonparametric"
PARAMETRIC_SOFTMAX = "parametric-softmax"
PARAMETRIC_QUERY = "parametric-query"
SCHEMES = (NONPARAMETRIC, PARAMETRIC_SOFTMAX, PARAMETRIC_QUERY)


@dataclass(frozen=True)
class HyperParams:
    K: int = 10
    tau: float = 0.1
    kappa: float = 0.05
    mu: float = 0.999
    lambda1: float = 0.01
    lambda2: float = 0.01
    sinkhorn_iters: int = 3
    distance: str = "cosine"
    delta: float = 0.1

    def validate(self) -> None:
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if not (self.tau > 0 and self.kappa > 0):
            raise ConfigError("tau and kappa must be positive")
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError("mu must lie in [0, 1]")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be non-negative")
        if self.sinkhorn_iters < 1:
            raise ConfigError("sinkhorn_iters must be >= 1")
        try:
            self.measure
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def measure(self) -> DistanceMeasure:
        return DistanceMeasure(self.distance, self.delta)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.tau)


@dataclass(frozen=True)
class TrainConfig:
    hyper: HyperParams = HyperParams()
    sgd: SgdConfig = SgdConfig()
    scheme: str = NONPARAMETRIC
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    embed_dim: int = 16
    head_protos: int = 1
    head_bias: bool = False
    lr_decay: float = 0.0
    data: str | None = None
    synthetic: SyntheticSpec = SyntheticSpec()

    def validate(self) -> None:
        self.hyper.validate()
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.embed_dim < 2 or self.head_protos < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("embed_dim must be >= 2, head_protos and hidden sizes >= 1")
        if self.lr_decay < 0:
            raise ConfigError("lr_decay must be non-negative")
        if self.scheme != NONPARAMETRIC and self.hyper.distance != "cosine":
            raise ConfigError("parametric schemes only support the cosine measure")

    def with_seed(self, seed: int) -> "TrainConfig":
        return dataclasses.replace(self, sgd=dataclasses.replace(self.sgd, seed=seed))


# flat config keys -> (section, field, parser)
def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(t) for t in s.replace(",", " ").split())


_KEYS = {
    "K": ("hyper", "K", int),
    "tau": ("hyper", "tau", float),
    "kappa": ("hyper", "kappa", float),
    "mu": ("hyper", "mu", float),
    "lambda1": ("hyper", "lambda1", float),
    "lambda2": ("hyper", "lambda2", float),
    "sinkhorn_iters": ("hyper", "sinkhorn_iters", int),
    "distance": ("hyper", "distance", str),
    "delta": ("hyper", "delta", float),
    "learning_rate": ("sgd", "learning_rate", float),
    "iterations": ("sgd", "iterations", int),
    "batch_size": ("sgd", "batch_size", int),
    "seed": ("sgd", "seed", int),
    "scheme": (None, "scheme", str),
    "hidden": (None, "hidden", _parse_ints),
    "embed_dim": (None, "embed_dim", int),
    "head_protos": (None, "head_protos", int),
    "head_bias": (None, "head_bias", _parse_bool),
    "lr_decay": (None, "lr_decay", float),
    "data": (None, "data", str),
    "classes": ("synthetic", "C", int),
    "modes_per_class": ("synthetic", "modes_per_class", int),
    "samples_per_class": ("synthetic", "samples_per_class", int),
    "input_dim": ("synthetic", "D_in", int),
    "mode_separation": ("synthetic", "mode_separation", float),
    "noise_scale": ("synthetic", "noise_scale", float),
    "data_seed": ("synthetic", "seed", int),
}


def config_from_dict(values: dict, base: TrainConfig = TrainConfig()) -> TrainConfig:
    sections = {"hyper": {}, "sgd": {}, "synthetic": {}, None: {}}
    for key, raw in values.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        section, name, parse = _KEYS[key]
        try:
            sections[section][name] = parse(raw) if isinstance(raw, str) else raw
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
        if name == "hidden":
            sections[section][name] = tuple(sections[section][name])
    try:
        cfg = dataclasses.replace(
            base,
            hyper=dataclasses.replace(base.hyper, **sections["hyper"]),
            sgd=dataclasses.replace(base.sgd, **sections["sgd"]),
            synthetic=dataclasses.replace(base.synthetic, **sections["synthetic"]),
            **sections[None],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def config_to_dict(cfg: TrainConfig) -> dict:
    out = {}
    for key, (section, name, _) in _KEYS.items():
        obj = cfg if section is None else getattr(cfg, section)
        value = getattr(obj, name)
        out[key] = list(value) if isinstance(value, tuple) else value
    return out


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from None
    return config_from_dict(parse_config_text(text, str(path)))


@dataclass
class TrainState:
    config: TrainConfig
    encoder: MlpEncoder
    bank: prototypes.PrototypeBank | None = None
    head: baselines.ParametricHead | None = None
    iteration: int = 0
    history: list = field(default_factory=list)      # [iter, ce, ppc, ppd, total]
    proto_drift: list = field(default_factory=list)  # max |p_new - p_old| per iteration
    max_norm_error: float = 0.0                      # worst | |p| - 1 | seen after any update

    @property
    def head_params(self) -> int:
        if self.config.scheme == NONPARAMETRIC:
            return 0
        return self.head.n_params

    def embed(self, X) -> np.ndarray:
        return self.encoder(X)


def init_state(cfg: TrainConfig, D_in: int, C: int) -> TrainState:
    cfg.validate()
    seed = cfg.sgd.seed
    measure = cfg.hyper.measure
    sizes = [D_in, *cfg.hidden, cfg.embed_dim]
    encoder = MlpEncoder(sizes, seed=seed, normalize_output=measure.normalized)
    state = TrainState(config=cfg, encoder=encoder)
    if cfg.scheme == NONPARAMETRIC:
        state.bank = prototypes.init(C, cfg.hyper.K, cfg.embed_dim, seed + 1, normalized=measure.normalized)
    else:
        variant = baselines.SOFTMAX if cfg.scheme == PARAMETRIC_SOFTMAX else baselines.QUERY
        state.head = baselines.init_head(variant, C, cfg.embed_dim, K=cfg.head_protos, seed=seed + 1,
                                         bias=cfg.head_bias)
    return state


class StratifiedSampler:
    """Mini-batches drawing (nearly) equal counts from every class.

    Each class cycles through its own seeded permutations, so every sample is
    seen once per class-epoch.
    """

    def __init__(self, labels, batch_size: int, rng: np.random.Generator):
        self.rng = rng
        self.batch_size = batch_size
        self.pools = [np.flatnonzero(labels == c) for c in np.unique(labels)]
        self.orders = [rng.permutation(p) for p in self.pools]
        self.cursor = [0] * len(self.pools)

    def _take(self, j: int, n: int) -> list[np.ndarray]:
        out = []
        while n > 0:
            order = self.orders[j]
            got = order[self.cursor[j]: self.cursor[j] + n]
            out.append(got)
            n -= got.size
            self.cursor[j] += got.size
            if self.cursor[j] >= order.size:
                self.orders[j] = self.rng.permutation(self.pools[j])
                self.cursor[j] = 0
        return out

    def next(self) -> np.ndarray:
        n_cls = len(self.pools)
        share = np.full(n_cls, self.batch_size // n_cls)
        share[: self.batch_size % n_cls] += 1
        parts = []
        for j, n in enumerate(share):
            parts += self._take(j, int(n))
        return np.concatenate(parts)


def _check_finite(lb: LossBreakdown, iteration: int) -> None:
    for name in ("ce", "ppc", "ppd", "total"):
        if not math.isfinite(getattr(lb, name)):
            raise NumericalDivergence(name, iteration)
    if not np.all(np.isfinite(lb.grad)):
        raise NumericalDivergence("gradient", iteration)


def train_iteration(state: TrainState, X, y) -> TrainState:
    """Advance ``state`` by one mini-batch (in place) and return it."""
    cfg = state.config
    hp = cfg.hyper
    lr = cfg.sgd.learning_rate / (1.0 + cfg.lr_decay * state.iteration)
    e, cache = state.encoder.forward(X)

    if cfg.scheme == NONPARAMETRIC:
        measure = hp.measure
        assign = clustering.cluster_batch_by_class(e, y, state.bank, hp.kappa, hp.sinkhorn_iters, measure)
        lb = loss_total(e, y, assign, state.bank, measure, hp.weights)
        _check_finite(lb, state.iteration)
        state.encoder.sgd_step(state.encoder.backward(cache, lb.grad), lr)
        old = state.bank.protos
        state.bank, _ = prototypes.update(state.bank, e, y, assign.cls, assign.k, hp.mu, measure)
        new = state.bank.protos
        state.proto_drift.append(float(np.max(np.linalg.norm(new - old, axis=2))))
        if state.bank.normalized:
            err = float(np.max(np.abs(np.linalg.norm(new, axis=2) - 1.0)))
            state.max_norm_error = max(state.max_norm_error, err)
        row = [state.iteration, lb.ce, lb.ppc, lb.ppd, lb.total]
    else:
        ce, dw, db, de = baselines.head_loss(state.head, e, y)
        if not (math.isfinite(ce) and np.all(np.isfinite(de))):
            raise NumericalDivergence("ce", state.iteration)
        state.encoder.sgd_step(state.encoder.backward(cache, de), lr)
        state.head = baselines.apply_head_step(state.head, dw, db, lr)
        row = [state.iteration, ce, 0.0, 0.0, ce]

    state.history.append(row)
    state.iteration += 1
    return state


@dataclass
class EvalReport:
    accuracy: float
    per_class_iou: list          # float, or None for classes absent from the split
    miou: float
    confusion: np.ndarray        # (C, C), rows = truth, cols = prediction
    loss_history: list
    head_params: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "miou": self.miou,
            "per_class_iou": self.per_class_iou,
            "confusion": self.confusion.tolist(),
        }


def score_predictions(pred, labels, C: int):
    """Accuracy, per-class IoU (None where the class is absent), mIoU, confusion."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptySplit("no samples to evaluate")
    conf = np.zeros((C, C), dtype=np.int64)
    np.add.at(conf, (labels, pred), 1)
    tp = np.diag(conf)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    present = conf.sum(axis=1) > 0
    ious = []
    for c in range(C):
        denom = tp[c] + fp[c] + fn[c]
        ious.append(float(tp[c] / denom) if present[c] else None)
    miou = float(np.mean([ious[c] for c in range(C) if present[c]]))
    return float(np.mean(pred == labels)), ious, miou, conf


def predict(state: TrainState, X) -> np.ndarray:
    e = state.embed(X)
    if state.config.scheme == NONPARAMETRIC:
        c_star, _ = classify(e, state.bank, state.config.hyper.measure)
        return c_star
    return baselines.head_predict(state.head, e)


def n_classes(state: TrainState) -> int:
    return state.bank.C if state.bank is not None else state.head.weights.shape[0]


def evaluate(state: TrainState, ds: data.Dataset, split: str = data.VAL) -> EvalReport:
    X, y = ds.subset(split)
    if y.size == 0:
        raise EmptySplit(f"split {split!r} is empty")
    acc, ious, miou, conf = score_predictions(predict(state, X), y, n_classes(state))
    return EvalReport(acc, ious, miou, conf, [list(r) for r in state.history], state.head_params)


def resolve_dataset(cfg: TrainConfig) -> data.Dataset:
    if cfg.data:
        return data.load(cfg.data, seed=cfg.synthetic.seed)
    return data.generate(cfg.synthetic)


def train(cfg: TrainConfig, ds: data.Dataset | None = None, checkpoint_dir=None,
          iterations: int | None = None) -> tuple[TrainState, EvalReport]:
    cfg.validate()
    if ds is None:
        ds = resolve_dataset(cfg)
    X, y = ds.subset(data.TRAIN)
    if y.size == 0:
        raise EmptySplit("training split is empty")
    state = init_state(cfg, ds.X.shape[1], int(ds.labels.max()) + 1)
    sampler = StratifiedSampler(y, cfg.sgd.batch_size, np.random.default_rng(cfg.sgd.seed + 2))
    for _ in range(cfg.sgd.iterations if iterations is None else iterations):
        idx = sampler.next()
        train_iteration(state, X[idx], y[idx])
    if checkpoint_dir is not None:
        save_checkpoint(state, checkpoint_dir)
    return state, evaluate(state, ds, data.VAL)


def save_checkpoint(state: TrainState, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    enc_mod.save(state.encoder, d / "encoder.txt")
    if state.bank is not None:
        prototypes.save(state.bank, d / "prototypes.txt")
    else:
        h = state.head
        C, K, D = h.weights.shape
        bank = prototypes.PrototypeBank(h.weights, normalized=False)
        prototypes.save(bank, d / "head.txt")
        if h.bias is not None:
            prototypes.save(prototypes.PrototypeBank(h.bias.reshape(C, 1, 1), normalized=False),
                            d / "head_bias.txt")


def load_checkpoint(cfg: TrainConfig, directory) -> TrainState:
    d = Path(directory)
    measure = cfg.hyper.measure
    state = TrainState(config=cfg, encoder=enc_mod.load(d / "encoder.txt", measure.normalized))
    if cfg.scheme == NONPARAMETRIC:
        state.bank = prototypes.load(d / "prototypes.txt", normalized=measure.normalized)
    else:
        w = prototypes.load(d / "head.txt", normalized=False).protos.copy()
        bias = None
        if (d / "head_bias.txt").exists():
            bias = prototypes.load(d / "head_bias.txt", normalized=False).protos.reshape(-1).copy()
        variant = baselines.SOFTMAX if cfg.scheme == PARAMETRIC_SOFTMAX else baselines.QUERY
        state.head = baselines.ParametricHead(variant, w, bias)
    return state


def metrics(cfg: TrainConfig, report: EvalReport) -> dict:
    return {
        "config": config_to_dict(cfg),
        "loss_history": report.loss_history,
        "eval": report.to_dict(),
        "head_params": report.head_params,
    }


def metrics_json(cfg: TrainConfig, report: EvalReport) -> str:
    return json.dumps(metrics(cfg, report), indent=1, sort_keys=True, allow_nan=False)


LOSS_COMBOS = {
    "ce": (False, False),
    "ce+ppc": (True, False),
    "ce+ppd": (False, True),
    "ce+ppc+ppd": (True, True),
}
AXES = ("losses", "K", "mu", "distance")


def config_for(cfg: TrainConfig, axis: str, value) -> TrainConfig:
    hp = cfg.hyper
    if axis == "losses":
        if value not in LOSS_COMBOS:
            raise ConfigError(f"loss combination must be one of {sorted(LOSS_COMBOS)}, got {value!r}")
        use_ppc, use_ppd = LOSS_COMBOS[value]
        hp = dataclasses.replace(hp, lambda1=hp.lambda1 if use_ppc else 0.0,
                                 lambda2=hp.lambda2 if use_ppd else 0.0)
    elif axis == "K":
        hp = dataclasses.replace(hp, K=int(value))
    elif axis == "mu":
        hp = dataclasses.replace(hp, mu=float(value))
    elif axis == "distance":
        hp = dataclasses.replace(hp, distance=str(value))
    else:
        raise ConfigError(f"ablation axis must be one of {AXES}, got {axis!r}")
    out = dataclasses.replace(cfg, hyper=hp)
    out.validate()
    return out


def ablation_sweep(cfg: TrainConfig, axis: str, values, seeds=(0,), ds: data.Dataset | None = None) -> list[dict]:
    """Train one model per (value, seed); every value shares the same seeds and data."""
    configs = [(v, config_for(cfg, axis, v)) for v in values]
    if ds is None:
        ds = resolve_dataset(cfg)
    rows = []
    for value, vcfg in configs:
        for seed in seeds:
            _, report = train(vcfg.with_seed(seed), ds)
            rows.append({"axis": axis, "value": value, "seed": seed,
                         "accuracy": report.accuracy, "miou": report.miou,
                         "head_params": report.head_params})
    return rows
