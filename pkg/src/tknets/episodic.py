"""Episodic TKNets training and the ERM baseline family."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import evalx
from . import numcore as nc
from .domains import DomainSequence, SplitSpec, split_sequence
from .tknet import (EncoderSpec, MeasurementSpec, TKNetParams, centroid_graph, embed_graph,
                    init_params, mlp_tensors, param_nodes)

ERM_VARIANTS = ("plain", "near", "weighted", "index-concat", "index-onehot", "index-outer")


class DivergenceError(RuntimeError):
    pass


@dataclass
class Episode:
    """Support from ``S_i`` and query from ``S_{i+1}``; ``index`` is the 1-based support position."""

    index: int
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray


@dataclass
class TrainConfig:
    steps: int = 3000
    n_per_class: int = 10
    optimizer: str = "adam"
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 0
    early_stopping: bool = False
    encoder_hidden: tuple = (64,)
    encoder_activation: str = "tanh"
    rep_dim: int = 2
    measurement: MeasurementSpec = field(default_factory=MeasurementSpec)
    batch_size: int = 64
    log_wall_time: bool = False

    def __post_init__(self):
        self.encoder_hidden = tuple(self.encoder_hidden)
        if isinstance(self.measurement, dict):
            self.measurement = MeasurementSpec(**self.measurement)
        if self.steps < 0 or self.n_per_class < 1 or self.batch_size < 1:
            raise ValueError(f"invalid training budget in {self}")

    def encoder_spec(self, in_dim) -> EncoderSpec:
        return EncoderSpec(in_dim, self.encoder_hidden, self.encoder_activation, self.rep_dim)

    def to_dict(self) -> dict:
        return asdict(self)


class LossResult(NamedTuple):
    value: float
    grads: dict


# ------------------------------------------------------------------ episodes


def sample_episode(seq: DomainSequence, n_per_class: int, rng) -> Episode:
    """Pick a consecutive pair uniformly, then ``n_per_class`` support and query samples per class."""
    pairs = seq.consecutive_pairs()
    if not pairs:
        raise ValueError("sequence has no pair of consecutive domains")
    a, b = pairs[rng.integers(len(pairs))]
    sx, sy, qx, qy = [], [], [], []
    for k in range(seq.n_classes):
        for pos, xs, ys in ((a, sx, sy), (b, qx, qy)):
            members = np.flatnonzero(seq[pos].y == k)
            if len(members) < n_per_class:
                raise ValueError(f"domain {pos} has {len(members)} samples of class {k}, need {n_per_class}")
            pick = rng.choice(members, n_per_class, replace=False)
            xs.append(seq[pos].x[pick])
            ys.append(np.full(n_per_class, k))
    return Episode(a + 1, np.concatenate(sx), np.concatenate(sy), np.concatenate(qx), np.concatenate(qy))


def _label_mask(y, n_classes, weights=None):
    mask = np.zeros((len(y), n_classes))
    mask[np.arange(len(y)), y] = 1.0 if weights is None else weights
    return mask


def episode_loss(params: TKNetParams, episode: Episode) -> LossResult:
    """Mean negative log-probability of the query labels, with gradients for every tensor."""
    nodes = param_nodes(params.tensors)
    c = centroid_graph(nodes, params, episode.support_x, episode.support_y)
    zq = embed_graph(nodes, params, nc.constant(episode.query_x))
    logp = nc.log_softmax(nc.neg_sqdist(zq, c))
    mask = _label_mask(episode.query_y, params.n_classes) / len(episode.query_y)
    loss = nc.scale(nc.reduce_sum(nc.mul(logp, nc.constant(mask))), -1.0)
    nc.forward(loss)
    nc.backward(loss)
    return LossResult(float(loss.value[0, 0]), {k: n.grad for k, n in nodes.items()})


def _log_entry(step, loss, t0, config, val=None):
    entry = {"step": step, "loss": loss}
    if val is not None:
        entry["val_acc"] = val
    if config.log_wall_time:
        entry["wall_time"] = round(time.perf_counter() - t0, 4)
    return entry


def _check_loss(value, step):
    if not math.isfinite(value):
        raise DivergenceError(f"loss became non-finite at step {step}")


def train_tknets(seq: DomainSequence, config: TrainConfig, params: TKNetParams | None = None):
    """Run ``config.steps`` episodes; returns ``(params, log)``.

    Validation uses the last source pair (``S_{m-1}`` through the operator,
    scored on ``S_m``); with ``early_stopping`` the best-validating tensors are
    returned.
    """
    if params is None:
        params = init_params(config.encoder_spec(seq.dim), config.measurement, seq.n_classes, config.seed)
    rng = np.random.default_rng([config.seed, 1])
    state = nc.OptimState(config.optimizer, config.lr)
    tensors = dict(params.tensors)
    log, t0 = [], time.perf_counter()
    best = (-1.0, tensors)
    for step in range(1, config.steps + 1):
        ep = sample_episode(seq, config.n_per_class, rng)
        value, grads = episode_loss(params.with_tensors(tensors), ep)
        _check_loss(value, step)
        tensors, state = nc.optim_step(tensors, grads, state)
        val = None
        if config.eval_every and (step % config.eval_every == 0 or step == config.steps):
            val = evalx.forecast_accuracy(params.with_tensors(tensors), seq)
            if val > best[0]:
                best = (val, tensors)
        log.append(_log_entry(step, value, t0, config, val))
    if config.early_stopping and best[0] >= 0:
        tensors = best[1]
    return params.with_tensors(tensors), log


# ----------------------------------------------------------------------- ERM


@dataclass
class ErmParams:
    encoder: EncoderSpec
    measurement: MeasurementSpec
    n_classes: int
    variant: str
    n_sources: int
    base_dim: int
    tensors: dict = field(default_factory=dict)

    def with_tensors(self, tensors):
        return replace(self, tensors=dict(tensors))

    def header(self) -> dict:
        return dict(model="erm", encoder=asdict(self.encoder), measurement=asdict(self.measurement),
                    n_classes=self.n_classes, variant=self.variant, n_sources=self.n_sources,
                    base_dim=self.base_dim)


def erm_from_checkpoint(meta, tensors) -> ErmParams:
    if meta.get("model") != "erm":
        raise ValueError(f"checkpoint holds a {meta.get('model')!r} model, not erm")
    return ErmParams(EncoderSpec(**meta["encoder"]), MeasurementSpec(**meta["measurement"]),
                     meta["n_classes"], meta["variant"], meta["n_sources"], meta["base_dim"], tensors)


def augmented_dim(variant, dim, n_sources) -> int:
    if variant == "index-concat":
        return dim + 1
    if variant == "index-onehot":
        return dim + n_sources + 1
    if variant == "index-outer":
        return dim * (n_sources + 1)
    return dim


def augment(x, variant, index, n_sources) -> np.ndarray:
    """Attach the 1-based domain ``index`` to raw features.

    Index encodings reserve slot ``n_sources + 1`` for the first unseen domain;
    later indices share that slot.
    """
    x = np.asarray(x, dtype=np.float64)
    if variant == "index-concat":
        return np.hstack([x, np.full((len(x), 1), index / n_sources)])
    if variant in ("index-onehot", "index-outer"):
        onehot = np.zeros((len(x), n_sources + 1))
        onehot[:, min(index, n_sources + 1) - 1] = 1.0
        if variant == "index-onehot":
            return np.hstack([x, onehot])
        return (x[:, :, None] * onehot[:, None, :]).reshape(len(x), -1)
    return x


def erm_training_domains(variant, n_sources) -> list[int]:
    """1-based source indices whose samples enter the ERM loss."""
    return [n_sources] if variant == "near" else list(range(1, n_sources + 1))


def _erm_pool(seq: DomainSequence, variant):
    m = len(seq)
    xs, ys, ws = [], [], []
    for i in erm_training_domains(variant, m):
        d = seq[i - 1]
        xs.append(augment(d.x, variant, i, m))
        ys.append(d.y)
        ws.append(np.full(len(d), i / m if variant == "weighted" else 1.0))
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(ws)


def erm_logits_graph(nodes, params: ErmParams, x):
    z = embed_graph(nodes, params, x)
    return nc.add(nc.matmul(z, nodes["head.W"]), nodes["head.b"])


def erm_batch_loss(params: ErmParams, x, y, w) -> LossResult:
    """Weighted mean cross-entropy ``sum(w * ce) / sum(w)`` on already-augmented inputs."""
    nodes = param_nodes(params.tensors)
    logp = nc.log_softmax(erm_logits_graph(nodes, params, nc.constant(x)))
    mask = _label_mask(y, params.n_classes, w / w.sum())
    loss = nc.scale(nc.reduce_sum(nc.mul(logp, nc.constant(mask))), -1.0)
    nc.forward(loss)
    nc.backward(loss)
    return LossResult(float(loss.value[0, 0]), {k: n.grad for k, n in nodes.items()})


def init_erm(seq: DomainSequence, config: TrainConfig, variant) -> ErmParams:
    if variant not in ERM_VARIANTS:
        raise ValueError(f"unknown ERM variant {variant!r}; expected one of {ERM_VARIANTS}")
    m = len(seq)
    enc = config.encoder_spec(augmented_dim(variant, seq.dim, m))
    rng = np.random.default_rng(config.seed)
    p = init_params(enc, config.measurement, seq.n_classes, rng.integers(2**32))
    tensors = {k: v for k, v in p.tensors.items() if k != "koopman"}
    head = mlp_tensors(rng, "head", (p.koopman_dim, seq.n_classes))
    tensors["head.W"], tensors["head.b"] = head["head.W0"], head["head.b0"]
    return ErmParams(enc, config.measurement, seq.n_classes, variant, m, seq.dim, tensors)


def erm_predict_proba(params: ErmParams, x, index) -> np.ndarray:
    """Class probabilities for raw features ``x`` observed in domain ``index`` (1-based)."""
    xa = augment(x, params.variant, index, params.n_sources)
    nodes = param_nodes(params.tensors)
    return nc.forward(nc.softmax(erm_logits_graph(nodes, params, nc.constant(xa)))).copy()


def erm_accuracy(params: ErmParams, x, y, index) -> float:
    return float(np.mean(erm_predict_proba(params, x, index).argmax(axis=1) == y))


def train_erm(seq: DomainSequence, config: TrainConfig, variant="plain"):
    """Minibatch cross-entropy over pooled source data; returns ``(params, log)``."""
    params = init_erm(seq, config, variant)
    x, y, w = _erm_pool(seq, variant)
    rng = np.random.default_rng([config.seed, 1])
    state = nc.OptimState(config.optimizer, config.lr)
    tensors = dict(params.tensors)
    batch = min(config.batch_size, len(y))
    log, t0 = [], time.perf_counter()
    m = len(seq)
    best = (-1.0, tensors)
    for step in range(1, config.steps + 1):
        idx = rng.choice(len(y), batch, replace=False)
        value, grads = erm_batch_loss(params.with_tensors(tensors), x[idx], y[idx], w[idx])
        _check_loss(value, step)
        tensors, state = nc.optim_step(tensors, grads, state)
        val = None
        if config.eval_every and (step % config.eval_every == 0 or step == config.steps):
            val = erm_accuracy(params.with_tensors(tensors), seq[m - 1].x, seq[m - 1].y, m)
            if val > best[0]:
                best = (val, tensors)
        log.append(_log_entry(step, value, t0, config, val))
    if config.early_stopping and best[0] >= 0:
        tensors = best[1]
    return params.with_tensors(tensors), log


# ------------------------------------------------------------- random search


@dataclass
class SearchSpace:
    """Hyperparameter distributions; ``lr_log10`` bounds are sampled uniformly in log space.

    ``measurements`` and ``encoder_hidden`` left as ``None`` keep the base config's value.
    """

    lr_log10: tuple = (-4.5, -2.5)
    n_per_class: tuple = (5, 10, 20)
    rep_dim: tuple = (2, 4, 8)
    measurements: tuple | None = None
    encoder_hidden: tuple | None = None

    def __post_init__(self):
        for name in ("n_per_class", "rep_dim", "measurements", "encoder_hidden"):
            choices = getattr(self, name)
            if choices is not None and not len(choices):
                raise ValueError(f"search space has no choices for {name}")
        lo, hi = self.lr_log10
        if lo > hi:
            raise ValueError("lr_log10 lower bound exceeds upper bound")

    def sample(self, rng, base: TrainConfig) -> TrainConfig:
        def pick(choices, default):
            return default if choices is None else choices[rng.integers(len(choices))]

        return replace(base, lr=float(10 ** rng.uniform(*self.lr_log10)),
                       n_per_class=int(pick(self.n_per_class, base.n_per_class)),
                       rep_dim=int(pick(self.rep_dim, base.rep_dim)),
                       measurement=pick(self.measurements, base.measurement),
                       encoder_hidden=tuple(pick(self.encoder_hidden, base.encoder_hidden)))


def run_method(method: str, sources: DomainSequence, targets: DomainSequence, config: TrainConfig):
    """Train ``method`` (``tknets`` or ``erm:<variant>``) and score it on each target domain."""
    if method == "tknets":
        params, _ = train_tknets(sources, config)
        last = sources[len(sources) - 1]
        return params, evalx.rollout_multistep(params, last, list(targets.domains))
    if method.startswith("erm"):
        variant = method.split(":", 1)[1] if ":" in method else "plain"
        params, _ = train_erm(sources, config, variant)
        m = len(sources)
        return params, [erm_accuracy(params, d.x, d.y, m + j + 1) for j, d in enumerate(targets.domains)]
    raise ValueError(f"unknown method {method!r}")


def random_search(seq: DomainSequence, space: SearchSpace, n_trials=20, n_repeats=5, seed=0,
                  method="tknets", base: TrainConfig | None = None, split: SplitSpec = SplitSpec()):
    """Sample ``n_trials`` configs, run each ``n_repeats`` times, keep the best mean target accuracy.

    Returns ``(best_config, rows)``; one row per trial with the mean and
    standard deviation over repeats.
    """
    if n_trials < 1 or n_repeats < 1:
        raise ValueError("n_trials and n_repeats must be positive")
    base = base or TrainConfig()
    rng = np.random.default_rng(seed)
    sources, targets = split_sequence(seq, split)
    rows, configs = [], []
    for trial in range(n_trials):
        cfg = space.sample(rng, base)
        accs = []
        for r in range(n_repeats):
            _, scores = run_method(method, sources, targets, replace(cfg, seed=base.seed + r))
            accs.append(scores[0])
        configs.append(cfg)
        rows.append(dict(trial=trial, method=method, lr=cfg.lr, n_per_class=cfg.n_per_class,
                         rep_dim=cfg.rep_dim, measurement=describe_measurement(cfg.measurement),
                         encoder_hidden="x".join(map(str, cfg.encoder_hidden)) or "linear",
                         mean=float(np.mean(accs)), std=float(np.std(accs)), runs=len(accs)))
    best = max(range(n_trials), key=lambda t: rows[t]["mean"])
    return configs[best], rows


def describe_measurement(spec: MeasurementSpec) -> str:
    if spec.kind == "predefined":
        return "+".join(spec.functions)
    return f"learned:{'x'.join(map(str, spec.hidden)) or 'linear'}->{spec.out_dim}"
