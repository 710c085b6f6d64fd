"""Encoder, measurement functions, Koopman operator and the prototype head."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc

MEASUREMENT_FUNCTIONS = ("identity", "sin", "cos", "square", "exp", "tanh")

CHECKPOINT_MAGIC = b"TKNETCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderSpec:
    in_dim: int
    hidden: tuple = (64,)
    activation: str = "tanh"
    out_dim: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.out_dim < 1 or self.in_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError(f"invalid encoder widths: {self}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"encoder activation must be relu or tanh, got {self.activation!r}")


@dataclass(frozen=True)
class MeasurementSpec:
    """Either a fixed bank of elementwise functions or a trainable MLP."""

    kind: str = "predefined"
    functions: tuple = ("identity",)
    hidden: tuple = ()
    out_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "functions", tuple(self.functions))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind == "predefined":
            bad = [f for f in self.functions if f not in MEASUREMENT_FUNCTIONS]
            if not self.functions or bad:
                raise ValueError(f"predefined functions must be drawn from {MEASUREMENT_FUNCTIONS}, got {self.functions}")
        elif self.kind == "learned":
            if self.out_dim < 1:
                raise ValueError("learned measurement needs out_dim >= 1")
        else:
            raise ValueError(f"unknown measurement kind {self.kind!r}")

    def koopman_dim(self, rep_dim: int) -> int:
        if self.kind == "predefined":
            return len(self.functions) * rep_dim
        return self.out_dim


@dataclass
class TKNetParams:
    encoder: EncoderSpec
    measurement: MeasurementSpec
    n_classes: int
    tensors: dict = field(default_factory=dict)

    @property
    def koopman_dim(self) -> int:
        return self.measurement.koopman_dim(self.encoder.out_dim)

    @property
    def koopman(self) -> np.ndarray:
        return self.tensors["koopman"]

    def copy(self) -> "TKNetParams":
        return TKNetParams(self.encoder, self.measurement, self.n_classes,
                           {k: v.copy() for k, v in self.tensors.items()})

    def with_tensors(self, tensors: dict) -> "TKNetParams":
        return TKNetParams(self.encoder, self.measurement, self.n_classes, dict(tensors))

    def header(self) -> dict:
        return dict(model="tknets", encoder=asdict(self.encoder),
                    measurement=asdict(self.measurement), n_classes=self.n_classes,
                    koopman_dim=self.koopman_dim)


def _linear_init(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, (fan_in, fan_out))
    b = rng.uniform(-bound, bound, (1, fan_out))
    return w, b


def mlp_tensors(rng, prefix, widths) -> dict:
    out = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        out[f"{prefix}.W{i}"], out[f"{prefix}.b{i}"] = _linear_init(rng, a, b)
    return out


def init_params(encoder: EncoderSpec, measurement: MeasurementSpec, n_classes: int,
                seed=0, koopman_noise=0.01) -> TKNetParams:
    """Uniform fan-in initialisation; the Koopman matrix starts at identity plus small noise."""
    rng = np.random.default_rng(seed)
    tensors = mlp_tensors(rng, "enc", (encoder.in_dim, *encoder.hidden, encoder.out_dim))
    if measurement.kind == "learned":
        tensors.update(mlp_tensors(rng, "meas", (encoder.out_dim, *measurement.hidden, measurement.out_dim)))
    k = measurement.koopman_dim(encoder.out_dim)
    tensors["koopman"] = np.eye(k) + koopman_noise * rng.standard_normal((k, k))
    return TKNetParams(encoder, measurement, n_classes, tensors)


# ------------------------------------------------------------- graph builders


def param_nodes(tensors: dict) -> dict:
    return {name: nc.param(arr, name) for name, arr in tensors.items()}


def mlp_graph(nodes, prefix, n_layers, act, x):
    h = x
    for i in range(n_layers):
        h = nc.add(nc.matmul(h, nodes[f"{prefix}.W{i}"]), nodes[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            h = nc.activation(h, act)
    return h


def encode_graph(nodes, spec: EncoderSpec, x):
    return mlp_graph(nodes, "enc", len(spec.hidden) + 1, spec.activation, x)


def measure_graph(nodes, spec: MeasurementSpec, v):
    if spec.kind == "learned":
        return mlp_graph(nodes, "meas", len(spec.hidden) + 1, "tanh", v)
    return nc.concat([v if f == "identity" else nc.activation(v, f) for f in spec.functions])


def embed_graph(nodes, params: TKNetParams, x):
    return measure_graph(nodes, params.measurement, encode_graph(nodes, params.encoder, x))


def forecast_graph(nodes, z, power=1):
    kt = nc.transpose(nodes["koopman"])
    for _ in range(power):
        z = nc.matmul(z, kt)
    return z


def class_mean_matrix(y: np.ndarray, n_classes: int) -> np.ndarray:
    """``(K, n)`` matrix whose product with a row batch gives per-class means."""
    counts = np.bincount(y, minlength=n_classes)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"no support samples for classes {missing}")
    onehot = np.zeros((n_classes, len(y)))
    onehot[y, np.arange(len(y))] = 1.0
    return onehot / counts[:, None]


def centroid_graph(nodes, params: TKNetParams, support_x, support_y, power=1):
    z = forecast_graph(nodes, embed_graph(nodes, params, nc.constant(support_x)), power)
    return nc.matmul(nc.constant(class_mean_matrix(support_y, params.n_classes)), z)


def _check_input(params: TKNetParams, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[1] != params.encoder.in_dim:
        raise ValueError(f"input has {x.shape[1]} features, encoder expects {params.encoder.in_dim}")
    return x


# ---------------------------------------------------------------- public ops


@dataclass
class Centroids:
    vectors: np.ndarray
    source_index: int | None = None


def embed(params: TKNetParams, x) -> np.ndarray:
    """Measurement-space embedding ``G(phi(x))`` (no Koopman step)."""
    x = _check_input(params, x)
    nodes = param_nodes(params.tensors)
    return nc.forward(embed_graph(nodes, params, nc.constant(x))).copy()


def forecast(params: TKNetParams, z, power=1) -> np.ndarray:
    """Advance embedded rows ``power`` steps: ``z @ (K^power).T``."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != params.koopman_dim:
        raise ValueError(f"rows have dim {z.shape[1]}, Koopman space has dim {params.koopman_dim}")
    return nc.forward(forecast_graph(param_nodes(params.tensors), nc.constant(z), power)).copy()


def centroids_from_support(params: TKNetParams, x, y, source_index=None, power=1) -> Centroids:
    """Per-class mean of the forecast embeddings ``K G phi(x)``."""
    x = _check_input(params, x)
    y = np.asarray(y, dtype=np.int64)
    nodes = param_nodes(params.tensors)
    c = nc.forward(centroid_graph(nodes, params, x, y, power))
    return Centroids(c.copy(), source_index)


def classify(params: TKNetParams, centroids: Centroids, x) -> np.ndarray:
    """Softmax over negative squared distances from ``G(phi(x))`` to each centroid."""
    x = _check_input(params, x)
    c = np.asarray(centroids.vectors if isinstance(centroids, Centroids) else centroids, dtype=np.float64)
    if c.shape[1] != params.koopman_dim:
        raise ValueError(f"centroids have dim {c.shape[1]}, embeddings have dim {params.koopman_dim}")
    nodes = param_nodes(params.tensors)
    z = embed_graph(nodes, params, nc.constant(x))
    return nc.forward(nc.softmax(nc.neg_sqdist(z, nc.constant(c)))).copy()


def predict(params: TKNetParams, centroids: Centroids, x) -> np.ndarray:
    return classify(params, centroids, x).argmax(axis=1)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, header: dict, tensors: dict) -> None:
    """Write a model header and float64 tensors in a deterministic binary container.

    Layout: magic, uint32 version, uint64 header length, UTF-8 JSON header,
    then each tensor's little-endian float64 payload in header order.
    """
    names = list(tensors)
    meta = dict(header, tensors=[dict(name=n, shape=list(tensors[n].shape)) for n in names])
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(raw[20:20 + hlen])
    pos = 20 + hlen
    tensors = {}
    for t in meta.pop("tensors"):
        size = int(np.prod(t["shape"])) * 8
        if pos + size > len(raw):
            raise ValueError(f"{path}: truncated tensor {t['name']}")
        tensors[t["name"]] = np.frombuffer(raw[pos:pos + size], dtype="<f8").reshape(t["shape"]).astype(np.float64)
        pos += size
    return meta, tensors


def params_from_checkpoint(meta: dict, tensors: dict) -> TKNetParams:
    if meta.get("model") != "tknets":
        raise ValueError(f"checkpoint holds a {meta.get('model')!r} model, not tknets")
    return TKNetParams(EncoderSpec(**meta["encoder"]), MeasurementSpec(**meta["measurement"]),
                       meta["n_classes"], tensors)
