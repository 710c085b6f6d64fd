"""Experiment configs, dataset construction, method runs and sweeps.

A config is flat ``section.key = value`` text, one setting per line, ``#``
starts a comment. Comma-separated values become tuples.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import domains as dm
from . import evalx
from .episodic import (ERM_VARIANTS, ErmParams, TrainConfig, erm_accuracy, erm_training_domains,
                       train_erm, train_tknets)
from .tknet import MeasurementSpec, TKNetParams

GENERATORS = ("evolcircle", "rplate", "rotated-idx", "tabular", "container")
SWEEP_AXES = ("n-domains", "delta-deg", "target-position", "measurement-kind")


class ConfigError(ValueError):
    pass


class SpecMismatchError(ValueError):
    pass


def _parse_scalar(s: str):
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def parse_value(s: str):
    s = s.strip()
    if "," in s:
        return tuple(_parse_scalar(p.strip()) for p in s.split(",") if p.strip())
    return _parse_scalar(s)


def format_value(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (tuple, list)):
        # a trailing comma keeps one-element tuples tuples
        return ", ".join(format_value(x) for x in v) + ("," if len(v) == 1 else "")
    return str(v)


def parse_flat(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = parse_value(value)
    return out


def _tuple(v) -> tuple:
    if v in ("", "none", None):
        return ()
    return tuple(v) if isinstance(v, tuple) else (v,)


def measurement_from_string(s, hidden=(), out_dim=0) -> MeasurementSpec:
    """``identity+sin`` selects predefined functions; ``learned`` an MLP of width ``hidden``."""
    s = str(s)
    if s == "learned":
        return MeasurementSpec("learned", (), tuple(hidden), int(out_dim))
    return MeasurementSpec("predefined", tuple(s.split("+")))


def measurement_to_string(spec: MeasurementSpec) -> str:
    return "learned" if spec.kind == "learned" else "+".join(spec.functions)


# sections and their defaults; the dataset section is open-ended
DEFAULTS = {
    "seed": 0,
    "split.target": "extrapolate",
    "split.horizon": 1,
    "model.encoder_hidden": (64,),
    "model.activation": "tanh",
    "model.rep_dim": 2,
    "model.measurement": "identity",
    "model.measurement_hidden": (),
    "model.measurement_dim": 0,
    "train.method": "tknets",
    "train.steps": 3000,
    "train.n_per_class": 10,
    "train.optimizer": "adam",
    "train.lr": 1e-3,
    "train.eval_every": 0,
    "train.early_stopping": False,
    "train.batch_size": 64,
    "train.log_wall_time": False,
    "eval.horizons": 0,
    "eval.diagnostics": True,
    "eval.checkpoint": "",
    "sweep.axis": "",
    "sweep.values": (),
    "sweep.methods": ("tknets",),
    "sweep.repeats": 1,
}
DATASET_DEFAULTS = {
    "evolcircle": {"n_domains": 30, "n_per_domain": 200, "sigma": 0.1, "offset": 0.25, "radius": 1.0},
    "rplate": {"n_domains": 30, "n_per_domain": 200, "interval_deg": 12.0, "sigma": 1.0},
    "rotated-idx": {"images": "", "labels": "", "n_domains": 12, "delta_deg": 10.0, "per_domain": 200},
    "tabular": {"path": "", "sort_column": 0, "label_column": -1, "n_domains": 10,
                "delimiter": ",", "header": False},
    "container": {"path": ""},
}
PATH_KEYS = ("images", "labels", "path")


@dataclass
class ExperimentConfig:
    dataset: dict
    split: dm.SplitSpec
    train: TrainConfig
    method: str = "tknets"
    horizons: int = 1
    diagnostics: bool = True
    checkpoint: str = ""
    sweep: dict = field(default_factory=dict)
    # kept even when the active measurement is predefined, so sweeps can switch to learned
    measurement_hidden: tuple = ()
    measurement_dim: int = 0

    @property
    def seed(self) -> int:
        return self.train.seed

    def flat(self) -> dict:
        t = self.train
        out = {"seed": t.seed}
        out.update({f"dataset.{k}": v for k, v in self.dataset.items()})
        out.update({
            "split.target": self.split.target, "split.horizon": self.split.horizon,
            "model.encoder_hidden": t.encoder_hidden, "model.activation": t.encoder_activation,
            "model.rep_dim": t.rep_dim, "model.measurement": measurement_to_string(t.measurement),
            "model.measurement_hidden": self.measurement_hidden, "model.measurement_dim": self.measurement_dim,
            "train.method": self.method, "train.steps": t.steps, "train.n_per_class": t.n_per_class,
            "train.optimizer": t.optimizer, "train.lr": t.lr, "train.eval_every": t.eval_every,
            "train.early_stopping": t.early_stopping, "train.batch_size": t.batch_size,
            "train.log_wall_time": t.log_wall_time,
            "eval.horizons": self.horizons, "eval.diagnostics": self.diagnostics,
            "eval.checkpoint": self.checkpoint,
        })
        out.update({f"sweep.{k}": v for k, v in self.sweep.items()})
        return out

    def to_text(self) -> str:
        """Resolved config; loading it back reproduces the run."""
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.flat().items())

    def with_overrides(self, **flat) -> "ExperimentConfig":
        merged = self.flat()
        merged.update(flat)
        return config_from_dict(merged, check_paths=False)


def method_variant(method: str):
    """``tknets`` or ``erm:<variant>``; returns ``(family, variant)``."""
    if method == "tknets":
        return "tknets", None
    if method.startswith("erm"):
        variant = method.split(":", 1)[1] if ":" in method else "plain"
        if variant in ERM_VARIANTS:
            return "erm", variant
    raise ConfigError(f"unknown method {method!r}; use tknets or erm:<{'|'.join(ERM_VARIANTS)}>")


def config_from_dict(raw: dict, check_paths=True, base_dir: Path | None = None) -> ExperimentConfig:
    gen = raw.get("dataset.generator")
    if gen not in GENERATORS:
        raise ConfigError(f"dataset.generator must be one of {GENERATORS}, got {gen!r}")
    known = set(DEFAULTS) | {"dataset.generator"} | {f"dataset.{k}" for k in DATASET_DEFAULTS[gen]}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    v = dict(DEFAULTS)
    v.update(raw)
    dataset = {"generator": gen, **DATASET_DEFAULTS[gen]}
    dataset.update({k.split(".", 1)[1]: val for k, val in raw.items() if k.startswith("dataset.")})
    for key in PATH_KEYS:
        if key in dataset:
            if str(dataset[key]) == "":
                raise ConfigError(f"dataset.{key} is required for generator {gen}")
            p = Path(str(dataset[key]))
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            dataset[key] = str(p)
            if check_paths and not p.exists():
                raise ConfigError(f"dataset.{key}: {p} does not exist")
    if check_paths and v["eval.checkpoint"] and not Path(v["eval.checkpoint"]).exists():
        raise ConfigError(f"eval.checkpoint: {v['eval.checkpoint']} does not exist")
    method_variant(v["train.method"])
    meas_hidden = tuple(int(h) for h in _tuple(v["model.measurement_hidden"]))
    try:
        meas = measurement_from_string(v["model.measurement"], meas_hidden, v["model.measurement_dim"])
        train = TrainConfig(steps=int(v["train.steps"]), n_per_class=int(v["train.n_per_class"]),
                            optimizer=v["train.optimizer"], lr=float(v["train.lr"]), seed=int(v["seed"]),
                            eval_every=int(v["train.eval_every"]),
                            early_stopping=bool(v["train.early_stopping"]),
                            encoder_hidden=tuple(int(h) for h in _tuple(v["model.encoder_hidden"])),
                            encoder_activation=v["model.activation"], rep_dim=int(v["model.rep_dim"]),
                            measurement=meas, batch_size=int(v["train.batch_size"]),
                            log_wall_time=bool(v["train.log_wall_time"]))
        split = dm.SplitSpec(v["split.target"], int(v["split.horizon"]))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    if train.optimizer not in ("sgd", "adam"):
        raise ConfigError(f"train.optimizer must be sgd or adam, got {train.optimizer!r}")
    horizons = int(v["eval.horizons"]) or split.horizon
    if horizons > split.horizon:
        raise ConfigError(f"eval.horizons={horizons} exceeds split.horizon={split.horizon}")
    sweep = {k.split(".", 1)[1]: v[k] for k in DEFAULTS if k.startswith("sweep.")}
    sweep["values"] = _tuple(sweep["values"])
    sweep["methods"] = _tuple(sweep["methods"])
    return ExperimentConfig(dataset, split, train, v["train.method"], horizons,
                            bool(v["eval.diagnostics"]), str(v["eval.checkpoint"]), sweep,
                            meas_hidden, int(v["model.measurement_dim"]))


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config {path} does not exist")
    raw = parse_flat(path.read_text())
    if seed is not None:
        raw["seed"] = seed
    return config_from_dict(raw, base_dir=path.parent)


# ------------------------------------------------------------------ datasets


def build_dataset(block: dict, seed: int) -> dm.DomainSequence:
    b = dict(block)
    gen = b.pop("generator")
    if gen == "evolcircle":
        return dm.gen_evolcircle(int(b["n_domains"]), int(b["n_per_domain"]), seed,
                                 float(b["radius"]), float(b["offset"]), float(b["sigma"]))
    if gen == "rplate":
        return dm.gen_rplate(int(b["n_domains"]), int(b["n_per_domain"]), seed,
                             float(b["interval_deg"]), float(b["sigma"]))
    if gen == "rotated-idx":
        images, labels = dm.load_idx(b["images"], b["labels"])
        return dm.gen_rotated_images(images, labels, int(b["n_domains"]), float(b["delta_deg"]),
                                     int(b["per_domain"]), seed)
    if gen == "tabular":
        rows = dm.read_table(b["path"], str(b["delimiter"]), bool(b["header"]))
        label_col = int(b["label_column"]) % rows.shape[1]
        return dm.split_sorted_tabular(rows, int(b["sort_column"]), label_col, int(b["n_domains"]))
    return dm.load_sequence(b["path"])


def split_for(exp: ExperimentConfig, seq: dm.DomainSequence):
    return dm.split_sequence(seq, exp.split)


# ------------------------------------------------------------- method runs


def train_method(method: str, sources: dm.DomainSequence, config: TrainConfig):
    """Returns ``(params, log, meta)``; ``meta`` names the source domains that entered the loss."""
    family, variant = method_variant(method)
    if family == "tknets":
        params, log = train_tknets(sources, config)
        used = list(range(1, len(sources) + 1))
    else:
        params, log = train_erm(sources, config, variant)
        used = erm_training_domains(variant, len(sources))
    meta = dict(method=method, n_sources=len(sources), training_domains=used,
                source_times=list(sources.times))
    return params, log, meta


def score(params, sources: dm.DomainSequence, targets: dm.DomainSequence, horizons=None) -> list[float]:
    """Per-horizon target accuracy for either model family."""
    doms = list(targets.domains)[:horizons]
    if isinstance(params, TKNetParams):
        return evalx.rollout_multistep(params, sources[len(sources) - 1], doms)
    m = len(sources)
    return [erm_accuracy(params, d.x, d.y, m + j) for j, d in enumerate(doms, start=1)]


def report_for(params, sources, targets, horizons=None, diagnostics=True) -> dict:
    accs = score(params, sources, targets, horizons)
    if isinstance(params, TKNetParams):
        rep = evalx.EvalReport(accs[0], accs)
        if diagnostics:
            for k, v in evalx.diagnostics(params, sources).items():
                setattr(rep, k, v)
        out = json.loads(rep.to_json())
    else:
        out = dict(target_accuracy=accs[0], step_accuracies=accs, notes="diagnostics need a forecasting model")
    out["target_times"] = list(targets.times)[:len(accs)]
    return out


def check_compatible(meta: dict, seq: dm.DomainSequence, n_sources: int | None = None):
    dim = meta["base_dim"] if meta.get("model") == "erm" else meta["encoder"]["in_dim"]
    problems = []
    if dim != seq.dim:
        problems.append(f"input dim {dim} vs dataset {seq.dim}")
    if meta["n_classes"] != seq.n_classes:
        problems.append(f"{meta['n_classes']} classes vs dataset {seq.n_classes}")
    if meta.get("model") == "erm" and n_sources is not None and meta["n_sources"] != n_sources:
        problems.append(f"{meta['n_sources']} source domains vs split {n_sources}")
    if problems:
        raise SpecMismatchError("checkpoint does not match dataset: " + "; ".join(problems))


# -------------------------------------------------------------------- sweeps


def sweep_cell(exp: ExperimentConfig, axis: str, value, method: str, repeat: int, seq_cache=None) -> float:
    """Target accuracy of one (value, method, repeat) cell; independent of every other cell."""
    flat = {}
    ds = exp.dataset["generator"]
    if axis == "n-domains":
        flat["dataset.n_domains"] = int(value)
    elif axis == "delta-deg":
        key = {"rotated-idx": "delta_deg", "rplate": "interval_deg"}.get(ds)
        if key is None:
            raise ConfigError(f"delta-deg sweep needs a rotated-idx or rplate dataset, not {ds}")
        flat[f"dataset.{key}"] = float(value)
    elif axis == "target-position":
        flat["split.target"] = str(value)
        flat["split.horizon"] = 1
        flat["eval.horizons"] = 1
    elif axis == "measurement-kind":
        flat["model.measurement"] = str(value)
    else:
        raise ConfigError(f"invalid sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    flat["train.method"] = method
    cell = exp.with_overrides(**flat)
    key = tuple(sorted((k, v) for k, v in cell.dataset.items()))
    if seq_cache is not None and key in seq_cache:
        seq = seq_cache[key]
    else:
        seq = build_dataset(cell.dataset, exp.seed)
        if seq_cache is not None:
            seq_cache[key] = seq
    sources, targets = split_for(cell, seq)
    params, _, _ = train_method(method, sources, replace(cell.train, seed=exp.seed + repeat))
    return score(params, sources, targets, 1)[0]


def run_sweep(exp: ExperimentConfig, axis=None, values=None, methods=None, repeats=None) -> list[dict]:
    """Full cross-product of values x methods x repeats; one row per (method, value)."""
    axis = axis or exp.sweep.get("axis")
    values = tuple(values if values is not None else exp.sweep.get("values", ()))
    methods = tuple(methods or exp.sweep.get("methods") or (exp.method,))
    repeats = int(repeats or exp.sweep.get("repeats", 1))
    if axis not in SWEEP_AXES:
        raise ConfigError(f"invalid sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep.values is empty")
    for m in methods:
        method_variant(m)
    cache = {}
    rows = []
    for method in methods:
        for value in values:
            accs = [sweep_cell(exp, axis, value, method, r, cache) for r in range(repeats)]
            rows.append(dict(method=method, value=value, mean=float(np.mean(accs)),
                             std=float(np.std(accs)), runs=accs))
    return rows


def sweep_table(rows: list[dict], axis: str, delimiter="\t") -> str:
    """One line per method, one ``mean±std`` column per swept value."""
    values = list(dict.fromkeys(r["value"] for r in rows))
    methods = list(dict.fromkeys(r["method"] for r in rows))
    cells = {(r["method"], r["value"]): r for r in rows}
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow([f"method\\{axis}", *map(format_value, values)])
    for m in methods:
        w.writerow([m, *(f"{cells[m, v]['mean']:.4f}±{cells[m, v]['std']:.4f}" for v in values)])
    return buf.getvalue()


def horizon_table(report: dict, delimiter="\t") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(["horizon", "domain_time", "accuracy"])
    for j, (t, a) in enumerate(zip(report["target_times"], report["step_accuracies"]), start=1):
        w.writerow([j, t, f"{a:.6f}"])
    return buf.getvalue()


def load_model(path):
    """Read either model family from a checkpoint; returns ``(params, meta)``."""
    from .episodic import erm_from_checkpoint
    from .tknet import load_checkpoint, params_from_checkpoint

    meta, tensors = load_checkpoint(path)
    if meta.get("model") == "erm":
        return erm_from_checkpoint(meta, tensors), meta
    return params_from_checkpoint(meta, tensors), meta


def is_erm(params) -> bool:
    return isinstance(params, ErmParams)
