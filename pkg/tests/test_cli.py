import json

import numpy as np
import pytest

from tknets import cli
from tknets import domains as dm
from tknets import experiments as ex
from tknets.tknet import init_params, load_checkpoint, params_from_checkpoint


def write_config(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


EVOL = """
# small evolcircle run
seed = 3
dataset.generator = evolcircle
dataset.n_domains = 8
dataset.n_per_domain = 40
model.encoder_hidden = 8
model.rep_dim = 2
train.steps = 15
train.n_per_class = 5
train.lr = 0.01
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_parse_flat_values():
    raw = ex.parse_flat("a.b = 1\na.c = 0.5 # note\na.d = x+y\na.e = 3, 4\na.f = true\na.g = 7,\n")
    assert raw == {"a.b": 1, "a.c": 0.5, "a.d": "x+y", "a.e": (3, 4), "a.f": True, "a.g": (7,)}
    with pytest.raises(ex.ConfigError, match="duplicate"):
        ex.parse_flat("a = 1\na = 2\n")
    with pytest.raises(ex.ConfigError):
        ex.parse_flat("just words\n")


def test_config_validation(tmp_path):
    with pytest.raises(ex.ConfigError, match="unknown config keys"):
        ex.load_config(write_config(tmp_path, EVOL + "train.colour = red\n"))
    with pytest.raises(ex.ConfigError, match="method"):
        ex.load_config(write_config(tmp_path, EVOL + "train.method = erm:far\n"))
    with pytest.raises(ex.ConfigError, match="does not exist"):
        ex.load_config(write_config(tmp_path, "dataset.generator = container\ndataset.path = nowhere\n"))
    with pytest.raises(ex.ConfigError, match="generator"):
        ex.load_config(write_config(tmp_path, "dataset.generator = moons\n"))


def test_resolved_config_reproduces(tmp_path):
    exp = ex.load_config(write_config(tmp_path, EVOL + "model.measurement = identity+sin\n"))
    again = ex.config_from_dict(ex.parse_flat(exp.to_text()))
    assert again == exp
    assert ex.load_config(write_config(tmp_path, EVOL), seed=11).seed == 11


def test_generate_evolcircle_defaults(tmp_path):
    cfg = write_config(tmp_path, "dataset.generator = evolcircle\n")
    assert run("generate", "--config", cfg, "--out", tmp_path / "a") == 0
    manifest = json.loads((tmp_path / "a" / "dataset" / "manifest.json").read_text())
    assert manifest["n_domains"] == 30 and len(manifest["domains"]) == 30
    assert manifest["provenance"]["generator"] == "evolcircle" and manifest["provenance"]["seed"] == 0
    assert all(sum(d["class_counts"]) == 200 for d in manifest["domains"])
    assert run("generate", "--config", cfg, "--out", tmp_path / "b") == 0
    for f in sorted((tmp_path / "a" / "dataset").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "dataset" / f.name).read_bytes()


def test_generate_rplate_angles(tmp_path):
    cfg = write_config(tmp_path, "dataset.generator = rplate\ndataset.interval_deg = 12\n")
    assert run("generate", "--config", cfg, "--out", tmp_path / "o") == 0
    manifest = json.loads((tmp_path / "o" / "dataset" / "manifest.json").read_text())
    assert manifest["provenance"]["boundary_angles"][-1] == 348.0


def test_generate_rejects_non_synthetic(tmp_path):
    dm.save_sequence(dm.gen_evolcircle(4, 20), tmp_path / "d")
    cfg = write_config(tmp_path, f"dataset.generator = container\ndataset.path = {tmp_path / 'd'}\n")
    assert run("generate", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_CONFIG


def test_train_checkpoint_roundtrip_and_determinism(tmp_path):
    cfg = write_config(tmp_path, EVOL)
    assert run("train", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run("train", "--config", cfg, "--out", tmp_path / "b") == 0
    for name in ("model.ckpt", "train.jsonl", "config.resolved", "train_meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    lines = (tmp_path / "a" / "train.jsonl").read_text().splitlines()
    assert len(lines) == 15 and json.loads(lines[0])["step"] == 1
    meta, tensors = load_checkpoint(tmp_path / "a" / "model.ckpt")
    p = params_from_checkpoint(meta, tensors)
    from tknets.tknet import save_checkpoint
    save_checkpoint(tmp_path / "c.ckpt", dict(p.header(), run=meta["run"]), p.tensors)
    assert (tmp_path / "c.ckpt").read_bytes() == (tmp_path / "a" / "model.ckpt").read_bytes()


def test_train_zero_steps_is_initialisation(tmp_path):
    cfg = write_config(tmp_path, EVOL.replace("train.steps = 15", "train.steps = 0"))
    assert run("train", "--config", cfg, "--out", tmp_path / "o") == 0
    meta, tensors = load_checkpoint(tmp_path / "o" / "model.ckpt")
    exp = ex.load_config(cfg)
    init = init_params(exp.train.encoder_spec(2), exp.train.measurement, 2, exp.seed)
    assert set(tensors) == set(init.tensors)
    for k in tensors:
        assert np.array_equal(tensors[k], init.tensors[k])


def test_train_erm_near_records_domains(tmp_path):
    cfg = write_config(tmp_path, EVOL + "train.method = erm:near\n")
    assert run("train", "--config", cfg, "--out", tmp_path / "o") == 0
    meta = json.loads((tmp_path / "o" / "train_meta.json").read_text())
    assert meta["n_sources"] == 7 and meta["training_domains"] == [7]


def test_train_divergence_exit_status(tmp_path):
    cfg = write_config(tmp_path, EVOL.replace("train.lr = 0.01", "train.lr = 1e300"))
    assert run("train", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_DIVERGED


def test_eval_report_and_tables(tmp_path):
    cfg = write_config(tmp_path, EVOL + "split.horizon = 3\n")
    assert run("train", "--config", cfg, "--out", tmp_path / "t") == 0
    ckpt = tmp_path / "t" / "model.ckpt"
    assert run("eval", "--config", cfg, "--out", tmp_path / "e", "--checkpoint", ckpt) == 0
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert len(report["step_accuracies"]) == 3
    assert report["lambda_hat"] >= 0 and report["bound"] >= report["forecast_risk"]
    rows = (tmp_path / "e" / "horizons.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["horizon", "domain_time", "accuracy"] and len(rows) == 4

    one = write_config(tmp_path, EVOL + "split.horizon = 3\neval.horizons = 1\n", "one.cfg")
    assert run("eval", "--config", one, "--out", tmp_path / "e1", "--checkpoint", ckpt) == 0
    r1 = json.loads((tmp_path / "e1" / "report.json").read_text())
    assert r1["step_accuracies"] == [r1["target_accuracy"]] == [report["target_accuracy"]]


def test_eval_erm_checkpoint(tmp_path):
    cfg = write_config(tmp_path, EVOL + "train.method = erm:index-onehot\nsplit.horizon = 2\n")
    assert run("train", "--config", cfg, "--out", tmp_path / "t") == 0
    assert run("eval", "--config", cfg, "--out", tmp_path / "e", "--checkpoint", tmp_path / "t" / "model.ckpt") == 0
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert len(report["step_accuracies"]) == 2


def test_eval_spec_mismatch(tmp_path):
    cfg = write_config(tmp_path, EVOL)
    assert run("train", "--config", cfg, "--out", tmp_path / "t") == 0
    other = write_config(tmp_path, "dataset.generator = rotated-idx\n", "x.cfg")
    imgs = np.random.default_rng(0).integers(0, 255, (60, 4, 4)).astype(np.uint8)
    dm.write_idx(tmp_path / "i", tmp_path / "l", imgs, np.arange(60) % 2)
    other.write_text(f"dataset.generator = rotated-idx\ndataset.images = {tmp_path / 'i'}\n"
                     f"dataset.labels = {tmp_path / 'l'}\ndataset.n_domains = 3\ndataset.per_domain = 20\n")
    code = run("eval", "--config", other, "--out", tmp_path / "e", "--checkpoint", tmp_path / "t" / "model.ckpt")
    assert code == cli.EXIT_MISMATCH


def test_sweep_single_cell(tmp_path):
    cfg = write_config(tmp_path, EVOL + "sweep.axis = n-domains\nsweep.values = 6,\nsweep.repeats = 1\n")
    assert run("sweep", "--config", cfg, "--out", tmp_path / "s") == 0
    lines = (tmp_path / "s" / "sweep.tsv").read_text().splitlines()
    assert len(lines) == 2 and lines[0].split("\t") == ["method\\n-domains", "6"]
    assert "±" in lines[1]


def test_sweep_table_shape_and_order_independence(tmp_path):
    exp = ex.load_config(write_config(tmp_path, EVOL))
    exp = exp.with_overrides(**{"train.steps": 5})
    rows =ex.run_sweep(exp, "measurement-kind", ("identity", "identity+sin"), ("tknets", "erm:plain"), 2)
    table = ex.sweep_table(rows, "measurement-kind").splitlines()
    assert len(table) == 3 and len(table[0].split("\t")) == 3
    flipped = ex.run_sweep(exp, "measurement-kind", ("identity+sin", "identity"), ("erm:plain", "tknets"), 2)
    key = lambda r: (r["method"], r["value"])
    assert sorted(rows, key=key) == sorted(flipped, key=key)


def test_sweep_axes(tmp_path):
    exp = ex.load_config(write_config(tmp_path, EVOL)).with_overrides(**{"train.steps": 3})
    rows = ex.run_sweep(exp, "target-position", ("extrapolate", "interpolate"), ("tknets",), 1)
    assert [r["value"] for r in rows] == ["extrapolate", "interpolate"]
    with pytest.raises(ex.ConfigError, match="axis"):
        ex.run_sweep(exp, "colour", (1,), ("tknets",), 1)
    with pytest.raises(ex.ConfigError, match="delta-deg"):
        ex.run_sweep(exp, "delta-deg", (3,), ("tknets",), 1)
    plate = ex.load_config(write_config(tmp_path, "dataset.generator = rplate\ndataset.n_domains = 5\n"
                                        "dataset.n_per_domain = 40\ntrain.steps = 3\ntrain.n_per_class = 4\n"))
    rows = ex.run_sweep(plate, "delta-deg", (3, 5, 7, 10, 15, 20), ("tknets",), 1)
    assert len(rows) == 6


def test_sweep_learned_measurement(tmp_path):
    exp = ex.load_config(write_config(tmp_path, EVOL + "model.measurement_hidden = 4\nmodel.measurement_dim = 3\n"))
    exp = exp.with_overrides(**{"train.steps": 3})
    rows = ex.run_sweep(exp, "measurement-kind", ("identity", "learned"), ("tknets",), 1)
    assert len(rows) == 2


def test_missing_config_file(tmp_path):
    assert run("train", "--config", tmp_path / "nope.cfg", "--out", tmp_path / "o") == cli.EXIT_CONFIG
