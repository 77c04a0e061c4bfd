import hashlib

import numpy as np
import pytest
import yaml

from gradsketch import attribution as A
from gradsketch import cli
from gradsketch import mask as mk

BASE = {
    "dataset": {"kind": "blobs", "seed": 0, "params": {"n": 120, "dim": 6, "std": 2.0, "n_test": 20, "center_scale": 0.5}},
    "model": {"dims": [6, 8, 2], "epochs": 3},
    "compressor": {"spec": "sjlt:k=16,seed=1"},
    "lds": {"subsets": 4, "epochs": 2, "damping_grid": [0.1, 1.0], "null_shuffles": 3},
    "bench": {
        "input_dim": 256,
        "target_dims": [16, 32],
        "sparsity": [1.0, 0.5],
        "kinds": ["gaussian", "sjlt"],
        "trials": 1,
        "vectors": 2,
        "layer": {"d_in": 32, "d_out": 32, "tokens": 1, "samples": 1, "seed": 0},
        "factorized": ["logra:layer=*,kin=4,kout=4,seed=1", "factgrass:layer=*,kin=4,kout=4,seed=1"],
    },
    "mask": {"k": 20, "steps": 5, "n_train": 16, "n_test": 3},
}


def _deep(base, extra):
    out = yaml.safe_load(yaml.safe_dump(base))
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep(out[key], value)
        else:
            out[key] = value
    return out


@pytest.fixture
def run(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUN_ROOT_ENV, str(tmp_path / "runs"))

    def go(command, extra=None, *flags, name="cfg.yaml"):
        path = tmp_path / name
        path.write_text(yaml.safe_dump(_deep(BASE, extra or {})))
        code = cli.main([command, "--config", str(path), *flags])
        return code, _run_dir(tmp_path / "runs")

    return go


def _run_dir(root):
    dirs = sorted(root.glob("run-*"), key=lambda p: p.stat().st_mtime) if root.exists() else []
    return dirs[-1] if dirs else None


def test_train_writes_checkpoint_and_curve(run):
    code, out = run("train")
    assert code == 0
    assert (out / "model.gmlp").exists() and (out / "resolved_config.yaml").exists()
    curve = np.loadtxt(out / "loss_curve.csv", delimiter=",", skiprows=1)
    assert curve[-1, 1] < curve[0, 1]


def test_train_deterministic_across_roots(tmp_path, monkeypatch):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump(BASE))
    digests = []
    for root in ("a", "b"):
        monkeypatch.setenv(cli.RUN_ROOT_ENV, str(tmp_path / root))
        assert cli.main(["train", "--config", str(cfg)]) == 0
        ck = next((tmp_path / root).glob("run-*/model.gmlp"))
        digests.append(hashlib.sha256(ck.read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_config_errors_exit_2(run, capsys):
    code, _ = run("train", {"dataset": {"kind": "idx", "params": {"images": "missing.idx", "labels": "y.idx"}}})
    assert code == 2
    assert "dataset.params.images" in capsys.readouterr().err
    code, _ = run("train", {"model": {"bogus": 1}})
    assert code == 2
    code, _ = run("train", {"compressor": {"spec": "mask:k=10+sjlt:k=20"}})
    assert code == 2


def test_divergence_exit_4(run):
    code, _ = run("train", {"model": {"lr": 1e30}, "dataset": {"params": {"center_scale": 1e20}}})
    assert code == 4


def test_cache_attribute_flow(run):
    assert run("train")[0] == 0
    code, out = run("cache")
    assert code == 0
    n, k, fp = A.read_header(out / "train.gstore")
    assert (n, k) == (100, 16)
    before = (out / "train.gstore").stat().st_mtime_ns
    assert run("cache")[0] == 0
    assert (out / "train.gstore").stat().st_mtime_ns == before

    assert run("attribute", None, "--top-k", "1000")[0] == 0
    scores = A.read_scores_bin(out / "scores.bin")
    store = A.read_store(out / "train.gstore")
    pre = A.read_store(out / "pre.gstore")
    test = A.read_store(out / "test.gstore")
    lib = A.influence_scores(store, pre, test)
    assert np.array_equal(scores, lib.astype(np.float32))
    top = (out / "top_k.csv").read_text().splitlines()
    assert len(top) == 1 + 20 * 100

    assert run("attribute", None, "--test", "0,3", "--top-k", "2")[0] == 0
    assert A.read_scores_bin(out / "scores.bin").shape == (2, 100)


def test_fingerprint_collision_and_mismatch(run):
    run("train")
    _, out = run("cache")
    other = "0" * 64
    store = A.read_store(out / "train.gstore")
    A.write_store(out / "train.gstore", A.GradientStore(store.records, other))
    assert run("cache")[0] == 3
    assert run("cache", None, "--force")[0] == 0
    test = A.read_store(out / "test.gstore")
    A.write_store(out / "test.gstore", A.GradientStore(test.records, other))
    assert run("attribute")[0] == 3


def test_layerwise_cache_writes_block_per_layer(run):
    extra = {"attribution": {"mode": "layerwise"}, "compressor": {"layerwise": True}}
    run("train", extra)
    assert run("cache", extra)[0] == 0
    _, out = run("attribute", extra)
    blocks = sorted(p.name for p in out.glob("train.l*.gstore"))
    assert blocks == ["train.l0.gstore", "train.l1.gstore"]
    assert A.read_header(out / "train.l1.gstore")[1] == 16


def test_lds_oracle_is_one(run):
    code, out = run("lds", {"lds": {"oracle": True}})
    assert code == 0
    assert "mean_rho: 1.000000" in (out / "lds_summary.txt").read_text()
    assert (out / "lds_hist.0.png").stat().st_size > 0


def test_lds_methods(run):
    code, out = run("lds", {"lds": {"methods": ["sjlt:k=16,seed=1", "mask:k=40,seed=2+sjlt:k=16,seed=1"]}})
    assert code == 0
    methods = {line.split(",")[0] for line in (out / "lds.csv").read_text().splitlines()[1:]}
    assert len(methods) == 2


def test_bench_rows_and_figures(run):
    code, out = run("bench", None, "--threads", "1")
    assert code == 0
    assert len((out / "bench.csv").read_text().splitlines()) == 1 + 2 * 2 * 2
    assert len((out / "throughput.csv").read_text().splitlines()) == 3
    assert (out / "bench.png").stat().st_size > 0 and (out / "throughput.png").stat().st_size > 0


def test_select_mask_writes_k_prime_indices(run):
    run("train")
    code, out = run("select-mask")
    assert code == 0
    m = mk.read_mask(out / "mask.gmsk")
    assert m.size == 20 and m.input_dim == 6 * 8 + 8 + 8 * 2 + 2
    extra = {"mask": {"layer": 0, "k_in": 3, "k_out": 2}}
    run("train", extra)
    code, out = run("select-mask", extra)
    assert code == 0 and mk.read_mask(out / "mask.l0.in.gmsk").size == 3


def test_set_override_and_paths(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUN_ROOT_ENV, str(tmp_path / "runs"))
    cfg = cli.load_config(None, ["model.epochs=7", "dataset.params.n=50"])
    assert cfg["model"]["epochs"] == 7 and cfg["dataset"]["params"]["n"] == 50
    with pytest.raises(cli.ConfigError):
        cli.load_config(None, ["model.nope=1"])
    sub = tmp_path / "conf"
    sub.mkdir()
    (sub / "c.yaml").write_text(yaml.safe_dump({"compressor": {"spec": "smask:path=sel.gmsk+sjlt:k=4"}}))
    cfg = cli.load_config(str(sub / "c.yaml"))
    assert f"path={sub / 'sel.gmsk'}" in cfg["compressor"]["spec"]
    assert cli.config_hash(cfg) == cli.config_hash(cli.load_config(str(sub / "c.yaml")))
