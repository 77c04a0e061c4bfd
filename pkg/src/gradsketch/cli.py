"""``gradsketch`` command line: train, cache, attribute, lds, bench, select-mask.

Every command reads one YAML config. Outputs go to a run directory named by
the hash of the resolved config, under ``$GRADSKETCH_RUN_ROOT`` (default
``./runs``). The resolved config is written there before anything else.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import re
import sys
import time
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from . import attribution as attr
from . import evalharness as ev
from . import factgrass as fg
from . import mask as mk
from . import model as M
from . import pipeline
from .grass import SpecParseError, looks_flat, parse_compressor
from .sketch import SketchKind, SketchSpec, benchmark_projection

log = logging.getLogger("gradsketch")

RUN_ROOT_ENV = "GRADSKETCH_RUN_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config

DEFAULTS: dict = {
    "model": {
        "dims": [20, 64, 64, 2],
        "init_seed": 1,
        "train_seed": 123,
        "epochs": 10,
        "lr": 0.05,
        "batch_size": 32,
        "weight_decay": 0.0,
        "loss": "cross_entropy",
        "checkpoint": None,
    },
    "dataset": {"kind": "blobs", "seed": 0, "params": {"n": 1050, "n_test": 50, "dim": 20, "std": 2.0, "center_scale": 0.5}},
    "compressor": {"spec": "sjlt:k=64,seed=1", "layerwise": False},
    "attribution": {"damping": 0.1, "mode": "whole", "test": "all", "top_k": 10},
    "lds": {
        "subsets": 50,
        "fraction": 0.5,
        "epochs": 10,
        "lr": 0.05,
        "batch_size": 32,
        "seed": 0,
        "val_fraction": 0.1,
        "damping_grid": list(ev.DAMPING_GRID),
        "null_shuffles": 20,
        "methods": None,
        "oracle": False,
    },
    "bench": {
        "kinds": ["gaussian", "fjlt", "sjlt"],
        "input_dim": 4096,
        "target_dims": [256, 1024],
        "sparsity": [1.0, 0.5, 0.25, 0.1],
        "trials": 3,
        "vectors": 16,
        "seed": 0,
        "layer": {"d_in": 256, "d_out": 256, "tokens": 4, "samples": 4, "seed": 0},
        "factorized": [
            "logra:layer=*,kin=16,kout=16,seed=1",
            "factgrass:layer=*,kin=16,kout=16,kin'=2*kin,kout'=2*kout,seed=1",
            "factmask:layer=*,kin=16,kout=16,seed=1",
        ],
    },
    "mask": {
        "k": 256,
        "l1": 1e-3,
        "steps": 300,
        "step_size": 10.0,
        "n_train": 128,
        "n_test": 16,
        "init_scale": 0.1,
        "seed": 0,
        "layer": None,
        "k_in": 8,
        "k_out": 8,
    },
}

# sections whose values are free-form mappings
_OPEN = {("dataset", "params"), ("bench", "layer")}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        path = f"{where}.{key}" if where else str(key)
        if key not in base:
            raise ConfigError(f"unknown config key '{path}'")
        if isinstance(base[key], dict) and tuple(path.split(".")) not in _OPEN:
            if not isinstance(value, dict):
                raise ConfigError(f"'{path}' must be a mapping")
            out[key] = _merge(base[key], value, path)
        else:
            out[key] = value
    return out


def _set_override(cfg: dict, item: str) -> None:
    key, eq, raw = item.partition("=")
    if not eq:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key '{key}'")
        node = node[p]
    if parts[-1] not in node and tuple(parts[:-1]) not in _OPEN:
        raise ConfigError(f"unknown config key '{key}'")
    node[parts[-1]] = yaml.safe_load(raw)


def _resolve(path: Optional[str], base: Path) -> Optional[str]:
    if path is None:
        return None
    p = Path(path).expanduser()
    return str(p if p.is_absolute() else (base / p).resolve())


_SPEC_PATH = re.compile(r"path=([^,+;]+)")


def load_config(path: Optional[str], overrides=()) -> dict:
    """Defaults merged with the YAML file and ``--set`` overrides, paths made absolute."""
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        base = p.resolve().parent
    cfg = _merge(DEFAULTS, raw)
    for item in overrides:
        _set_override(cfg, item)
    ds = cfg["dataset"]
    if ds["kind"] in ("idx", "idx_files"):
        for key in ("images", "labels"):
            if key not in ds["params"]:
                raise ConfigError(f"missing key 'dataset.params.{key}'")
            ds["params"][key] = _resolve(ds["params"][key], base)
            if not Path(ds["params"][key]).exists():
                raise ConfigError(f"dataset.params.{key}: file {ds['params'][key]} not found")
    cfg["model"]["checkpoint"] = _resolve(cfg["model"]["checkpoint"], base)
    cfg["compressor"]["spec"] = _SPEC_PATH.sub(lambda m: "path=" + _resolve(m.group(1), base), cfg["compressor"]["spec"])
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def run_dir(cfg: dict) -> Path:
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    out = root / f"run-{config_hash(cfg)[:12]}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    return out


# ---------------------------------------------------------------------------
# shared steps


def _loss(cfg) -> M.Loss:
    try:
        return M.Loss(cfg["model"]["loss"])
    except ValueError:
        raise ConfigError(f"model.loss: unknown loss {cfg['model']['loss']!r}") from None


def _dataset(cfg) -> M.Dataset:
    ds = cfg["dataset"]
    try:
        return M.make_dataset(ds["kind"], ds["params"], ds["seed"])
    except TypeError as exc:
        raise ConfigError(f"dataset.params: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, M.IdxFormatError):
            raise
        raise ConfigError(f"dataset: {exc}") from None


def _init_model(cfg, dataset: M.Dataset) -> M.MlpModel:
    dims = list(cfg["model"]["dims"])
    if dims[0] != dataset.X.shape[1]:
        raise ConfigError(f"model.dims starts at {dims[0]} but the dataset has {dataset.X.shape[1]} features")
    return M.init_mlp(dims, seed=cfg["model"]["init_seed"])


def _train(cfg, dataset: M.Dataset, init: M.MlpModel) -> M.TrainResult:
    m = cfg["model"]
    X, y = dataset.train()
    return M.train_sgd(init, X, y, m["epochs"], m["lr"], m["train_seed"], m["batch_size"], loss=_loss(cfg), weight_decay=m["weight_decay"])


def _checkpoint_path(cfg, out: Path) -> Path:
    return Path(cfg["model"]["checkpoint"]) if cfg["model"]["checkpoint"] else out / "model.gmlp"


def _trained_model(cfg, out: Path, dataset: M.Dataset) -> M.MlpModel:
    path = _checkpoint_path(cfg, out)
    if not path.exists():
        raise DataError(f"checkpoint {path} not found; run 'train' first")
    return M.load_checkpoint(path)


def _bind(cfg, model: M.MlpModel) -> pipeline.BoundCompressor:
    c = cfg["compressor"]
    return pipeline.bind(c["spec"], model, bool(c["layerwise"]))


def _mode(cfg, bound: pipeline.BoundCompressor) -> attr.AttributionMode:
    mode = cfg["attribution"]["mode"]
    if mode == "whole":
        return attr.AttributionMode.whole(bound.k)
    if mode == "layerwise":
        return attr.AttributionMode.layerwise(bound.blocks)
    raise ConfigError(f"attribution.mode must be 'whole' or 'layerwise', got {mode!r}")


def _test_indices(cfg, n_test: int, selector: Optional[str]) -> np.ndarray:
    sel = selector if selector is not None else cfg["attribution"]["test"]
    if sel == "all" or sel is None:
        return np.arange(n_test)
    if isinstance(sel, str):
        sel = [int(s) for s in sel.split(",") if s.strip()]
    idx = np.asarray(sel, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n_test):
        raise ConfigError(f"test selector out of range for {n_test} test points")
    return idx


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg, out: Path, args) -> int:
    dataset = _dataset(cfg)
    init = _init_model(cfg, dataset)
    path = _checkpoint_path(cfg, out)
    if path.exists() and not args.force:
        log.info("checkpoint %s exists; nothing to do", path)
        return EXIT_OK
    res = _train(cfg, dataset, init)
    M.save_checkpoint(path, res.model)
    with (out / "loss_curve.csv").open("w") as fh:
        fh.write("epoch,loss\n")
        fh.write(f"0,{res.initial_loss:.9g}\n")
        for e, v in enumerate(res.epoch_losses, 1):
            fh.write(f"{e},{v:.9g}\n")
    if dataset.is_test.any():
        log.info("test accuracy %.4f", M.accuracy(res.model, *dataset.test()))
    log.info("trained: loss %.4f -> %.4f; checkpoint %s", res.initial_loss, res.final_loss, path)
    return EXIT_OK


def _store_paths(out: Path, blocks: int, layerwise: bool) -> dict:
    if not layerwise:
        return {"train": [out / "train.gstore"], "pre": [out / "pre.gstore"], "test": [out / "test.gstore"], "fim": [out / "fim.npy"]}
    return {
        kind: [out / f"{kind}.l{l}.{'npy' if kind == 'fim' else 'gstore'}" for l in range(blocks)]
        for kind in ("train", "pre", "test", "fim")
    }


def cmd_cache(cfg, out: Path, args) -> int:
    dataset = _dataset(cfg)
    model = _trained_model(cfg, out, dataset)
    bound = _bind(cfg, model)
    mode = _mode(cfg, bound)
    layerwise = mode.kind is attr.AttributionKind.LAYERWISE
    paths = _store_paths(out, len(mode.blocks), layerwise)
    existing = [p for p in paths["train"] if p.exists()]
    if existing and not args.force:
        fps = {attr.read_header(p)[2] for p in existing}
        if fps == {bound.fingerprint} and all(p.exists() for group in paths.values() for p in group):
            log.info("cache is up to date (fingerprint %s)", bound.fingerprint[:12])
            return EXIT_OK
        if fps != {bound.fingerprint}:
            raise DataError(
                f"existing store has fingerprint {sorted(fps)[0][:12]}, compressor is {bound.fingerprint[:12]}; use --force to overwrite"
            )
    loss = _loss(cfg)
    X, y = dataset.train()
    Xt, yt = dataset.test()
    t0 = time.perf_counter()
    from . import _ops

    with _ops.count_ops() as ops:
        G = bound.compress(model, X, y, loss)
    elapsed = time.perf_counter() - t0
    log.info("compressed %d samples in %.2fs (%.0f samples/s); ops per sample %s", X.shape[0], elapsed, X.shape[0] / max(elapsed, 1e-12), {k: v // max(1, X.shape[0]) for k, v in ops.items()})
    Gt = bound.compress(model, Xt, yt, loss) if Xt.shape[0] else np.zeros((0, bound.k))
    train = attr.GradientStore(G.astype(np.float32), bound.fingerprint)
    test = attr.GradientStore(Gt.astype(np.float32), bound.fingerprint)
    states = attr.fit_fims(mode, train, cfg["attribution"]["damping"])
    for i, (a, b) in enumerate(mode.offsets()):
        block = train.block(a, b)
        attr.write_store(paths["train"][i], block)
        attr.write_store(paths["test"][i], test.block(a, b))
        np.save(paths["fim"][i], states[i].matrix)
        attr.write_store(paths["pre"][i], attr.precondition_store(block, states[i]))
    log.info("wrote %d store block(s), n=%d, k=%d", len(mode.blocks), train.n, train.k)
    return EXIT_OK


def cmd_attribute(cfg, out: Path, args) -> int:
    dataset = _dataset(cfg)
    model = _trained_model(cfg, out, dataset)
    bound = _bind(cfg, model)
    mode = _mode(cfg, bound)
    paths = _store_paths(out, len(mode.blocks), mode.kind is attr.AttributionKind.LAYERWISE)
    for p in paths["train"] + paths["pre"] + paths["test"]:
        if not p.exists():
            raise DataError(f"{p} not found; run 'cache' first")
    scores = None
    for tp, pp, sp in zip(paths["train"], paths["pre"], paths["test"]):
        store = attr.read_store(tp, bound.fingerprint)
        pre = attr.read_store(pp, bound.fingerprint)
        test = attr.read_store(sp, bound.fingerprint)
        idx = _test_indices(cfg, test.n, args.test)
        s = attr.influence_scores(store, pre, attr.GradientStore(test.records[idx], test.fingerprint))
        scores = s if scores is None else scores + s
    attr.write_scores_csv(out / "scores.csv", scores, idx)
    attr.write_scores_bin(out / "scores.bin", scores)
    k = cfg["attribution"]["top_k"] if args.top_k is None else args.top_k
    with (out / "top_k.csv").open("w") as fh:
        fh.write("test_index,rank,train_index,score\n")
        for t, row in zip(idx, scores):
            for rank, i in enumerate(attr.top_k_influential(row, k)):
                fh.write(f"{t},{rank},{i},{row[i]:.9g}\n")
    log.info("scored %d test point(s) against %d training samples", scores.shape[0], scores.shape[1])
    return EXIT_OK


def _lds_config(cfg) -> ev.LdsConfig:
    c = cfg["lds"]
    try:
        return ev.LdsConfig(
            subsets=c["subsets"], fraction=c["fraction"], epochs=c["epochs"], lr=c["lr"], batch_size=c["batch_size"],
            weight_decay=cfg["model"]["weight_decay"], seed=c["seed"], val_fraction=c["val_fraction"],
            damping_grid=tuple(c["damping_grid"]), null_shuffles=c["null_shuffles"],
        )
    except ValueError as exc:
        raise ConfigError(f"lds: {exc}") from None


def cmd_lds(cfg, out: Path, args) -> int:
    from . import plotting

    dataset = _dataset(cfg)
    if not dataset.is_test.any():
        raise ConfigError("lds needs test points; set dataset.params.n_test")
    init = _init_model(cfg, dataset)
    loss = _loss(cfg)
    lcfg = _lds_config(cfg)
    setup = ev.prepare_lds(init, dataset, lcfg, loss)
    rows = []
    if cfg["lds"]["oracle"]:
        rho = ev.lds_from(setup.actual, setup.actual)
        report = ev.LdsReport(rho, float("nan"), setup.seeds, np.arange(rho.size), np.array([], dtype=int))
        rows.append(("oracle", report))
    else:
        ckpt = _checkpoint_path(cfg, out)
        model = M.load_checkpoint(ckpt) if ckpt.exists() else _train(cfg, dataset, init).model
        methods = cfg["lds"]["methods"] or [cfg["compressor"]["spec"]]
        for text in methods:
            bound = pipeline.bind(text, model, bool(cfg["compressor"]["layerwise"]))
            report = ev.lds_evaluate(lcfg, dataset, model, bound, _mode(cfg, bound), setup=setup, loss=loss)
            rows.append((bound.text, report))
    with (out / "lds.csv").open("w") as fh:
        fh.write("method,test_index,rho\n")
        for label, rep in rows:
            for idx, r in zip(rep.test_indices, rep.rho):
                fh.write(f"{label},{int(idx)},{r:.6f}\n")
    summary = []
    for i, (label, rep) in enumerate(rows):
        ev.write_lds_summary(out / f"lds_summary.{i}.txt", rep, label)
        summary.append((out / f"lds_summary.{i}.txt").read_text())
        plotting.plot_lds(rep.rho, out / f"lds_hist.{i}.png", rep.null_mean, rep.null_std, label)
        log.info("%s: mean rho %.4f (null %.4f +- %.4f), damping %g", label, rep.mean, rep.null_mean, rep.null_std, rep.damping)
    (out / "lds_summary.txt").write_text("\n".join(summary))
    return EXIT_OK


def cmd_bench(cfg, out: Path, args) -> int:
    from . import plotting

    b = cfg["bench"]
    rows = []
    for kind in b["kinds"]:
        for k in b["target_dims"]:
            for frac in b["sparsity"]:
                try:
                    spec = SketchSpec(SketchKind(kind), b["input_dim"], k, 1, b["seed"])
                except ValueError as exc:
                    raise ConfigError(f"bench: {exc}") from None
                rows.append(benchmark_projection(spec, frac, b["trials"], b["vectors"], b["seed"]))
    ev.write_rows_csv(out / "bench.csv", rows)
    plotting.plot_bench(rows, out / "bench.png")
    lay = b["layer"]
    traces = ev.synthetic_traces(lay["d_in"], lay["d_out"], lay["tokens"], lay["samples"], lay["seed"])
    try:
        tp = ev.compare_throughput([[t] for t in traces], b["factorized"], repeats=b["trials"])
    except ValueError as exc:
        raise ConfigError(f"bench.factorized: {exc}") from None
    ev.write_rows_csv(out / "throughput.csv", tp)
    plotting.plot_throughput(tp, out / "throughput.png")
    log.info("wrote %d projection rows and %d throughput rows", len(rows), len(tp))
    return EXIT_OK


def cmd_select_mask(cfg, out: Path, args) -> int:
    from . import plotting

    dataset = _dataset(cfg)
    model = _trained_model(cfg, out, dataset)
    mc = cfg["mask"]
    X, y = dataset.train()
    Xt, yt = dataset.test() if dataset.is_test.any() else dataset.train()
    X, y = X[: mc["n_train"]], y[: mc["n_train"]]
    Xt, yt = Xt[: mc["n_test"]], yt[: mc["n_test"]]
    loss = _loss(cfg)
    G, tr = M.per_sample_grads(model, X, y, loss)
    Gt, trt = M.per_sample_grads(model, Xt, yt, loss)
    common = dict(l1=mc["l1"], steps=mc["steps"], step_size=mc["step_size"], init_scale=mc["init_scale"], seed=mc["seed"])
    try:
        if mc["layer"] is None:
            problem = mk.SelectiveMaskProblem(G, Gt, mc["k"], **common)
            result, mask = mk.selective_train(problem)
            mk.write_mask(out / "mask.gmsk", mask, result.trace)
            kept = mask.size
        else:
            l = int(mc["layer"])
            problem = mk.FactorizedMaskProblem(tr.z_in[l], tr.dz_out[l], trt.z_in[l], trt.dz_out[l], mc["k_in"], mc["k_out"], **common)
            result, m_in, m_out = mk.selective_train_factorized(problem)
            mk.write_mask(out / f"mask.l{l}.in.gmsk", m_in, result.trace)
            mk.write_mask(out / f"mask.l{l}.out.gmsk", m_out, result.trace)
            kept = m_in.size * m_out.size
    except ValueError as exc:
        raise ConfigError(f"mask: {exc}") from None
    plotting.plot_mask_trace(result.trace, out / "mask_trace.png")
    log.info("selective mask keeps %d coordinates; objective %.4f", kept, result.objective)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "cache": cmd_cache,
    "attribute": cmd_attribute,
    "lds": cmd_lds,
    "bench": cmd_bench,
    "select-mask": cmd_select_mask,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradsketch", description="Gradient compression and data attribution.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (dotted path)")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    parser.add_argument("--test", default=None, help="comma-separated test indices for 'attribute'")
    parser.add_argument("--top-k", type=int, default=None, help="top-K rows per test point for 'attribute'")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, SpecParseError)):
        return EXIT_CONFIG
    if isinstance(exc, FloatingPointError):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, attr.StoreFormatError, attr.FingerprintMismatch, mk.MaskFormatError, M.IdxFormatError, FileNotFoundError, OSError)):
        return EXIT_DATA
    if isinstance(exc, (ValueError, KeyError)):
        return EXIT_CONFIG
    raise exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        spec = cfg["compressor"]["spec"]
        parse_compressor(spec) if looks_flat(spec) else fg.parse_factorized(spec)
        out = run_dir(cfg)
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return COMMANDS[args.command](cfg, out, args)
        return COMMANDS[args.command](cfg, out, args)
    except Exception as exc:  # mapped to documented exit codes
        code = _exit_code(exc)
        print(f"gradsketch {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
