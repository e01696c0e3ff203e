"""Command-line entry point: ``ttnqml <command> [options]``.

Errors are reported on stderr as ``ttnqml-error: <Class>: <message>`` with a
nonzero exit status that depends on the error class (see ``EXIT_CODES``).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .circuit import (
    CircuitError,
    export_circuit,
    qubit_bound,
    read_circuit,
    simulate_circuit,
    write_circuit,
)
from .classifier import (
    LabeledFeatures,
    MissingWeightsError,
    confusion_matrix,
    cost,
    decision_values,
    evaluate,
    f1_scores,
    solve_weights_pinv,
    write_report_csv,
)
from .data import DataFormatError, Dataset, ScalingError, default_data_dir, har_dataset, load_mnist
from .encoding import EmbeddingRangeError, LocalMap
from .interpret import interpret_basis, interpret_weights, write_csv, write_pgm
from .numerics import ContractError
from .partial import DataMask, MaskError, infer_partial_batch, parse_mask
from .serialize import FormatError, load_dataset, load_model, save_model
from .stiefel import OptimizerConfig, isometric_weights, manifold_gd, nearest_isometry, write_trace_csv
from .ttn import (
    ResourceLimitError,
    ScheduleError,
    TTNModel,
    build_tree,
    coarse_grain_batch,
    pad_length,
    topology_image,
    topology_interleaved,
    topology_linear,
)

log = logging.getLogger("ttnqml")


class ConfigError(ValueError):
    pass


EXIT_CODES = {
    "ConfigError": 2,
    "DataFormatError": 3,
    "ScalingError": 3,
    "FileNotFoundError": 3,
    "FormatError": 3,
    "EmbeddingRangeError": 4,
    "MaskError": 4,
    "ScheduleError": 4,
    "ContractError": 4,
    "MissingWeightsError": 5,
    "NonIsometricError": 6,
    "CircuitError": 6,
    "ResourceLimitError": 7,
}

_HANDLED = (
    ConfigError,
    DataFormatError,
    ScalingError,
    FileNotFoundError,
    FormatError,
    EmbeddingRangeError,
    MaskError,
    ScheduleError,
    ContractError,
    CircuitError,
    ResourceLimitError,
)


@dataclass
class RunConfig:
    dataset: str = "mnist"
    data_dir: Optional[str] = None
    digits: Optional[list] = None
    train_file: Optional[str] = None
    test_file: Optional[str] = None
    accel: str = "total"
    map: str = "scaled-phase"
    a: float = 0.1
    topology: str = "auto"
    eps: float = 2e-4
    chi_max: Optional[int] = None
    top_chi: Optional[int] = None
    optimizer: str = "pinv"
    beta: float = 0.1
    eta: float = 0.1
    epochs: int = 500
    grad_norm_stop: Optional[float] = 1e-6
    seed: int = 0
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None
    workers: int = 1
    out: str = "out"

    def validate(self) -> None:
        if not 0.0 <= self.eps < 1.0:
            raise ConfigError(f"eps must lie in [0, 1), got {self.eps}")
        for name in ("chi_max", "top_chi", "train_limit", "test_limit"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.optimizer not in ("pinv", "nearest-iso", "manifold-gd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.dataset not in ("mnist", "har", "file"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.dataset == "file" and not self.train_file:
            raise ConfigError("--dataset file needs --train-file")
        if self.topology not in ("auto", "image", "interleaved", "linear"):
            raise ConfigError(f"unknown topology {self.topology!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            OptimizerConfig(self.beta, self.eta, self.epochs, self.grad_norm_stop)
            LocalMap(self.map, self.a)
        except ValueError as err:
            raise ConfigError(str(err)) from None


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Optional[Dataset]]:
    root = Path(cfg.data_dir) if cfg.data_dir else None
    if cfg.dataset == "mnist":
        digits = tuple(cfg.digits) if cfg.digits else None
        return load_mnist(root or default_data_dir() / "mnist", digits, 16, cfg.train_limit, cfg.test_limit, cfg.seed)
    if cfg.dataset == "har":
        return har_dataset(root or default_data_dir() / "har", cfg.accel, cfg.train_limit, cfg.test_limit, cfg.seed)
    if not (cfg.train_file or cfg.test_file):
        raise ConfigError("--dataset file needs --train-file and/or --test-file")
    train = load_dataset(cfg.train_file) if cfg.train_file else None
    test = load_dataset(cfg.test_file) if cfg.test_file else None
    rng = np.random.default_rng(cfg.seed)
    for ds, limit in ((train, cfg.train_limit), (test, cfg.test_limit)):
        if ds is not None and limit is not None and limit < ds.n_samples:
            idx = np.sort(rng.choice(ds.n_samples, limit, replace=False))
            ds.samples, ds.labels = ds.samples[idx], ds.labels[idx]
    return train, test


def make_schedule(cfg_topology: str, ds: Dataset):
    layout = ds.layout
    kind = cfg_topology
    if kind == "auto":
        kind = {"image": "image", "timeseries": "interleaved"}.get(layout.get("kind"), "linear")
    if kind == "image":
        return topology_image(int(layout["rows"]), int(layout["cols"]))
    if kind == "interleaved":
        return topology_interleaved(int(layout["timesteps"]), int(layout["n_features"]))
    return topology_linear(pad_length(ds.length))


def _local_map(cfg: RunConfig, train: Dataset) -> LocalMap:
    if cfg.map == "phase":
        lo, hi = float(train.samples.min()), float(train.samples.max())
        return LocalMap("phase", cfg.a, lo, hi if hi > lo else lo + 1.0)
    return LocalMap(cfg.map, cfg.a, 0.0, 1.0)


class _Out:
    def __init__(self, path, command: str, config: dict):
        self.dir = Path(path)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.command, self.config = command, config
        self.results: dict = {}

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def close(self) -> None:
        manifest = {
            "command": self.command,
            "version": __version__,
            "config": self.config,
            "files": self.files,
            "results": self.results,
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _features(model: TTNModel, ds: Dataset) -> np.ndarray:
    if ds.length != model.n_features:
        raise ContractError(f"dataset length {ds.length} does not match model ({model.n_features})")
    return coarse_grain_batch(model, ds.samples)


def _n_classes(model: TTNModel, ds: Dataset) -> int:
    if model.weights is not None:
        return model.weights.n_classes
    return ds.n_classes


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> dict:
    cfg.validate()
    out = _Out(cfg.out, "train", asdict(cfg))
    t0 = time.perf_counter()
    train, test = load_datasets(cfg)
    schedule = make_schedule(cfg.topology, train)
    lmap = _local_map(cfg, train)
    model = build_tree(
        train.samples, schedule, lmap, cfg.chi_max, cfg.eps,
        top_chi=cfg.top_chi, workers=cfg.workers, n_features=train.length,
    )
    t_build = time.perf_counter() - t0
    n_classes = train.n_classes
    ftr = coarse_grain_batch(model, train.samples)
    lf = LabeledFeatures(ftr, train.labels, n_classes)
    w_pinv = solve_weights_pinv(lf)
    results = {"max_bond_dim": model.max_bond_dim, "top_dim": model.top_dim, "pinv_cost": cost(lf, w_pinv)}
    if cfg.optimizer == "pinv":
        weights = w_pinv
    else:
        w_iso = nearest_isometry(w_pinv.matrix)
        results["nearest_iso_cost"] = cost(lf, w_iso)
        if cfg.optimizer == "manifold-gd":
            fte = _features(model, test) if test is not None else None
            f1_tr, f1_te = [], []

            def track(epoch, w):
                f1_tr.append(evaluate(ftr, train.labels, w, n_classes)[1].macro_f1)
                if fte is not None:
                    f1_te.append(evaluate(fte, test.labels, w, n_classes)[1].macro_f1)

            track(0, w_iso)
            res = manifold_gd(lf, w_iso, OptimizerConfig(cfg.beta, cfg.eta, cfg.epochs, cfg.grad_norm_stop), track)
            extra = {"train_f1": f1_tr}
            if fte is not None:
                extra["test_f1"] = f1_te
            write_trace_csv(out.path("trace.csv"), res, extra)
            w_iso = res.weights
            results["epochs_run"] = res.epochs_run
            results["final_grad_norm"] = float(res.grad_norm_trace[-1])
        weights = isometric_weights(w_iso)
    model.weights = weights
    model.metadata.update(
        {
            "dataset": {
                "kind": cfg.dataset, "digits": cfg.digits, "accel": cfg.accel,
                "train_limit": cfg.train_limit, "seed": cfg.seed, "layout": train.layout,
                "scaling": None if train.scaling is None else train.scaling.to_dict(),
            },
            "optimizer": cfg.optimizer,
            "version": __version__,
        }
    )
    save_model(model, out.path("model.ttn"))
    cm, rep = evaluate(ftr, train.labels, weights, n_classes)
    results.update({"cost": cost(lf, weights), "train_macro_f1": rep.macro_f1, "build_seconds": t_build})
    with out.path("train_report.csv").open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["layer", "position", "in_left", "in_right", "bond_dim", "discarded_weight", "raw_trace"])
        for s in model.metadata["node_stats"]:
            wr.writerow([s["layer"], s["position"], *s["in_dims"], s["out_dim"], repr(s["discarded"]), repr(s["raw_trace"])])
        wr.writerow([])
        for k, v in results.items():
            wr.writerow([k, v])
    if test is not None:
        cm_te, rep_te = evaluate(_features(model, test), test.labels, weights, n_classes)
        results["test_macro_f1"] = rep_te.macro_f1
        write_report_csv(out.path("test_metrics.csv"), cm_te, rep_te)
    results["seconds"] = time.perf_counter() - t0
    out.results = results
    out.close()
    return results


def _eval_config(model: TTNModel, cfg: RunConfig) -> RunConfig:
    """Fill dataset settings from the model when not given explicitly."""
    meta = model.metadata.get("dataset", {})
    if cfg.dataset is None:
        cfg.dataset = meta.get("kind", "mnist")
    if cfg.digits is None and cfg.dataset == meta.get("kind"):
        cfg.digits = meta.get("digits")
    if cfg.train_limit is None and cfg.dataset == meta.get("kind"):
        cfg.train_limit = meta.get("train_limit")
    return cfg


def _eval_split(model: TTNModel, cfg: RunConfig, split: str) -> Dataset:
    cfg = _eval_config(model, cfg)
    train, test = load_datasets(cfg)
    ds = test if split == "test" else train
    if ds is None:
        raise ConfigError(f"no {split} split available")
    return ds


def cmd_eval(model_path, cfg: RunConfig, split: str = "test") -> dict:
    model = load_model(model_path)
    if model.weights is None:
        raise MissingWeightsError("model has no decision weights")
    ds = _eval_split(model, cfg, split)
    out = _Out(cfg.out, "eval", {"model": str(model_path), "split": split, **asdict(cfg)})
    cm, rep = evaluate(_features(model, ds), ds.labels, model.weights, model.weights.n_classes)
    write_report_csv(out.path("metrics.csv"), cm, rep)
    out.results = {"macro_f1": rep.macro_f1, "n_samples": ds.n_samples}
    out.close()
    return out.results


def _sweep_masks(kind: str, ds: Dataset, order: str) -> list[tuple[str, DataMask]]:
    layout = ds.layout
    if kind in ("rows", "cols"):
        n = int(layout["rows"] if kind == "rows" else layout["cols"])
        key = kind
    elif kind == "times":
        n, key = int(layout["timesteps"]), "times"
    else:
        raise ConfigError(f"unknown sweep {kind!r}")
    specs = []
    for k in range(1, n + 1):
        spec = f"{key}={n - k}..{n - 1}" if order == "bottom-up" else f"{key}=0..{k - 1}"
        specs.append((spec, parse_mask(spec, ds.length, layout)))
    return specs


def cmd_infer_partial(
    model_path, cfg: RunConfig, mask: Optional[str] = None, sweep: Optional[str] = None,
    order: str = "bottom-up", mixture: bool = False, split: str = "test",
) -> dict:
    model = load_model(model_path)
    if model.weights is None:
        raise MissingWeightsError("model has no decision weights")
    ds = _eval_split(model, cfg, split)
    if (mask is None) == (sweep is None):
        raise ConfigError("give exactly one of --mask or --sweep")
    masks = _sweep_masks(sweep, ds, order) if sweep else [(mask, parse_mask(mask, ds.length, ds.layout))]
    out = _Out(cfg.out, "infer-partial", {"model": str(model_path), "mask": mask, "sweep": sweep, "order": order, **asdict(cfg)})
    rows = []
    n_cls = model.weights.n_classes
    for spec, m in masks:
        res = infer_partial_batch(model, ds.samples, m, mixture)
        rep = f1_scores(confusion_matrix(ds.labels, res.classes, n_cls))
        rows.append({"mask": spec, "n_present": m.n_present, "macro_f1": rep.macro_f1, "mean_p1": float(res.p1.mean())})
        log.info("%s: F1 %.5f", spec, rep.macro_f1)
    with out.path("partial.csv").open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["mask", "n_present", "macro_f1", "mean_p1"])
        wr.writeheader()
        wr.writerows(rows)
    out.results = {"rows": rows}
    out.close()
    return out.results


def cmd_interpret(model_path, out_dir: str, anchor: Optional[int] = None, basis: Optional[int] = None, differences: bool = True) -> dict:
    model = load_model(model_path)
    layout = model.metadata.get("dataset", {}).get("layout", {})
    if anchor is None and layout.get("kind") == "image":
        anchor = (int(layout["rows"]) // 2) * int(layout["cols"]) + int(layout["cols"]) // 2
    rep = interpret_weights(model, anchor)
    out = _Out(out_dir, "interpret", {"model": str(model_path), "anchor": anchor, "basis": basis})

    def emit(name, arr):
        if layout.get("kind") == "image":
            img = arr.reshape(int(layout["rows"]), int(layout["cols"]))
            write_csv(out.path(f"{name}.csv"), img)
            write_pgm(out.path(f"{name}.pgm"), img)
            out.files.append(f"{name}.pgm.scale.txt")
        elif layout.get("kind") == "timeseries":
            t, nf = int(layout["timesteps"]), int(layout["n_features"])
            write_csv(out.path(f"{name}.csv"), arr.reshape(t, nf))
        else:
            write_csv(out.path(f"{name}.csv"), arr[None, :])

    n_cls = rep.averages.shape[0]
    for l in range(n_cls):
        emit(f"class{l}_average", rep.averages[l])
        if rep.cdm_element is not None:
            emit(f"class{l}_cdm_anchor", rep.cdm_element[l])
            emit(f"class{l}_mi_anchor", rep.mutual_info[l])
    if differences:
        for i in range(n_cls):
            for j in range(i + 1, n_cls):
                emit(f"diff_{i}_{j}", rep.averages[i] - rep.averages[j])
    if basis:
        for k, row in enumerate(interpret_basis(model, basis)):
            emit(f"basis{k}", row)
    out.results = {"n_classes": n_cls, "anchor": anchor}
    out.close()
    return out.results


def cmd_export(model_path, out_dir: str) -> dict:
    model = load_model(model_path)
    circ = export_circuit(model)
    out = _Out(out_dir, "export-circuit", {"model": str(model_path)})
    write_circuit(circ, out.path("circuit.txt"))
    widths = [len(g.qubits) for g in circ.gates]
    res = {
        "peak_qubits": circ.peak_qubits(),
        "qubits_allocated": circ.n_qubits,
        "qubit_bound": qubit_bound(model),
        "gate_count": circ.gate_count,
        "max_gate_qubits": max(widths) if widths else 0,
        "class_register": circ.class_register,
    }
    (out.path("resources.json")).write_text(json.dumps(res, indent=2) + "\n")
    out.results = res
    out.close()
    return res


def cmd_simulate(model_path, circuit_path, cfg: RunConfig, split: str = "test") -> dict:
    model = load_model(model_path)
    if model.weights is None:
        raise MissingWeightsError("model has no decision weights")
    circ = read_circuit(circuit_path)
    ds = _eval_split(model, cfg, split)
    vals = decision_values(_features(model, ds), model.weights)
    sq = vals**2
    classical = sq / sq.sum(axis=1, keepdims=True)
    out = _Out(cfg.out, "simulate", {"model": str(model_path), "circuit": str(circuit_path), **asdict(cfg)})
    worst = 0.0
    with out.path("simulation.csv").open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["sample", "label", *[f"p{l}" for l in range(circ.n_classes)], "max_abs_diff"])
        for i, x in enumerate(ds.samples):
            p = simulate_circuit(circ, x, model)
            diff = float(np.abs(p - classical[i]).max())
            worst = max(worst, diff)
            wr.writerow([i, int(ds.labels[i]), *[repr(float(v)) for v in p], repr(diff)])
    out.results = {"n_samples": ds.n_samples, "max_abs_diff": worst}
    out.close()
    return out.results


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_data_args(p: argparse.ArgumentParser, default_dataset: Optional[str]) -> None:
    p.add_argument("--dataset", choices=["mnist", "har", "file"], default=default_dataset)
    p.add_argument("--data-dir", help="directory with IDX files (mnist) or the UCI HAR layout (har)")
    p.add_argument("--digits", type=lambda s: [int(v) for v in s.split(",")], help="MNIST digits to keep, e.g. 0,1")
    p.add_argument("--train-file")
    p.add_argument("--test-file")
    p.add_argument("--accel", choices=["total", "body"], default="total")
    p.add_argument("--train-limit", type=int)
    p.add_argument("--test-limit", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")


def _optional_int(text: str) -> Optional[int]:
    return None if text.lower() in ("none", "inf") else int(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttnqml", description="Tree tensor network classifiers")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="build the tree and solve decision weights")
    _add_data_args(p, "mnist")
    p.add_argument("--map", choices=["phase", "scaled-phase", "polynomial"], default="scaled-phase")
    p.add_argument("--a", type=float, default=0.1)
    p.add_argument("--topology", choices=["auto", "image", "interleaved", "linear"], default="auto")
    p.add_argument("--eps", type=float, default=2e-4)
    p.add_argument("--chi-max", type=_optional_int)
    p.add_argument("--top-chi", type=_optional_int)
    p.add_argument("--optimizer", choices=["pinv", "nearest-iso", "manifold-gd"], default="pinv")
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--grad-norm-stop", type=float, default=1e-6)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("eval", help="score a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    _add_data_args(p, None)

    p = sub.add_parser("infer-partial", help="score with missing data elements")
    p.add_argument("--model", required=True)
    p.add_argument("--mask", help="rows=a..b | cols=a..b | times=a..b | sites=i,j,...")
    p.add_argument("--sweep", choices=["rows", "cols", "times"])
    p.add_argument("--order", choices=["bottom-up", "top-down"], default="bottom-up")
    p.add_argument("--mixture", action="store_true", help="score with the full eigen-mixture")
    p.add_argument("--split", choices=["train", "test"], default="test")
    _add_data_args(p, None)

    p = sub.add_parser("interpret", help="decode class weights to the data scale")
    p.add_argument("--model", required=True)
    p.add_argument("--anchor", type=int)
    p.add_argument("--basis", type=int, help="also decode the first N top-scale basis vectors")
    p.add_argument("--out", default="out")

    p = sub.add_parser("export-circuit", help="write a qubit circuit for an isometric model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", default="out")

    p = sub.add_parser("simulate", help="compare circuit simulation with the classical model")
    p.add_argument("--model", required=True)
    p.add_argument("--circuit", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    _add_data_args(p, None)
    return parser


def _config_from(args) -> RunConfig:
    fields = RunConfig.__dataclass_fields__
    kw = {k: v for k, v in vars(args).items() if k in fields and v is not None}
    cfg = RunConfig(**kw)
    if getattr(args, "dataset", "x") is None:
        cfg.dataset = None  # resolved from the model
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "train":
            res = cmd_train(_config_from(args))
        elif args.command == "eval":
            res = cmd_eval(args.model, _config_from(args), args.split)
        elif args.command == "infer-partial":
            res = cmd_infer_partial(args.model, _config_from(args), args.mask, args.sweep, args.order, args.mixture, args.split)
        elif args.command == "interpret":
            res = cmd_interpret(args.model, args.out, args.anchor, args.basis)
        elif args.command == "export-circuit":
            res = cmd_export(args.model, args.out)
        else:
            res = cmd_simulate(args.model, args.circuit, _config_from(args), args.split)
    except _HANDLED as err:
        name = type(err).__name__
        code = EXIT_CODES.get(name)
        if code is None:
            code = next((EXIT_CODES[c.__name__] for c in type(err).__mro__ if c.__name__ in EXIT_CODES), 1)
        print(f"ttnqml-error: {name}: {err}", file=sys.stderr)
        return code
    print(json.dumps(res, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
