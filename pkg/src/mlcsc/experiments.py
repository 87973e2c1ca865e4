"""Experiment harness: solver benchmarks and classifier training runs.

Both entry points emit the same record schema.  Deterministic quantities go
to ``metrics.csv`` (byte-identical across repeat runs of one config on one
machine); wall-clock seconds go to a separate ``timing.csv`` so timing
noise never touches the comparable file.
"""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import presets
from .data import (
    Dataset,
    channel_stats,
    ensure_synthetic_cifar,
    load_cifar,
    normalize,
    split,
    support_mask,
    synth_sparse_problem,
    synthetic_corpus,
)
from .dictionary import estimate_spectral_bound
from .nets import (
    NetConfig,
    TrainConfig,
    build_mlcsc_net,
    evaluate,
    init_train_state,
    save_checkpoint,
    train_epoch,
)
from .pursuit import (
    AnchorPolicy,
    LayerParams,
    MLCSCModel,
    lbp_forward,
    lta_forward,
    mlista_forward,
    nmse,
    reconstruct,
    wsebp_forward,
)


class ConfigError(ValueError):
    """A config dict holds unknown keys or unusable values."""


@dataclass
class ExperimentRecord:
    """One measured quantity from one run cell."""

    algorithm: str
    k: int
    dataset: str
    seed: int
    epoch: int
    metric: str
    value: float
    seconds: float


METRICS_HEADER = ["algorithm", "K", "dataset", "seed", "epoch", "metric", "value"]
TIMING_HEADER = ["algorithm", "K", "dataset", "seed", "epoch", "seconds"]


def _fmt(value: float) -> str:
    return f"{value:.12g}"


def _sort_key(r: ExperimentRecord):
    return (r.algorithm, r.k, r.dataset, r.seed, r.epoch, r.metric)


def write_metrics_csv(path, records: list[ExperimentRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for r in sorted(records, key=_sort_key):
            writer.writerow([r.algorithm, r.k, r.dataset, r.seed, r.epoch, r.metric, _fmt(r.value)])


def write_timing_csv(path, records: list[ExperimentRecord]) -> None:
    seen = set()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TIMING_HEADER)
        for r in sorted(records, key=_sort_key):
            cell = (r.algorithm, r.k, r.dataset, r.seed, r.epoch)
            if cell in seen:
                continue
            seen.add(cell)
            writer.writerow([*cell, f"{r.seconds:.6f}"])


def worker_count() -> int:
    """Thread cap from MLCSC_THREADS (default 1; results never depend on it)."""
    raw = os.environ.get("MLCSC_THREADS", "1")
    try:
        count = int(raw)
    except ValueError as exc:
        raise ConfigError(f"MLCSC_THREADS={raw!r} is not an integer") from exc
    return max(1, count)


# --- pursuit benchmark --------------------------------------------------------

BENCH_DEFAULTS: dict = {
    "name": "synth",
    "channels": (4,),
    "in_channels": 4,
    "spatial": (12, 12),
    "kernel": 3,
    "k_sparse": 4,
    "sigma": 0.01,
    "xi": 0.02,
    "seeds": (0, 1, 2, 3, 4),
    "k_grid": (0, 2, 5, 20),
}


def _merged(defaults: dict, overrides: dict, what: str) -> dict:
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {what} config keys: {sorted(unknown)}")
    return {**defaults, **overrides}


def _bench_model(cfg: dict, seed: int):
    problem = synth_sparse_problem(
        tuple(cfg["channels"]),
        in_channels=int(cfg["in_channels"]),
        spatial=tuple(cfg["spatial"]),
        kernel=int(cfg["kernel"]),
        k_sparse=int(cfg["k_sparse"]),
        sigma=float(cfg["sigma"]),
        seed=seed,
        xi=float(cfg["xi"]),
    )
    # Iterative solvers need step scales that dominate each layer's operator.
    layers = []
    cin = int(cfg["in_channels"])
    h, w = (int(cfg["spatial"][0]), int(cfg["spatial"][1]))
    for d, p in problem.model.layers:
        bound = estimate_spectral_bound(d, (cin, h, w)).bound
        layers.append((d, LayerParams(p.xi, beta=bound)))
        cin = d.atoms
    model = MLCSCModel(layers, algorithm="lbp", threshold="soft")
    return problem, model


def _bench_cell(cfg: dict, algorithm: str, k: int, seed: int) -> list[ExperimentRecord]:
    problem, model = _bench_model(cfg, seed)
    x = problem.signal
    if algorithm == "lta":
        result = lta_forward(model, x)
    elif algorithm == "lbp":
        result = lta_forward(model, x) if k == 0 else lbp_forward(model, x, k, threshold="soft")
    elif algorithm == "mlista":
        result = mlista_forward(model, x, k, threshold="soft")
    elif algorithm.startswith("wsebp-"):
        result = wsebp_forward(model, x, AnchorPolicy(algorithm.split("-", 1)[1]))
    else:
        raise ValueError(f"unknown bench algorithm {algorithm!r}")
    deep = result.deepest
    found = support_mask(deep.reshape(-1))
    true = np.zeros(deep.size, dtype=bool)
    true[problem.support] = True
    inter = int((found & true).sum())
    n_found = int(found.sum())
    n_true = int(true.sum())
    metrics = {
        "objective": sum(trace[-1] for trace in result.objectives),
        "nmse": nmse(problem.clean_signal, reconstruct(model, result)),
        "code_nmse": nmse(problem.codes[-1], deep),
        "support_recall": inter / n_true if n_true else 1.0,
        "support_precision": inter / n_found if n_found else (1.0 if n_true == 0 else 0.0),
        "l0": float(n_found),
    }
    return [
        ExperimentRecord(algorithm, k, cfg["name"], seed, 0, metric, float(value), result.seconds)
        for metric, value in metrics.items()
    ]


def bench_cells(cfg: dict) -> list[tuple[str, int]]:
    """Algorithm/budget grid: single-pass rows at K=0, iterative rows per K."""
    cells: list[tuple[str, int]] = [("lta", 0)]
    for k in cfg["k_grid"]:
        cells.append(("lbp", int(k)))
        cells.append(("mlista", int(k)))
    cells.append(("wsebp-zero", 0))
    cells.append(("wsebp-analysis", 0))
    if tuple(cfg["channels"])[:1] == (int(cfg["in_channels"]),):
        cells.append(("wsebp-literal", 0))
    return cells


def run_pursuit_bench(overrides: dict, out_dir) -> list[ExperimentRecord]:
    """Run the solver grid over seeded synthetic problems; write CSVs."""
    cfg = _merged(BENCH_DEFAULTS, overrides, "bench")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [
        (algorithm, k, int(seed)) for algorithm, k in bench_cells(cfg) for seed in cfg["seeds"]
    ]
    records: list[ExperimentRecord] = []
    workers = worker_count()
    if workers == 1:
        for algorithm, k, seed in jobs:
            records.extend(_bench_cell(cfg, algorithm, k, seed))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for out in pool.map(lambda j: _bench_cell(cfg, *j), jobs):
                records.extend(out)
    write_metrics_csv(out_dir / "metrics.csv", records)
    write_timing_csv(out_dir / "timing.csv", records)
    from .data import write_manifest

    write_manifest(out_dir / "manifest.txt", {k: cfg[k] for k in sorted(cfg)})
    return records


# --- training runs ------------------------------------------------------------

TRAIN_DEFAULTS: dict = {
    "name": "",
    "channels": (16, 32, 64, 128),
    "in_channels": 3,
    "kernel": 4,
    "stride": 2,
    "padding": 1,
    "input_hw": (32, 32),
    "num_classes": 10,
    "algorithm": "wsebp",
    "iters": 2,
    "anchor": "analysis",
    "threshold": "relu",
    "beta_mode": "learned",
    "net_seed": 0,
    "lr": 0.005,
    "momentum": 0.9,
    "batch_size": 128,
    "epochs": 10,
    "milestones": (100, 150),
    "lr_decay": 0.2,
    "seed": 0,
    "source": "synthetic",
    "variant": "cifar10",
    "data_dir": "",
    "train_size": 5000,
    "val_size": 1000,
    "test_size": 2000,
    "data_seed": 7,
}


def resolve_train_config(preset: str | None, overrides: dict) -> dict:
    """Layer preset values over the defaults, then explicit overrides on top."""
    cfg = dict(TRAIN_DEFAULTS)
    if preset is not None:
        if preset not in presets.NET_PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; pick from {presets.preset_names()}")
        cfg.update(presets.NET_PRESETS[preset])
        cfg.update(presets.TRAIN_PRESETS[preset])
        cfg.update(presets.DATA_PRESETS[preset])
        cfg["name"] = preset
    return _merged(cfg, overrides, "train")


def _load_splits(cfg: dict, out_dir: Path) -> tuple[Dataset, Dataset, Dataset]:
    hw = tuple(int(v) for v in cfg["input_hw"])
    classes = int(cfg["num_classes"])
    train_size, val_size = int(cfg["train_size"]), int(cfg["val_size"])
    if cfg["source"] == "synthetic":
        test_size = int(cfg["test_size"])
        if hw == (32, 32) and classes == 10:
            # Exercise the real binary codec whenever the geometry allows it.
            train_path, test_path = ensure_synthetic_cifar(
                out_dir / "data", train_size + val_size, test_size, int(cfg["data_seed"])
            )
            pool = load_cifar(train_path)
            test = load_cifar(test_path)
        else:
            images, labels = synthetic_corpus(
                train_size + val_size + test_size, classes, hw, int(cfg["data_seed"])
            )
            floats = images.astype(np.float32) / 255.0
            pool = Dataset(floats[: train_size + val_size], labels[: train_size + val_size],
                           "synthetic", classes)
            test = Dataset(floats[train_size + val_size :], labels[train_size + val_size :],
                           "synthetic", classes)
        train, val = split(pool, (train_size, val_size), seed=int(cfg["data_seed"]))
        return train, val, test
    if cfg["source"] == "cifar":
        data_dir = cfg["data_dir"]
        if not data_dir:
            raise ConfigError("source 'cifar' needs data_dir pointing at the binary batches")
        variant = cfg["variant"]
        files = presets.CIFAR_FILES[variant]
        root = Path(data_dir)
        for rel in files["train"] + files["test"]:
            if not (root / rel).exists():
                raise ConfigError(f"missing data file {root / rel}")
        pool = load_cifar([root / rel for rel in files["train"]], variant)
        test = load_cifar([root / rel for rel in files["test"]], variant)
        train_size = min(train_size, len(pool) - val_size)
        train, val = split(pool, (train_size, val_size), seed=int(cfg["data_seed"]))
        return train, val, test
    raise ConfigError(f"unknown data source {cfg['source']!r}")


def run_training(preset: str | None, overrides: dict, out_dir) -> dict:
    """Train one classifier end to end; write metrics/timing/checkpoint.

    Returns a summary with the final test accuracy and the record list.
    """
    cfg = resolve_train_config(preset, overrides)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, val, test = _load_splits(cfg, out_dir)
    mean, std = channel_stats(train)
    train, val, test = (normalize(d, mean, std) for d in (train, val, test))

    net_config = NetConfig(
        channels=tuple(cfg["channels"]),
        in_channels=int(cfg["in_channels"]),
        kernel=int(cfg["kernel"]),
        stride=int(cfg["stride"]),
        padding=int(cfg["padding"]),
        input_hw=tuple(cfg["input_hw"]),
        num_classes=int(cfg["num_classes"]),
        algorithm=cfg["algorithm"],
        iters=int(cfg["iters"]),
        anchor=AnchorPolicy(cfg["anchor"]),
        threshold=cfg["threshold"],
        beta_mode=cfg["beta_mode"],
        seed=int(cfg["net_seed"]),
    )
    train_config = TrainConfig(
        lr=float(cfg["lr"]),
        momentum=float(cfg["momentum"]),
        batch_size=int(cfg["batch_size"]),
        epochs=int(cfg["epochs"]),
        milestones=tuple(cfg["milestones"]),
        lr_decay=float(cfg["lr_decay"]),
        seed=int(cfg["seed"]),
    )
    net = build_mlcsc_net(net_config)
    state = init_train_state(net)
    name = cfg["name"] or cfg["source"]
    algorithm = cfg["algorithm"]
    k = int(cfg["iters"]) if cfg["algorithm"] in ("lbp", "mlista") else 0
    seed = int(cfg["seed"])
    records: list[ExperimentRecord] = []
    best_val = -1.0
    for epoch in range(train_config.epochs):
        t0 = time.perf_counter()
        stats = train_epoch(net, state, train, train_config)
        val_acc = evaluate(net, val).accuracy if len(val) else 0.0
        seconds = time.perf_counter() - t0
        for metric, value in (
            ("train_loss", stats["loss"]),
            ("train_acc", stats["accuracy"]),
            ("val_acc", val_acc),
        ):
            records.append(
                ExperimentRecord(algorithm, k, name, seed, epoch, metric, float(value), seconds)
            )
        if val_acc >= best_val:
            best_val = val_acc
            save_checkpoint(
                out_dir / "checkpoint", net, {"epoch": epoch, "val_acc": _fmt(val_acc)}
            )
    t0 = time.perf_counter()
    test_acc = evaluate(net, test).accuracy
    final_epoch = max(train_config.epochs - 1, 0)
    records.append(
        ExperimentRecord(
            algorithm, k, name, seed, final_epoch, "test_acc", test_acc,
            time.perf_counter() - t0,
        )
    )
    write_metrics_csv(out_dir / "metrics.csv", records)
    write_timing_csv(out_dir / "timing.csv", records)
    from .data import write_manifest

    echo = {key: cfg[key] for key in sorted(cfg)}
    echo["norm_mean"] = ",".join(_fmt(v) for v in mean)
    echo["norm_std"] = ",".join(_fmt(v) for v in std)
    write_manifest(out_dir / "manifest.txt", echo)
    return {"test_acc": test_acc, "best_val_acc": best_val, "records": records, "config": cfg}


def run_eval(overrides: dict, out_dir) -> dict:
    """Evaluate a saved checkpoint on the test split its config describes."""
    from .nets import load_checkpoint

    defaults = {**TRAIN_DEFAULTS, "checkpoint": ""}
    cfg = _merged(defaults, overrides, "eval")
    if not cfg["checkpoint"]:
        raise ConfigError("eval needs a checkpoint directory")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net, extra = load_checkpoint(cfg["checkpoint"])
    train, _, test = _load_splits(cfg, out_dir)
    mean, std = channel_stats(train)
    result = evaluate(net, normalize(test, mean, std))
    name = cfg["name"] or cfg["source"]
    k = int(cfg["iters"]) if net.config.algorithm in ("lbp", "mlista") else 0
    records = [
        ExperimentRecord(
            net.config.algorithm, k, name, int(cfg["seed"]), int(extra.get("epoch", 0)),
            "test_acc", result.accuracy, 0.0,
        )
    ]
    write_metrics_csv(out_dir / "eval.csv", records)
    return {"accuracy": result.accuracy, "per_class_correct": result.per_class_correct,
            "per_class_total": result.per_class_total, "extra": extra}
