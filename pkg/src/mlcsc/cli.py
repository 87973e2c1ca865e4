"""Command-line harness: gradient audits, parameter counts, benches, training.

Exit codes are uniform across subcommands: 0 success, 1 a quality gate
failed (gradient error over tolerance, parameter count off by 6% or more),
2 the request itself was unusable (unknown keys, missing files).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import presets
from .experiments import (
    ConfigError,
    run_eval,
    run_pursuit_bench,
    run_training,
)
from .nets import NetConfig, count_params_from_config, make_gradcheck_problem

GRADCHECK_TOLERANCES = {"linear": 1e-9, "softmax": 1e-6, "net": 1e-4}
# The published sizes are rounded to 3 decimals of a million; the smallest
# model rounds coarsely enough to need the looser gate.
PARAM_COUNT_TOLERANCES = {"cifar10": 0.005, "cifar100": 0.005, "covid19": 0.005, "crack": 0.06}


def make_linear_problem(seed: int = 0):
    """Kink-free graph exercising both conv directions, affine, and sums.

    Kept small and O(1)-conditioned: the gate is tight enough that the
    rounding floor of central differences (roughly u * |loss| / epsilon,
    relative to each tensor's gradient scale) must stay well under it.
    """
    rng = np.random.default_rng(seed)
    params = {
        "image": rng.standard_normal((1, 2, 5, 5)) * 0.4,
        "weights": rng.standard_normal((3, 2, 3, 3)) * 0.4,
        "head.weight": rng.standard_normal((4, 3 * 5 * 5)) * 0.07,
        "head.bias": rng.standard_normal(4) * 0.3,
    }

    def loss_fn(p):
        code = ad.conv_analyze(p["image"], p["weights"], 1, 1, "zero")
        recon = ad.conv_synthesize(code, p["weights"], 1, 1, "zero", (5, 5))
        resid = ad.sub(p["image"], recon)
        logits = ad.affine(ad.flatten(code), p["head.weight"], p["head.bias"])
        return ad.add(ad.half_sum_squares(resid), ad.half_sum_squares(ad.scale(logits, 2.0)))

    return loss_fn, params, None


def make_softmax_problem(seed: int = 0):
    """Affine features into the cross-entropy head; smooth everywhere."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 6, size=8)
    params = {
        "features": rng.standard_normal((8, 12)),
        "weight": rng.standard_normal((6, 12)) * 0.3,
        "bias": rng.standard_normal(6) * 0.1,
    }

    def loss_fn(p):
        return ad.softmax_cross_entropy(ad.affine(p["features"], p["weight"], p["bias"]), labels)

    return loss_fn, params, None


_SUITES = {
    "linear": make_linear_problem,
    "softmax": make_softmax_problem,
    "net": make_gradcheck_problem,
}


def cmd_gradcheck(args) -> int:
    suites = list(_SUITES) if args.suite == "all" else [args.suite]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    failed = False
    for suite in suites:
        loss_fn, params, resample = _SUITES[suite](args.seed)
        report = ad.gradcheck(loss_fn, params, seed=args.seed, resample=resample)
        report.write_csv(out_dir / f"gradcheck_{suite}.csv")
        tol = GRADCHECK_TOLERANCES[suite]
        ok = report.max_rel_err <= tol
        failed |= not ok
        print(
            f"gradcheck {suite}: max_rel_err {report.max_rel_err:.3e} "
            f"(tol {tol:.0e}) {'PASS' if ok else 'FAIL'}"
        )
    return 1 if failed else 0


def cmd_paramcount(args) -> int:
    names = [args.preset] if args.preset else sorted(presets.PUBLISHED_PARAM_COUNTS_M)
    failed = False
    for name in names:
        if name not in presets.PUBLISHED_PARAM_COUNTS_M:
            raise ConfigError(
                f"no published size for preset {name!r}; "
                f"pick from {sorted(presets.PUBLISHED_PARAM_COUNTS_M)}"
            )
        count = count_params_from_config(NetConfig(**presets.NET_PRESETS[name]))
        published = presets.PUBLISHED_PARAM_COUNTS_M[name] * 1e6
        rel = abs(count - published) / published
        tol = PARAM_COUNT_TOLERANCES[name]
        ok = rel < tol
        failed |= not ok
        print(
            f"paramcount {name}: {count} vs published {published / 1e6:.3f}M "
            f"(deviation {rel * 100:.2f}%, tol {tol * 100:g}%) {'PASS' if ok else 'FAIL'}"
        )
    return 1 if failed else 0


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return cfg


def cmd_pursuit_bench(args) -> int:
    overrides = _load_config(args.config)
    if args.seed is not None:
        overrides["seeds"] = (args.seed,)
    records = run_pursuit_bench(overrides, args.out)
    cells = {(r.algorithm, r.k, r.seed) for r in records}
    print(f"pursuit-bench: {len(cells)} cells, {len(records)} records -> {args.out}")
    return 0


def cmd_train(args) -> int:
    overrides = _load_config(args.config)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.algorithm:
        overrides["algorithm"] = args.algorithm
    if args.iters is not None:
        overrides["iters"] = args.iters
    summary = run_training(args.preset, overrides, args.out)
    print(
        f"train {summary['config']['algorithm']}: "
        f"test_acc {summary['test_acc']:.4f} best_val {summary['best_val_acc']:.4f} "
        f"-> {args.out}"
    )
    return 0


def cmd_eval(args) -> int:
    overrides = _load_config(args.config)
    if args.checkpoint:
        overrides["checkpoint"] = args.checkpoint
    summary = run_eval(overrides, args.out)
    print(f"eval: test_acc {summary['accuracy']:.4f} -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlcsc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference audit of the gradient engine")
    p.add_argument("--suite", choices=["all", *GRADCHECK_TOLERANCES], default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/gradcheck")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("paramcount", help="preset parameter totals vs published sizes")
    p.add_argument("--preset", choices=sorted(presets.PUBLISHED_PARAM_COUNTS_M), default=None)
    p.set_defaults(func=cmd_paramcount)

    p = sub.add_parser("pursuit-bench", help="solver grid over synthetic sparse problems")
    p.add_argument("--config", default=None, help="JSON file of bench overrides")
    p.add_argument("--seed", type=int, default=None, help="run a single seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pursuit_bench)

    p = sub.add_parser("train", help="train a pursuit classifier")
    p.add_argument("--preset", choices=presets.preset_names(), default=None)
    p.add_argument("--config", default=None, help="JSON file of training overrides")
    p.add_argument("--algorithm", choices=["lta", "lbp", "mlista", "wsebp"], default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="re-score a saved checkpoint")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--config", default=None, help="JSON file of eval overrides")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
