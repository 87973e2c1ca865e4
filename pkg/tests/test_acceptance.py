"""Acceptance gates: one test per shipped criterion, budgets enforced.

Each test prints a single summary line; pytest -v gives the pass/fail
verdicts.  Criterion 8 trains eight small nets and dominates the runtime
of the suite (about fifteen minutes on a workstation CPU).
"""

import csv
import time
from pathlib import Path

import numpy as np

from mlcsc import autodiff as ad
from mlcsc.cli import main as cli_main
from mlcsc.data import (
    flat_spectrum_dictionary,
    load_cifar,
    sha256_file,
    support_mask,
    synth_sparse_problem,
)
from mlcsc.dictionary import (
    analyze,
    estimate_spectral_bound,
    materialize,
    random_dictionary,
    synthesize,
)
from mlcsc.nets import (
    build_mlcsc_net,
    forward_classify,
    get_params,
    load_checkpoint,
    make_gradcheck_problem,
    save_checkpoint,
)
from mlcsc.pursuit import (
    AnchorPolicy,
    LayerParams,
    MLCSCModel,
    lbp_forward,
    lta_forward,
    mlista_forward,
    reconstruct,
    wsebp_forward,
)

FIXTURES = Path(__file__).parent / "fixtures"


def random_stack(rng, beta=1.0, signed_xi=True):
    """Random layered model within the small-model caps (depth 3, 16 atoms)."""
    depth = int(rng.integers(1, 4))
    cin = int(rng.integers(1, 5))
    extent = int(rng.integers(4, 17))
    x = rng.standard_normal((cin, extent, extent))
    layers = []
    for _ in range(depth):
        atoms = int(rng.integers(1, 17))
        kernel = int(rng.choice([3, 5]))
        d = random_dictionary(atoms, cin, kernel, stride=1, padding=kernel // 2,
                              seed=int(rng.integers(2**31)))
        xi = 0.1 * rng.standard_normal(atoms)
        if not signed_xi:
            xi = np.abs(xi)
        layers.append((d, LayerParams(xi, beta=beta)))
        cin = atoms
    return MLCSCModel(layers), x


def test_criterion_1_parameter_counts(capsys):
    t0 = time.perf_counter()
    rc = cli_main(["paramcount"])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    assert rc == 0, out
    assert out.count("PASS") == 4 and "FAIL" not in out
    assert elapsed < 1.0, f"paramcount took {elapsed:.2f}s"
    print(f"[criterion 1] four preset counts within tolerance in {elapsed:.2f}s: PASS")


def test_criterion_2_zero_iteration_equivalence():
    t0 = time.perf_counter()
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        model, x = random_stack(rng, beta=1.0)
        ref = lta_forward(model, x).codes
        others = (
            lbp_forward(model, x, iters=1, threshold="relu").codes,
            mlista_forward(model, x, iters=0).codes,
            wsebp_forward(model, x, anchor=AnchorPolicy.ZERO).codes,
        )
        for codes in others:
            for a, b in zip(ref, codes):
                np.testing.assert_array_equal(a, b)
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0, f"took {elapsed:.2f}s"
    print(f"[criterion 2] 50 models, four solvers bitwise-equal at zero budget "
          f"in {elapsed:.1f}s: PASS")


def _dense_layer_ops(model, input_shape):
    """Materialized analysis matrices and flattened thresholds, layer by layer."""
    mats, xis, alphas = [], [], []
    cin, h, w = input_shape
    for d, p in model.layers:
        a = materialize(d, (cin, h, w))
        oh, ow = d.code_hw((h, w))
        xi = np.broadcast_to(p.xi, (d.atoms,))
        xis.append(np.repeat(xi, oh * ow))
        alphas.append(1.0 / p.beta)
        mats.append(a)
        cin, h, w = d.atoms, oh, ow
    return mats, xis, alphas


def _shrink(z, xi):
    return np.sign(z) * np.maximum(np.abs(z) - xi, 0.0)


def _dense_lbp(mats, xis, alphas, x, iters):
    codes = []
    u = x.ravel()
    for a, xi, alpha in zip(mats, xis, alphas):
        g = np.zeros(a.shape[0])
        for _ in range(iters):
            g = _shrink(g - alpha * (a @ (a.T @ g - u)), xi)
        codes.append(g)
        u = g
    return codes


def _dense_mlista(mats, xis, alphas, x, iters):
    u = x.ravel()
    codes = []
    for a, xi in zip(mats, xis):
        u = np.maximum(a @ u + xi, 0.0)
        codes.append(u)
    for _ in range(iters):
        hats = [codes[-1]]
        for a in reversed(mats[1:]):
            hats.insert(0, a.T @ hats[0])
        prev = x.ravel()
        for i, (a, xi, alpha) in enumerate(zip(mats, xis, alphas)):
            g = _shrink(hats[i] - alpha * (a @ (a.T @ hats[i] - prev)), xi)
            codes[i] = g
            prev = g
    return codes


def _dense_wsebp(mats, xis, alphas, x):
    u = x.ravel()
    codes = []
    for a, xi, alpha in zip(mats, xis, alphas):
        z = a @ u
        g = np.maximum(z + alpha * (a @ (u - a.T @ z)) + xi, 0.0)
        codes.append(g)
        u = g
    return codes


def test_criterion_3_dense_oracle_equivalence():
    t0 = time.perf_counter()
    plans = [((3,), 1), ((2, 3), 1), ((4, 2), 2), ((3, 3, 2), 1)]
    worst = 0.0
    for seed in range(20):
        channels, cin = plans[seed % len(plans)]
        problem = synth_sparse_problem(channels, in_channels=cin, spatial=(6, 6),
                                       kernel=3, k_sparse=3, sigma=0.01,
                                       seed=300 + seed, xi=0.03)
        layers = []
        c, (h, w) = cin, (6, 6)
        for d, p in problem.model.layers:
            bound = estimate_spectral_bound(d, (c, h, w)).bound
            layers.append((d, LayerParams(p.xi, beta=bound)))
            c = d.atoms
        model = MLCSCModel(layers, algorithm="lbp", threshold="soft")
        x = problem.signal
        mats, xis, alphas = _dense_layer_ops(model, x.shape)

        pairs = [
            (lbp_forward(model, x, iters=4, threshold="soft").codes,
             _dense_lbp(mats, xis, alphas, x, 4)),
            (mlista_forward(model, x, iters=2).codes,
             _dense_mlista(mats, xis, alphas, x, 2)),
            (wsebp_forward(model, x, anchor=AnchorPolicy.ANALYSIS).codes,
             _dense_wsebp(mats, xis, alphas, x)),
        ]
        for solver_codes, dense_codes in pairs:
            for got, want in zip(solver_codes, dense_codes):
                gap = float(np.abs(got.ravel() - want).max())
                worst = max(worst, gap)
                assert gap <= 1e-8, f"seed {seed}: max-abs gap {gap:.3e}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0, f"took {elapsed:.2f}s"
    print(f"[criterion 3] 20 instances within 1e-8 of dense transcriptions "
          f"(worst {worst:.2e}) in {elapsed:.1f}s: PASS")


def test_criterion_4_ista_descent():
    t0 = time.perf_counter()
    for seed in range(50):
        rng = np.random.default_rng(2000 + seed)
        model, x = random_stack(rng, signed_xi=False)
        layers = []
        cin, hw = x.shape[0], x.shape[-2:]
        for d, p in model.layers:
            bound = estimate_spectral_bound(d, (cin, *hw)).bound
            layers.append((d, LayerParams(p.xi, beta=bound)))
            cin = d.atoms
        tight = MLCSCModel(layers, algorithm="lbp", threshold="soft")
        out = lbp_forward(tight, x, iters=5, threshold="soft")
        for trace in out.objectives:
            diffs = np.diff(trace)
            assert (diffs <= 1e-12).all(), f"seed {seed}: trace rose {trace}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"took {elapsed:.2f}s"
    print(f"[criterion 4] 250 per-layer traces non-increasing (slack 1e-12) "
          f"in {elapsed:.1f}s: PASS")


def test_criterion_5_adjointness_and_spectral_soundness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)
    worst_ratio = 0.0
    for trial in range(100):
        atoms = int(rng.integers(1, 8))
        cin = int(rng.integers(1, 6))
        kernel = int(rng.integers(2, 6))
        stride = int(rng.choice([1, 2]))
        padding = int(rng.integers(0, kernel))
        boundary = str(rng.choice(["zero", "circular"]))
        if boundary == "circular":
            stride, padding = 1, 0
        extent = kernel + int(rng.integers(0, 8))
        d = random_dictionary(atoms, cin, kernel, stride=stride, padding=padding,
                              boundary=boundary, seed=int(rng.integers(2**31)))
        u = rng.standard_normal((cin, extent, extent))
        v = rng.standard_normal((atoms, *d.code_hw((extent, extent))))
        lhs = float(np.vdot(analyze(d, u), v))
        rhs = float(np.vdot(u, synthesize(d, v, output_shape=(extent, extent))))
        bound_resid = abs(lhs - rhs)
        scale = np.linalg.norm(u) * np.linalg.norm(v)
        worst_ratio = max(worst_ratio, bound_resid / max(scale, 1e-300))
        assert bound_resid <= 1e-9 * scale, f"trial {trial}: residual {bound_resid:.3e}"

    for seed in range(10):
        srng = np.random.default_rng(900 + seed)
        atoms = int(srng.integers(1, 6))
        cin = int(srng.integers(1, 4))
        d = random_dictionary(atoms, cin, 3, stride=1, padding=1,
                              seed=int(srng.integers(2**31)))
        shape = (cin, 7, 7)
        a = materialize(d, shape)
        gram = a @ a.T if a.shape[0] <= a.shape[1] else a.T @ a
        lam = float(np.linalg.eigvalsh(gram)[-1])
        est = estimate_spectral_bound(d, shape).bound
        assert est >= (1.0 - 1e-3) * lam, f"seed {seed}: {est} < {lam}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"took {elapsed:.2f}s"
    print(f"[criterion 5] adjoint residual ratio <= {worst_ratio:.2e} over 100 "
          f"trials; spectral estimates dominate dense eigenvalues: PASS")


def test_criterion_6_gradient_verification():
    t0 = time.perf_counter()
    loss_fn, params, resample = make_gradcheck_problem(seed=0)
    report = ad.gradcheck(loss_fn, params, epsilon=1e-5, seed=0, resample=resample)
    elapsed = time.perf_counter() - t0
    assert report.max_rel_err <= 1e-4, f"max rel err {report.max_rel_err:.3e}"
    assert elapsed < 120.0, f"took {elapsed:.2f}s"
    print(f"[criterion 6] two-layer net gradcheck max rel err "
          f"{report.max_rel_err:.2e} (tol 1e-4) in {elapsed:.1f}s: PASS")


def test_criterion_7_synthetic_recovery():
    t0 = time.perf_counter()
    d = flat_spectrum_dictionary(2, 64, seed=3)
    rng = np.random.default_rng(503)
    deep = np.zeros((2, 1, 64))
    support = np.sort(rng.choice(deep.size, size=3, replace=False))
    deep.reshape(-1)[support] = rng.uniform(0.5, 1.5, size=3) * rng.choice([-1.0, 1.0], size=3)
    x = synthesize(d, deep, output_shape=(1, 64))
    bound = estimate_spectral_bound(d, (1, 1, 64)).bound
    model = MLCSCModel([(d, LayerParams(np.full(2, 0.02), beta=bound))],
                       algorithm="lbp", threshold="soft")
    out = lbp_forward(model, x, iters=200)
    _, err = reconstruct(model, out, x=x)
    found = support_mask(out.deepest.reshape(-1))
    assert err < 1e-2, f"nmse {err:.3e}"
    assert found[support].all(), "a true spike was missed"
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"took {elapsed:.2f}s"
    print(f"[criterion 7] noiseless k=3 recovery: nmse {err:.2e}, support "
          f"{int(found.sum())}/3 entries incl. all true spikes: PASS")


def _read_test_acc(path: Path) -> float:
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["metric"] == "test_acc":
                return float(row["value"])
    raise AssertionError(f"no test_acc row in {path}")


def test_criterion_8_desk_learning_sanity(tmp_path):
    t0 = time.perf_counter()
    accs = {}
    for algorithm in ("lta", "lbp", "mlista", "wsebp"):
        runs = []
        for attempt in (1, 2):
            out = tmp_path / f"{algorithm}-{attempt}"
            rc = cli_main(["train", "--preset", "desk", "--algorithm", algorithm,
                           "--out", str(out)])
            assert rc == 0, f"{algorithm} run {attempt} failed"
            runs.append(out)
        first = (runs[0] / "metrics.csv").read_bytes()
        second = (runs[1] / "metrics.csv").read_bytes()
        assert first == second, f"{algorithm}: repeat run is not byte-identical"
        acc = _read_test_acc(runs[0] / "metrics.csv")
        assert acc > 0.30, f"{algorithm}: test accuracy {acc:.4f} <= 0.30"
        accs[algorithm] = acc
    elapsed = time.perf_counter() - t0
    assert elapsed <= 45 * 60, f"took {elapsed / 60:.1f} min"
    ordering = " >= ".join(sorted(accs, key=accs.get, reverse=True))
    report = ", ".join(f"{k} {v:.4f}" for k, v in accs.items())
    print(f"[criterion 8] desk runs deterministic, all above 0.30 ({report}) "
          f"in {elapsed / 60:.1f} min; observed ordering (reported, not gated): "
          f"{ordering}: PASS")


def test_criterion_9_interop_round_trips(tmp_path):
    from mlcsc.data import read_tensor_file, write_tensor_file
    from mlcsc.nets import NetConfig

    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    for shape in ((1,), (3, 4), (2, 3, 5, 5)):
        tensor = rng.standard_normal(shape).astype(np.float32)
        write_tensor_file(tmp_path / "t.mlct", tensor)
        back = read_tensor_file(tmp_path / "t.mlct")
        assert back.dtype == tensor.dtype and back.shape == tensor.shape
        np.testing.assert_array_equal(back, tensor)

    cfg = NetConfig(channels=(4, 6), in_channels=3, kernel=3, stride=2, padding=1,
                    input_hw=(8, 8), num_classes=3, algorithm="wsebp", seed=5)
    net = build_mlcsc_net(cfg)
    save_checkpoint(tmp_path / "ckpt", net, extra={"epoch": 1})
    loaded, _ = load_checkpoint(tmp_path / "ckpt")
    for name, value in get_params(net).items():
        np.testing.assert_array_equal(get_params(loaded)[name], value, err_msg=name)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(forward_classify(loaded, x), forward_classify(net, x))

    fixture = FIXTURES / "synth_batch.bin"
    assert sha256_file(fixture) == (
        "546e5bd02440f5ff26099d8ab266537a494a977aa6046f8e82b8948e23ec7dbb"
    )
    data = load_cifar(fixture)
    assert len(data) == 40 and data.num_classes == 10
    np.testing.assert_array_equal(data.labels, np.arange(40) % 10)
    pixels = np.round(data.images[0, 0, 0, :6] * 255.0).astype(int)
    np.testing.assert_array_equal(pixels, [146, 87, 149, 106, 93, 99])
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0, f"took {elapsed:.2f}s"
    print(f"[criterion 9] tensor/checkpoint round trips bit-identical, loader "
          f"fixture verified in {elapsed:.1f}s: PASS")
