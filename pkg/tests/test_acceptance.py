"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7 and 8 run the full desk-scale replication twice per case and
take several hours on one core.
"""
import json
import sys
import time

import numpy as np
import pytest

from oracles import VectorGRU, VectorLSTM, grad_matrix_kron, kron_chain_np, vec_walk
from trnn.backprop import backprop_series, grad_wrt_U, grad_wrt_W
from trnn.cells import TuckerParams, init_params, run_series
from trnn.cli import EXIT_OK, gradcheck, main
from trnn.data import SyntheticSpec, decode_series, encode_series, generate_synthetic
from trnn.tensor import tucker_map
from trnn.trainer import TrainConfig, evaluate, persistence_error, prepare_lag_task, train


@pytest.fixture
def verdict(request):
    """Print ``criterion N: PASS|FAIL detail`` straight to the terminal."""
    capman = request.config.pluginmanager.getplugin("capturemanager")
    lines = []

    def emit(number, ok, detail):
        lines.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    yield emit
    with capman.global_and_fixture_disabled():
        for line in lines:
            print(f"\n{line}", file=sys.stdout, flush=True)


def rel_err(a, b):
    """Array-wise relative error ``max|a - b| / max|b|``."""
    a, b = np.asarray(a), np.asarray(b)
    scale = np.max(np.abs(b))
    return float(np.max(np.abs(a - b)) / (scale if scale > 0 else 1.0))


def perturbed_model(kind, xdims, hdims, seed):
    rng = np.random.default_rng(seed)
    m = init_params(kind, xdims, hdims, seed=seed)
    return m.with_parameters({k: v + 0.5 * rng.standard_normal(v.shape) for k, v in m.parameters().items()})


def test_criterion_1_kronecker_tucker_identity(verdict):
    rng = np.random.default_rng(1)
    shapes = [(2,), (2, 3), (2, 3, 2), (3, 3, 3)]
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(200):
        dims = shapes[rng.integers(len(shapes))]
        X = rng.standard_normal(dims)
        mats = [rng.standard_normal((int(rng.integers(1, 5)), n)) for n in dims]
        worst = max(worst, rel_err(vec_walk(tucker_map(X, mats)), kron_chain_np(mats) @ vec_walk(X)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 5
    verdict(1, ok, f"max rel err {worst:.2e} over 200 tensors in {elapsed:.2f} s")
    assert ok


def test_criterion_2_gradient_correctness(verdict):
    t0 = time.perf_counter()
    worst, worst_abs, where = 0.0, 0.0, None
    for seed in range(20):
        for cell in ("tlstm", "tgru"):
            for T in (1, 3, 4):
                for regime in ("last", "all"):
                    errs = gradcheck(cell, (2, 3), (2, 2), T, regime, seed)
                    k, (rel, _) = max(errs.items(), key=lambda kv: kv[1][0])
                    worst_abs = max(worst_abs, max(a for _, a in errs.values()))
                    if rel > worst or where is None:
                        worst, where = rel, (cell, T, regime, seed, k)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 60
    verdict(2, ok, f"max rel err {worst:.2e} (floor 1e-8; largest raw difference {worst_abs:.2e}) "
                   f"over 240 checks in {elapsed:.1f} s")
    assert ok


@pytest.mark.parametrize("kind", ["tlstm", "tgru"])
def test_criterion_3_vector_reduction(kind, verdict):
    gates = "fioc" if kind == "tlstm" else "rzh"
    cls = VectorLSTM if kind == "tlstm" else VectorGRU
    worst = 0.0
    for seed in range(10):
        m = perturbed_model(kind, (4,), (3,), seed)
        p = m.parameters()
        ref = cls(*(p[f"{a}.W1"] for a in gates), *(p[f"{a}.U1"] for a in gates),
                  *(p[f"{a}.B"] for a in gates), p["head.V1"], p["head.b"])
        rng = np.random.default_rng(100 + seed)
        xs = list(rng.standard_normal((5, 4)))
        dys = list(rng.standard_normal((5, 4)))
        ref_out = ref.forward(xs)
        ref_grads = ref.backward(dys)
        outs, tapes = run_series(m, xs)
        grads = backprop_series(m, tapes, dys)
        worst = max(worst, max(rel_err(o, r) for o, r in zip(outs, ref_out)))
        for a in gates:
            for ours, theirs in (("W1", "W"), ("U1", "U"), ("B", "b")):
                worst = max(worst, rel_err(grads[f"{a}.{ours}"], ref_grads[f"{a}.{theirs}"]))
        worst = max(worst, rel_err(grads["head.V1"], ref_grads["V"]),
                    rel_err(grads["head.b"], ref_grads["c"]))
    ok = worst <= 1e-12
    verdict(3, ok, f"{kind}: max rel err {worst:.2e} against the vector reference over 10 seeds")
    assert ok


def test_criterion_4_reset_route_arbitration(verdict):
    def worst(regime, seed, drop):
        errs = gradcheck("tgru", (2, 3), (2, 2), 3, regime, seed, drop_reset_route=drop)
        return max(r for r, _ in errs.values())

    shipped = literal = 0.0
    for seed in range(5):
        for regime in ("last", "all"):
            shipped = max(shipped, worst(regime, seed, False))
            literal = max(literal, worst(regime, seed, True))
    ok = shipped <= 1e-6
    verdict(4, ok, f"shipped tGRU max rel err {shipped:.2e}; variant without the reset-route term "
                   f"{literal:.2e}")
    assert ok
    assert literal > 1e-3  # the omitted term is not negligible


def test_criterion_5_jacobian_oracle(verdict):
    rng = np.random.default_rng(5)
    worst = 0.0
    for dims in [(1,), (2,), (3,), (2, 2), (2, 3), (1, 3)]:
        for _ in range(10):
            hd = tuple(int(rng.integers(1, 4)) for _ in dims)
            p = TuckerParams(W=[rng.standard_normal((n, n)) for n in hd],
                             U=[rng.standard_normal((n, m)) for n, m in zip(hd, dims)],
                             B=np.zeros(hd))
            dM, H, X = rng.standard_normal(hd), rng.standard_normal(hd), rng.standard_normal(dims)
            for d in range(1, len(dims) + 1):
                worst = max(worst, rel_err(grad_wrt_W(dM, p, H, d), grad_matrix_kron(dM, p.W, H, d)),
                            rel_err(grad_wrt_U(dM, p, X, d), grad_matrix_kron(dM, p.U, X, d)))
    ok = worst <= 1e-12
    verdict(5, ok, f"max rel err {worst:.2e} between efficient and Kronecker gradient forms")
    assert ok


DESCENT_CONFIG = dict(cell="tgru", hidden=(8, 8, 2), regime="last", lr=0.1, clip=5.0, epochs=500,
                      window=5, seed=0)


def run_descent():
    series = generate_synthetic(SyntheticSpec(dims=(4, 4, 2), length=200, seed=0))
    task = prepare_lag_task(series, 5, "last")
    t0 = time.perf_counter()
    model, report = train(task.train, TrainConfig(**DESCENT_CONFIG))
    elapsed = time.perf_counter() - t0
    return task, model, report, elapsed


@pytest.fixture(scope="module")
def descent_runs():
    return [run_descent() for _ in range(2)]


def test_criterion_6_training_descent(descent_runs, verdict):
    task, model, report, elapsed = descent_runs[0]
    ratio = report.final_train_mse / report.mse_history[0]
    test_mse = evaluate(model, task.test, task.scaler)
    base = persistence_error(task.test, task.scaler)
    ok = ratio < 0.1 and test_mse < base and elapsed < 300
    verdict(6, ok, f"train mse ratio {ratio:.4f}, test mse {test_mse:.4g} vs persistence {base:.4g}, "
                   f"{elapsed:.0f} s")
    assert ok


@pytest.fixture(scope="module")
def replications(tmp_path_factory):
    root = tmp_path_factory.mktemp("replicate")
    runs = {}
    for case in (1, 2):
        for rep in ("a", "b"):
            out = root / f"case{case}{rep}"
            t0 = time.perf_counter()
            code = main(["replicate", "--case", str(case), "--out", str(out)])
            runs[case, rep] = (code, out, time.perf_counter() - t0)
    return runs


@pytest.mark.slow
@pytest.mark.parametrize("case", [1, 2])
def test_criterion_7_replication(case, replications, verdict):
    code, out, elapsed = replications[case, "a"]
    assert code == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    rows = (out / "convergence.csv").read_text().splitlines()
    frac = report["fraction_non_increasing"]
    ok = (len(rows) == 1001 and report["epochs"] == 1000 and frac >= 0.9
          and report["beats_persistence"] and np.isfinite(report["test_mse"]))
    verdict(7, ok, f"case {case}: {frac:.1%} non-increasing epochs, per-element test mse "
                   f"{report['test_mse']:.4g} vs persistence {report['persistence_mse']:.4g} "
                   f"(train-mean predictor {report['train_mean_mse']:.4g}), {elapsed / 60:.0f} min")
    assert ok


@pytest.mark.slow
def test_criterion_8_determinism(descent_runs, replications, verdict, tmp_path):
    paths = []
    for i, (_, _, report, _) in enumerate(descent_runs):
        paths.append(tmp_path / f"descent{i}.csv")
        report.write_csv(paths[-1])
    same = [paths[0].read_bytes() == paths[1].read_bytes()]
    for case in (1, 2):
        a, b = (replications[case, r][1] / "convergence.csv" for r in "ab")
        same.append(a.read_bytes() == b.read_bytes())
        ra, rb = (json.loads((replications[case, r][1] / "report.json").read_text()) for r in "ab")
        same.append(ra["test_mse"] == rb["test_mse"])
    ok = all(same)
    verdict(8, ok, f"bitwise-identical convergence CSVs and test mse for descent, case 1, case 2: {same}")
    assert ok


def test_criterion_9_format_round_trip(verdict):
    rng = np.random.default_rng(9)
    specials = np.array([-0.0, 0.0, 5e-324, -5e-324, 2.2250738585072009e-308, -1e-310])
    failures = 0
    for _ in range(1000):
        ndim = int(rng.integers(2, 5))
        shape = tuple(int(n) for n in rng.integers(1, 5, size=ndim))
        x = rng.standard_normal(shape) * 10.0 ** rng.integers(-300, 300, size=shape)
        flat = x.reshape(-1)
        idx = rng.integers(flat.size, size=min(flat.size, 3))
        flat[idx] = rng.choice(specials, size=idx.size)
        y = decode_series(encode_series(x))
        failures += y.shape != x.shape or y.tobytes() != x.tobytes()
    ok = failures == 0
    verdict(9, ok, f"{1000 - failures}/1000 round-trips bitwise exact, "
                   "negative zero and subnormals included")
    assert ok
