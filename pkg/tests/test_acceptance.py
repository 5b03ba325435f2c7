"""Acceptance criteria 1-10, each at its stated tolerance.

Every test prints one ``ACCEPTANCE <n> PASS|FAIL: <detail>`` line (visible even
without ``-s``). BasicMotions is read from ``$CALONET_BASICMOTIONS_DIR`` or
``/root/data/BasicMotions``; criterion 8 and its half of criterion 9 skip if absent.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from calonet import cli
from calonet.causal import BinningSpec, HistoryOrder, build_causal_matrix, causal_scores, transfer_entropy, transfer_entropy_symbols
from calonet.dataset import PLANTED_THRESHOLD, generate_series, planted_benchmark_config
from calonet.encoder import log_sparse_mask, windowed_attention
from calonet.gnn import GinConfig, aggregation_matrix, gin_stack, init_gin, readout
from calonet.model import load, saliency
from calonet.tensor import Tensor
from oracles import FD_TOL, brute_force_te, dense_masked_attention

BASICMOTIONS = Path(os.environ.get("CALONET_BASICMOTIONS_DIR", "/root/data/BasicMotions"))


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def test_criterion_01_te_oracle(capsys):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        L = int(rng.integers(3, 65))
        src = rng.integers(0, int(rng.integers(1, 5)), L)
        tgt = rng.integers(0, int(rng.integers(1, 5)), L)
        te = transfer_entropy_symbols(src, tgt, HistoryOrder(1, 1))
        worst = max(worst, abs(te - max(brute_force_te(src.tolist(), tgt.tolist()), 0.0)))
    dt = time.perf_counter() - t0
    report(capsys, 1, worst <= 1e-12 and dt < 10, f"max |TE - brute force| = {worst:.2e} over 200 cases in {dt:.1f}s")


def test_criterion_02_te_analytic_value(capsys):
    t0 = time.perf_counter()
    spec = BinningSpec(2, "equal-width")
    good = 0
    for seed in range(100):
        x = np.random.default_rng(seed).integers(0, 2, 10000).astype(float)
        y = np.r_[0.0, x[:-1]]
        fwd, back = transfer_entropy(x, y, spec=spec), transfer_entropy(y, x, spec=spec)
        good += abs(fwd - 1.0) <= 0.05 and back <= 0.05
    dt = time.perf_counter() - t0
    report(capsys, 2, good >= 95 and dt < 30, f"{good}/100 seeds within tolerance in {dt:.1f}s")


def test_criterion_03_antisymmetry_and_exclusivity(capsys):
    bad = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        v = rng.standard_normal((int(rng.integers(2, 9)), int(rng.integers(3, 257))))
        s = causal_scores(v)
        m = build_causal_matrix(v).scores
        bad += not (np.array_equal(s, -s.T) and np.all(m * m.T == 0) and np.all(np.diag(m) == 0)
                    and np.all((m == 0) | (m > 0)))
    report(capsys, 3, bad == 0, f"{100 - bad}/100 samples exact")


def test_criterion_04_gradient_suite(capsys):
    import test_model
    import test_tensor

    t0 = time.perf_counter()
    worst = {name: test_tensor._fd_cases(make) for name, make in test_tensor.PRIMITIVES.items()}
    try:
        test_model.test_end_to_end_gradient_matches_finite_differences()
        e2e = True
    except AssertionError:
        e2e = False
    dt = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < FD_TOL and e2e and test_tensor.CASES >= 50 and dt < 120
    report(capsys, 4, ok, f"{len(worst)} primitives x {test_tensor.CASES} cases, worst {name} {err:.1e}, "
                          f"end-to-end {'ok' if e2e else 'failed'}, {dt:.1f}s")


def test_criterion_05_sparse_mask_bound(capsys):
    over = 0
    for W in range(2, 1025):
        rows = np.isfinite(log_sparse_mask(W)).sum(axis=1)
        over += int(np.any(rows > np.floor(np.log2(np.maximum(np.arange(W), 1))) + 2))
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        W = int(rng.choice([2, 4, 8, 16]))
        P, d = int(rng.integers(1, 3 * W + 1)), int(rng.integers(1, 9))
        q, k, v = (rng.standard_normal((P, d)) for _ in range(3))
        got = windowed_attention(q[None], k[None], v[None], window=W).data[0]
        ref = np.vstack([dense_masked_attention(q[s:s + W], k[s:s + W], v[s:s + W], log_sparse_mask(W)[:len(q[s:s + W]), :len(q[s:s + W])])
                         for s in range(0, P, W)])
        worst = max(worst, float(np.max(np.abs(got - ref))))
    report(capsys, 5, over == 0 and worst <= 1e-12,
           f"bound violated for {over} window sizes in 2..1024; dense oracle max diff {worst:.1e}")


def test_criterion_06_gin_permutation(capsys):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 11))
        cfg = GinConfig(n_layers=2, node_dim=6)
        params = init_gin(cfg, rng)
        H = rng.standard_normal((n, 6))
        s = np.triu(rng.uniform(0.01, 1, (n, n)) * (rng.random((n, n)) < 0.4), 1)
        M = np.where(s - s.T > 0, s - s.T, 0.0)
        perm = rng.permutation(n)
        out = gin_stack(H, aggregation_matrix(M), params, cfg).data
        out_p = gin_stack(H[perm], aggregation_matrix(M[np.ix_(perm, perm)]), params, cfg).data
        worst = max(worst, float(np.max(np.abs(out_p - out[perm]))),
                    float(np.max(np.abs(readout(out_p).data - readout(out).data))))
    report(capsys, 6, worst <= 1e-9, f"max deviation {worst:.1e} over 100 graphs")


# ---------------------------------------------------------------------------
# end-to-end runs through the CLI


def _cli(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def planted(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("planted")
    for name, seed in (("train.ts", 0), ("test.ts", 1)):
        assert _cli("synth", "--seed", seed, "--out", tmp / name) == 0
    return tmp


def _train_planted(tmp, out):
    t0 = time.perf_counter()
    code = _cli("train", "--train", tmp / "train.ts", "--test", tmp / "test.ts", "--out", tmp / out,
                "--seed", 0, "--threshold", PLANTED_THRESHOLD)
    return code, time.perf_counter() - t0


def _report_rows(path):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return rows[:, 1], rows[:, 4]


def test_criterion_07_planted_end_to_end(planted, capsys, monkeypatch):
    monkeypatch.setenv("CALONET_THREADS", "1")
    code, dt = _train_planted(planted, "run_a")
    loss, acc = _report_rows(planted / "run_a" / "report.csv")
    ma = np.convolve(loss, np.ones(5) / 5, mode="valid")  # ma[0] is epochs 1-5
    rises = int(np.sum(np.diff(ma) > 0))
    ok = code == 0 and len(loss) == 50 and acc[-1] >= 0.90 and rises == 0 and dt < 300
    report(capsys, 7, ok, f"test accuracy {acc[-1]:.3f}, moving-average loss rises {rises} times, {dt:.1f}s")


def test_criterion_08_basicmotions(tmp_path, capsys):
    train, test = BASICMOTIONS / "BasicMotions_TRAIN.ts", BASICMOTIONS / "BasicMotions_TEST.ts"
    if not (train.exists() and test.exists()):
        with capsys.disabled():
            print(f"\nACCEPTANCE 8 SKIP: BasicMotions not found in {BASICMOTIONS}")
        pytest.skip("BasicMotions files not supplied")
    t0 = time.perf_counter()
    code = _cli("train", "--train", train, "--test", test, "--out", tmp_path / "bm", "--seed", 0)
    dt = time.perf_counter() - t0
    _, acc = _report_rows(tmp_path / "bm" / "report.csv")
    report(capsys, 8, code == 0 and acc[-1] >= 0.85 and dt < 900, f"test accuracy {acc[-1]:.3f} in {dt:.1f}s")


def test_criterion_09_determinism(planted, tmp_path, capsys):
    if not (planted / "run_a" / "report.csv").exists():
        _train_planted(planted, "run_a")
    _train_planted(planted, "run_b")
    same = [(planted / "run_a" / "report.csv").read_bytes() == (planted / "run_b" / "report.csv").read_bytes()]
    train, test = BASICMOTIONS / "BasicMotions_TRAIN.ts", BASICMOTIONS / "BasicMotions_TEST.ts"
    if train.exists() and test.exists():
        for out in ("a", "b"):
            _cli("train", "--train", train, "--test", test, "--out", tmp_path / out, "--seed", 0)
        same.append((tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes())
    report(capsys, 9, all(same), f"{sum(same)}/{len(same)} reruns byte-identical")


def test_criterion_10_saliency(planted, capsys):
    if not (planted / "run_a" / "model.json").exists():
        _train_planted(planted, "run_a")
    model = load(planted / "run_a" / "model.json")
    cfg = planted_benchmark_config()
    stats = model.normalization
    divisor = np.where(stats.std > 0, stats.std, 1.0)
    wins = {"gradient": 0, "gradient-x-input": 0}
    for seed in range(100):
        cls = seed % 4
        x = generate_series(cfg, cls, np.random.default_rng(10_000 + seed))
        x = (x - stats.mean[:, None]) / divisor[:, None]
        p = cfg.patterns[cls][0]
        inside = np.zeros(x.shape, dtype=bool)
        inside[p.dim, p.start:p.start + p.width] = True
        for method in wins:
            s = saliency(model, x, method=method)
            wins[method] += s[inside].mean() > s[~inside].mean()
    detail = (f"gradient saliency wins {wins['gradient']}/100 seeds "
              f"(gradient-x-input, informational: {wins['gradient-x-input']}/100)")
    report(capsys, 10, wins["gradient"] >= 90, detail)
