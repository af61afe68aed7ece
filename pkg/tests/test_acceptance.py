"""Acceptance criteria, one test each.

Every test appends a ``PASS``/``FAIL`` line to ``REPORT``; the lines are
printed in the pytest terminal summary and also echoed to stdout.
"""
import time

import numpy as np
import pytest
import scipy.sparse.csgraph as csgraph

from ggcnseg import checks
from ggcnseg.autodiff import Tensor
from ggcnseg.cli import main
from ggcnseg.files import read_manifest
from ggcnseg.gnn import GgcnParams, ggcn_forward, ggcn_step
from ggcnseg.graph import build_grid
from ggcnseg.preprocess import normalize_bands, synth_scene, tsdm
from ggcnseg.trainer import Model, Sample, TrainConfig, confusion, evaluate, format_table, load_samples, train

REPORT = []


def record(number, title, passed, detail, seconds):
    line = f"{'PASS' if passed else 'FAIL'}  [{number:>2}] {title:<32} {detail} ({seconds:.1f}s)"
    REPORT.append(line)
    print(line)
    return passed


def cli(*argv):
    return main([str(a) for a in argv])


# -- 1 -----------------------------------------------------------------------


def test_gradient_integrity():
    t0 = time.perf_counter()
    results = checks.run_gradchecks("all")
    secs = time.perf_counter() - t0
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    pipeline = [r for r in results if r.name.startswith("pipeline.") and r.name.endswith("8x8")]
    ops = [r for r in results if r.name.startswith("autodiff.")]
    worst = max(r.value for r in pipeline)
    worst_op = max(r.value for r in ops)
    ok = not failed and len(pipeline) == 3 and worst < 1e-4 and worst_op < 1e-6 and secs < 60
    record(1, "gradient integrity", ok,
           f"{len(results) - len(failed)}/{len(results)} checks, 8x8 pipeline max rel err {worst:.2e} < 1e-4, "
           f"ops {worst_op:.2e} < 1e-6", secs)
    assert not failed, failed
    assert len(pipeline) == 3 and worst < 1e-4
    assert worst_op < 1e-6
    assert secs < 60


# -- 2 -----------------------------------------------------------------------


def test_spectral_equivalence():
    t0 = time.perf_counter()
    err = checks.oracle_cheb(count=20, max_order=5)
    secs = time.perf_counter() - t0
    ok = err < 1e-8 and secs < 10
    record(2, "spectral equivalence", ok, f"20 grids, max abs diff {err:.2e} < 1e-8", secs)
    assert err < 1e-8
    assert secs < 10


# -- 3 -----------------------------------------------------------------------


def test_tsdm_exactness():
    t0 = time.perf_counter()
    bad = checks.oracle_tsdm(count=100, size=16, T_d=5)
    rng = np.random.default_rng(1)
    classes = set()
    for _ in range(100):
        classes |= set(np.unique(tsdm(rng.random((16, 16)) < rng.random(), 5)).tolist())
    secs = time.perf_counter() - t0
    confined = classes <= set(range(11))
    ok = bad == 0 and confined and secs < 10
    record(3, "TSDM exactness", ok, f"100 masks, {bad} mismatches, classes within 0..10: {confined}", secs)
    assert bad == 0
    assert confined
    assert secs < 10


# -- 4 -----------------------------------------------------------------------


def test_coregistration_recovery():
    t0 = time.perf_counter()
    bad = checks.oracle_coreg(count=20, noise=0.05, max_shift=5)
    secs = time.perf_counter() - t0
    ok = bad == 0 and secs < 30
    record(4, "coregistration recovery", ok, f"20 scenes, {bad} shifts missed", secs)
    assert bad == 0
    assert secs < 30


# -- 5 -----------------------------------------------------------------------


def test_propagation_locality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    H = W = 6
    F = 4
    g = build_grid(H, W)
    dist = csgraph.shortest_path(g.adjacency, unweighted=True)
    p = GgcnParams(*(Tensor(rng.standard_normal((F, F)) * 0.5) for _ in range(7)))
    h0 = rng.standard_normal((H * W, F))
    worst = 0.0
    reached = True
    for n in (1, 2, 3):
        base = ggcn_forward(g, p, Tensor(h0), n).data
        for node in range(H * W):
            h1 = h0.copy()
            h1[node] += rng.standard_normal(F)
            diff = np.abs(ggcn_forward(g, p, Tensor(h1), n).data - base).max(axis=1)
            far = diff[dist[node] > n]
            worst = max(worst, float(far.max()) if far.size else 0.0)
            reached &= bool(diff[node] > 0)
    secs = time.perf_counter() - t0
    ok = worst <= 1e-12 and reached and secs < 30
    record(5, "propagation locality", ok, f"n in 1..3, all 36 nodes, max change beyond n hops {worst:.1e}", secs)
    assert worst <= 1e-12
    assert reached
    assert secs < 30


# -- 6 -----------------------------------------------------------------------


def test_gru_interpolation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    g = build_grid(2, 2)
    F = 3
    worst = 0.0
    for _ in range(1000):
        p = GgcnParams(*(Tensor(rng.standard_normal((F, F)) * rng.uniform(0.1, 3)) for _ in range(7)))
        hp = rng.standard_normal((4, F)) * rng.uniform(0.1, 5)
        s = ggcn_step(g, p, Tensor(hp))
        lo = np.minimum(hp, s.h_cand.data)
        hi = np.maximum(hp, s.h_cand.data)
        worst = max(worst, float(np.max(lo - s.h.data)), float(np.max(s.h.data - hi)))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-15
    record(6, "GRU interpolation", ok, f"1000 states, max excursion {max(worst, 0.0):.1e} <= 1e-15", secs)
    assert worst <= 1e-15


# -- 7 and 10 ----------------------------------------------------------------


def smoke_pipeline(root):
    syn, pre, run_dir = root / "synth", root / "pre", root / "run"
    assert cli("synth", "--seed", 0, "--count", 1, "--size", 32, "--buildings", 3, "--out", syn) == 0
    assert cli("preprocess", "--in", syn / "manifest.tsv", "--out", pre, "--patch", 32) == 0
    assert cli("train", "--manifest", pre / "manifest.tsv", "--out", run_dir, "--head", "ggcn",
               "--timesteps", 5, "--epochs", 300, "--lr", 0.1, "--patience", 50) == 0
    model = Model.load(run_dir / "checkpoint.gstn")
    total, _ = evaluate(model, load_samples(pre / "manifest.tsv"))
    return total, run_dir


@pytest.fixture(scope="module")
def smoke_runs(tmp_path_factory):
    runs = []
    for k in range(2):
        t0 = time.perf_counter()
        total, run_dir = smoke_pipeline(tmp_path_factory.mktemp(f"smoke{k}"))
        runs.append((total, run_dir, time.perf_counter() - t0))
    return runs


def test_overfitting_smoke(smoke_runs):
    total, run_dir, secs = smoke_runs[0]
    epochs = len((run_dir / "loss.csv").read_text().splitlines()) - 1
    ok = total.oa >= 0.95 and total.iou >= 0.85 and secs < 900
    record(7, "overfitting smoke", ok,
           f"OA {total.oa:.4f} >= 0.95, IoU {total.iou:.4f} >= 0.85 after {epochs} epochs", secs)
    assert total.oa >= 0.95
    assert total.iou >= 0.85
    assert secs < 900


def test_determinism(smoke_runs):
    (_, a, _), (_, b, secs) = smoke_runs
    same_ckpt = (a / "checkpoint.gstn").read_bytes() == (b / "checkpoint.gstn").read_bytes()
    same_loss = (a / "loss.csv").read_text() == (b / "loss.csv").read_text()
    record(10, "determinism", same_ckpt and same_loss,
           f"checkpoint identical: {same_ckpt}, loss.csv identical: {same_loss}", secs)
    assert same_ckpt
    assert same_loss


# -- 8 -----------------------------------------------------------------------


def benchmark_scenes(count=10, size=32, buildings=3):
    samples = []
    for i in range(count):
        img, mask, _ = synth_scene(100 + i, size, size, buildings)
        samples.append(Sample(normalize_bands(img).transpose(2, 0, 1).copy(), tsdm(mask, 5), f"bench_{i}"))
    return samples


def test_model_ordering_probe():
    """Reported only: the ordering of the three heads is logged, never asserted."""
    t0 = time.perf_counter()
    samples = benchmark_scenes()
    rows = []
    for head in ("gcn", "ggnn", "ggcn"):
        cfg = TrainConfig(head=head, lr=0.1, epochs=40, patience=50, seed=0)
        total, _ = evaluate(train(cfg, samples).model, samples)
        rows.append((head.upper(), total))
    secs = time.perf_counter() - t0
    print(format_table(rows))
    best = max(rows, key=lambda r: r[1].iou)[0]
    for label, r in rows:
        REPORT.append(f"      [ 8]   {label:<5} OA {r.oa:.4f}  F1 {r.f1:.4f}  IoU {r.iou:.4f}")
    observed = "observed" if best == "GGCN" else f"not observed (best IoU: {best})"
    record(8, "model ordering (report only)", True, f"GGCN best by IoU: {observed}", secs)
    for _, r in rows:
        assert r.f1 >= r.iou


# -- 9 -----------------------------------------------------------------------


def test_metric_identity():
    t0 = time.perf_counter()
    bad = checks.oracle_metrics(count=200)
    rng = np.random.default_rng(9)
    fixtures = [(np.zeros((4, 4)), np.zeros((4, 4))), (np.ones((4, 4)), np.zeros((4, 4))),
                (np.zeros((4, 4)), np.ones((4, 4))), (np.ones((3, 5)), np.ones((3, 5)))]
    fixtures += [(rng.random((8, 8)) < rng.random(), rng.random((8, 8)) < rng.random()) for _ in range(100)]
    for pred, truth in fixtures:
        r = confusion(pred, truth)
        bad += (r.tp, r.fp, r.fn, r.tn) != checks.brute_force_confusion(pred, truth) or r.f1 < r.iou
    secs = time.perf_counter() - t0
    record(9, "metric identity", bad == 0, f"{200 + len(fixtures)} cases, {bad} mismatches or f1 < iou", secs)
    assert bad == 0
