"""Registered gradient checks and brute-force oracles, runnable from the CLI.

Each check returns a :class:`CheckResult`; the acceptance tests and the
``gradcheck`` / ``oracle`` subcommands share these definitions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsfe import DsfeConfig, dense_block, dsfe_forward, init_params
from .gnn import GcnLayerParams, GgcnParams, HeadParams, gcn_layer, gcn_stack_forward, ggcn_forward, ggnn_baseline_step
from .gradcheck import check_directional, check_function
from .graph import ChebFilter, SpectralDecomposition, build_grid, cheb_apply, cheb_gains, laplacian, spectral_apply
from .preprocess import (coregister, gaussian_gradient_magnitude, mask_edges, normalize_bands, synth_scene,
                         to_grayscale, tsdm)


@dataclass
class CheckResult:
    name: str
    value: float  # max error (or failure count for exact oracles)
    tol: float
    seconds: float = 0.0
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.value < self.tol if self.tol > 0 else self.value == 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status}  {self.name:<28} err={self.value:.3e} tol={self.tol:.0e} ({self.seconds:.2f}s){extra}"


def _timed(name, tol, fn, detail=""):
    t0 = time.perf_counter()
    v = fn()
    return CheckResult(name, float(v), tol, time.perf_counter() - t0, detail)


# ---------------------------------------------------------------------------
# Gradient checks


def _autodiff_checks(seed):
    rng = np.random.default_rng(seed)
    g33 = build_grid(3, 3)
    tgt = rng.integers(0, 4, size=5)
    away = lambda s: rng.uniform(0.2, 1.0, s) * rng.choice([-1.0, 1.0], s)  # keep relu off its kink
    return [
        ("matmul", 1e-6, lambda: check_function(ad.matmul, [rng.standard_normal((2, 2)), rng.standard_normal((2, 2))], seed)),
        ("spmm", 1e-6, lambda: check_function(lambda x: ad.spmm(g33, x), [rng.standard_normal((9, 2))], seed)),
        ("conv2d", 1e-6, lambda: check_function(lambda x, w: ad.conv2d(x, w, 1, 1),
                                                [rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3))], seed)),
        ("conv2d_stride2", 1e-6, lambda: check_function(lambda x, w: ad.conv2d(x, w, 2, 1),
                                                        [rng.standard_normal((2, 6, 6)), rng.standard_normal((3, 2, 3, 3))], seed)),
        ("relu", 1e-6, lambda: check_function(ad.relu, [away((4, 3))], seed)),
        ("sigmoid", 1e-8, lambda: check_function(ad.sigmoid, [rng.standard_normal((4, 3))], seed)),
        ("tanh", 1e-8, lambda: check_function(ad.tanh, [rng.standard_normal((4, 3))], seed)),
        ("concat", 1e-8, lambda: check_function(lambda a, b: ad.concat([a, b]),
                                                [rng.standard_normal((4, 2)), rng.standard_normal((4, 3))], seed)),
        ("elementwise", 1e-8, lambda: check_function(lambda a, b: (1.0 - a) * b + a,
                                                     [rng.standard_normal((3, 3)), rng.standard_normal((3, 3))], seed)),
        ("upsample", 1e-8, lambda: check_function(lambda x: ad.upsample_nearest(x, 2), [rng.standard_normal((2, 3, 3))], seed)),
        ("log_softmax_nll", 1e-6, lambda: check_function(lambda z: ad.log_softmax_nll(z, tgt),
                                                         [rng.standard_normal((5, 4))], seed)),
    ]


def _gnn_checks(seed):
    rng = np.random.default_rng(seed)
    g = build_grid(3, 3)
    F = 3

    def ggcn(h, *ws):
        p = GgcnParams(*ws)
        return ggcn_forward(g, p, h, 3)

    def ggnn(h, *ws):
        return ggnn_baseline_step(g, GgcnParams(*ws), h).h

    ws = lambda: [rng.standard_normal((F, F)) * 0.5 for _ in range(7)]
    return [
        ("gcn_layer", 1e-6, lambda: check_function(lambda h, w: gcn_layer(g, GcnLayerParams(w), h),
                                                   [rng.standard_normal((9, F)), rng.standard_normal((F, 2))], seed)),
        ("gcn_stack_2layer", 1e-6, lambda: check_function(
            lambda h, w1, w2: gcn_stack_forward(g, [GcnLayerParams(w1), GcnLayerParams(w2)], h),
            [rng.standard_normal((9, F)), rng.standard_normal((F, 4)), rng.standard_normal((4, 2))], seed)),
        ("ggcn_forward_n3", 1e-4, lambda: check_function(ggcn, [rng.standard_normal((9, F))] + ws(), seed)),
        ("ggnn_step", 1e-4, lambda: check_function(ggnn, [rng.standard_normal((9, F))] + ws(), seed)),
    ]


def _dsfe_checks(seed):
    rng = np.random.default_rng(seed)
    cfg = DsfeConfig(in_channels=3, growth=2, layers_per_block=2, depth=1, embed_dim=3)

    def block(x, w0, w1):
        return dense_block(x, [w0, w1])

    def dsfe_loss_fn():
        p = init_params(cfg, rng)
        img = Tensor(rng.random((3, 4, 4)), _check=False)
        return lambda: ad.tensor_sum(ad.tanh(dsfe_forward(cfg, p, img))), p.tensors()

    def run_dsfe():
        fn, params = dsfe_loss_fn()
        return check_directional(fn, params, seed)

    return [
        ("dense_block", 1e-5, lambda: check_function(block, [rng.standard_normal((2, 4, 4)),
                                                             rng.standard_normal((2, 2, 3, 3)),
                                                             rng.standard_normal((2, 4, 3, 3))], seed)),
        ("dsfe_forward", 1e-4, run_dsfe),
    ]


def pipeline_loss(size: int = 4, timesteps: int = 2, seed: int = 0, head: str = "ggcn"):
    """Loss closure and parameters for DSFE -> graph head -> NLL on a synthetic scene."""
    from .trainer import Model, TrainConfig  # local import avoids a cycle

    cfg = TrainConfig(seed=seed, head=head, timesteps=timesteps)
    model = Model(cfg)
    img, mask, _ = synth_scene(seed, size, size, 1, noise=0.05, min_size=2, max_size=3)
    image = normalize_bands(img).transpose(2, 0, 1).copy()
    labels = tsdm(mask, cfg.td)
    return (lambda: model.loss(image, labels)), model.parameters()


def _pipeline_checks(seed):
    def run(size, head):
        fn, params = pipeline_loss(size, 2, seed, head)
        return check_directional(fn, params, seed)

    return [(f"pipeline_{h}_{n}x{n}", 1e-4, (lambda n=n, h=h: run(n, h)))
            for n in (4, 8) for h in ("ggcn", "ggnn", "gcn")]


GRADCHECK_MODULES = {
    "autodiff": _autodiff_checks,
    "gnn": _gnn_checks,
    "dsfe": _dsfe_checks,
    "pipeline": _pipeline_checks,
}


def run_gradchecks(module: str = "all", seed: int = 0) -> list:
    if module != "all" and module not in GRADCHECK_MODULES:
        raise KeyError(f"unknown gradcheck module {module!r}; choose from {sorted(GRADCHECK_MODULES)} or 'all'")
    names = list(GRADCHECK_MODULES) if module == "all" else [module]
    out = []
    for m in names:
        for name, tol, fn in GRADCHECK_MODULES[m](seed):
            out.append(_timed(f"{m}.{name}", tol, fn))
    return out


# ---------------------------------------------------------------------------
# Brute-force oracles


def brute_force_tsdm(mask: np.ndarray, T_d: int) -> np.ndarray:
    """All-pairs signed distance classes (independent of the transform in preprocess)."""
    m = np.asarray(mask).astype(bool)
    H, W = m.shape
    bnd = []
    for y in range(H):
        for x in range(W):
            if not m[y, x]:
                continue
            nbrs = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
            if any(not (0 <= a < H and 0 <= b < W) or not m[a, b] for a, b in nbrs):
                bnd.append((y, x))
    bld = np.argwhere(m)
    bnd = np.array(bnd).reshape(-1, 2)
    out = np.zeros((H, W), dtype=np.int64)
    for y in range(H):
        for x in range(W):
            if m[y, x]:
                d = np.sqrt(((bnd - (y, x)) ** 2).sum(axis=1)).min()
                s = int(round(d))
            elif len(bld):
                d = np.sqrt(((bld - (y, x)) ** 2).sum(axis=1)).min()
                s = -int(round(d))
            else:
                s = -T_d
            out[y, x] = min(max(s, -T_d), T_d) + T_d
    return out


def oracle_tsdm(count: int = 100, size: int = 16, seed: int = 0, T_d: int = 5) -> int:
    """Number of random masks on which ``tsdm`` disagrees with the brute force."""
    rng = np.random.default_rng(seed)
    bad = 0
    for i in range(count):
        density = rng.uniform(0.05, 0.7)
        mask = (rng.random((size, size)) < density).astype(np.uint8)
        if i % 4 == 0:  # blocky masks exercise long interior distances
            mask = np.zeros((size, size), np.uint8)
            for _ in range(rng.integers(0, 4)):
                y, x = rng.integers(0, size, 2)
                h, w = rng.integers(1, size, 2)
                mask[y:y + h, x:x + w] = 1
        lab = tsdm(mask, T_d)
        if not np.array_equal(lab, brute_force_tsdm(mask, T_d)) or lab.min() < 0 or lab.max() > 2 * T_d:
            bad += 1
    return bad


def oracle_cheb(count: int = 20, seed: int = 0, max_order: int = 5) -> float:
    """Max abs difference between Chebyshev recurrence and dense spectral filtering."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        while True:
            h, w = (int(v) for v in rng.integers(1, 9, 2))
            if h * w <= 64:
                break
        g = build_grid(h, w, int(rng.choice([4, 8])))
        lap = laplacian(g, "power")
        filt = ChebFilter.from_coeffs(rng.standard_normal(int(rng.integers(0, max_order + 1)) + 1))
        f = rng.standard_normal((g.num_nodes, 3))
        fast = cheb_apply(filt, lap, f)
        dec = SpectralDecomposition.of(lap)
        slow = spectral_apply(dec, cheb_gains(filt, dec.Lambda, lap.lambda_max), f)
        worst = max(worst, float(np.abs(fast - slow).max()))
    return worst


def oracle_coreg(count: int = 20, seed: int = 0, size: int = 48, noise: float = 0.05, max_shift: int = 5) -> int:
    """Number of synthetic scenes whose planted shift is not recovered exactly."""
    rng = np.random.default_rng(seed)
    bad = 0
    for i in range(count):
        shift = tuple(int(v) for v in rng.integers(-max_shift, max_shift + 1, 2))
        img, _, shifted = synth_scene(seed * 1000 + i, size, size, 4, shift, noise)
        gm = gaussian_gradient_magnitude(to_grayscale(normalize_bands(img)), 1.0)
        est = coregister(gm, shifted, max_shift)
        bad += (est.dy, est.dx) != shift
    return bad


def brute_force_confusion(pred, truth):
    tp = fp = fn = tn = 0
    for p, t in zip(np.asarray(pred).ravel().tolist(), np.asarray(truth).ravel().tolist()):
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def oracle_metrics(count: int = 50, seed: int = 0) -> int:
    from .trainer import confusion

    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(count):
        shape = tuple(int(v) for v in rng.integers(1, 20, 2))
        p = rng.random(shape) < rng.random()
        t = rng.random(shape) < rng.random()
        r = confusion(p, t)
        bad += (r.tp, r.fp, r.fn, r.tn) != brute_force_confusion(p, t) or r.f1 < r.iou
    return bad


ORACLES = {
    "tsdm": (lambda seed: oracle_tsdm(100, 16, seed), 0.0, "mismatching masks of 100"),
    "cheb": (lambda seed: oracle_cheb(10, seed), 1e-8, "max abs diff over 10 graphs"),
    "coreg": (lambda seed: oracle_coreg(20, seed), 0.0, "missed shifts of 20"),
    "metrics": (lambda seed: oracle_metrics(50, seed), 0.0, "mismatching fixtures of 50"),
}


def run_oracles(which: str = "all", seed: int = 0) -> list:
    if which != "all" and which not in ORACLES:
        raise KeyError(f"unknown oracle {which!r}; choose from {sorted(ORACLES)} or 'all'")
    names = list(ORACLES) if which == "all" else [which]
    return [_timed(f"oracle.{n}", ORACLES[n][1], (lambda n=n: ORACLES[n][0](seed)), ORACLES[n][2]) for n in names]
