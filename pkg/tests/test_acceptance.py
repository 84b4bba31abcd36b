"""Acceptance suite: one test per release criterion, with its stated
tolerance and runtime budget. Each test prints a [PASS] line; run with
``pytest tests/test_acceptance.py -v -s`` to see them live.
"""

import math
import time

import numpy as np
import pytest

from attnforge.blocks import DataKernelPair, StructuredLayout, make_interaction_head
from attnforge.cube import (
    build_grid,
    choose_N,
    interpolant_error_bound,
    pou_oracle_batch,
    sup_error_scan,
    synthesize_cube_approximator,
)
from attnforge.intrinsic_dim import PointCloud, estimate_id, sample_synthetic_manifold
from attnforge.manifold import (
    chart_projection,
    make_atlas,
    prepare_manifold_plan,
    synthesize_chart_projection,
    synthesize_manifold_approximator,
)
from attnforge.runtime import (
    attention_forward,
    block_forward,
    net_evaluator,
    net_forward_batch,
)
from attnforge.scaling import (
    ArchParams,
    convert_exponents,
    covering_slope_in_log_delta,
    fit_power_law,
    log_covering_number,
    predict_exponents,
)
from attnforge.targets import make_target

EPS = np.finfo(float).eps
CUBE_GRID = [(d, N) for d in (1, 2, 4) for N in (3, 5, 9)]
TARGET_NAMES = ["linear", "product_of_sines", "gaussian_bump", "radial"]
SCAN_RESOLUTION = {1: 3000, 2: 45, 4: 7}

_cube_cache: dict = {}


def _cube_results():
    """Build each (d, N, target) net once; record both the oracle gap on
    2000 random points (criterion 2) and the target sup-error scan
    (criterion 3), with the two phases timed separately."""
    if _cube_cache:
        return _cube_cache
    rng = np.random.default_rng(2024)
    t_equiv = 0.0
    t_scan = 0.0
    rows = {}
    for d, N in CUBE_GRID:
        for name in TARGET_NAMES:
            target = make_target(name, d)
            t0 = time.time()
            grid = build_grid(target, d, N)
            net = synthesize_cube_approximator(
                grid, target.holder_const, target.holder_exponent, target.sup_bound
            )
            pts = rng.uniform(0.0, 1.0, (2000, d))
            gap = float(np.max(np.abs(net_forward_batch(net, pts) - pou_oracle_batch(grid, pts))))
            t_equiv += time.time() - t0
            t0 = time.time()
            scan = sup_error_scan(
                net_evaluator(net), target, d, SCAN_RESOLUTION[d], seed=0
            )
            t_scan += time.time() - t0
            rows[(d, N, name)] = {
                "gap": gap,
                "tol": max(1e-9, 10.0 * net.cancellation_scale * EPS),
                "scan": scan.sup_error,
                "bound": interpolant_error_bound(d, N, target.holder_const, target.holder_exponent),
                "blocks": len(net.blocks),
            }
    _cube_cache["rows"] = rows
    _cube_cache["t_equiv"] = t_equiv
    _cube_cache["t_scan"] = t_scan
    return _cube_cache


def test_criterion_01_interaction_exactness():
    rng = np.random.default_rng(11)
    t0 = time.time()
    for _ in range(1000):
        l = int(rng.integers(2, 65))
        m_bound = float(rng.uniform(0.2, 2.0))
        layout = StructuredLayout(l, m_bound)
        kernels = DataKernelPair(
            QB=rng.uniform(-1.0, 1.0, (2, 5)), KB=rng.uniform(-1.0, 1.0, (2, 5))
        )
        t1, t2 = int(rng.integers(1, l + 1)), int(rng.integers(1, l + 1))
        row = int(rng.integers(1, 6))
        head, C = make_interaction_head(t1, t2, row, kernels, layout)
        H = layout.positional().copy()
        H[0:2, :] = rng.uniform(-m_bound, m_bound, (2, l))
        out = attention_forward(head, H)
        expected = max(
            float(kernels.QB @ H[:, t1 - 1] @ (kernels.KB @ H[:, t2 - 1])), 0.0
        )
        assert abs(out[row - 1, t1 - 1] - expected) <= 10.0 * C * EPS
        mask = np.ones((5, l), dtype=bool)
        mask[row - 1, t1 - 1] = False
        assert np.all(out[mask] == 0.0)
    elapsed = time.time() - t0
    assert elapsed < 10.0
    print(f"\n[PASS] criterion 1: 1000 interaction heads exact (off-target "
          f"identically zero, target within 10*C*eps) in {elapsed:.1f}s")


def test_criterion_02_cube_net_equals_oracle():
    res = _cube_results()
    worst = 0.0
    for key, row in res["rows"].items():
        assert row["gap"] <= row["tol"], f"{key}: gap {row['gap']} > tol {row['tol']}"
        assert row["gap"] <= 1e-6, f"{key}: gap {row['gap']} above 1e-6"
        worst = max(worst, row["gap"])
    assert res["t_equiv"] < 120.0
    print(f"\n[PASS] criterion 2: 36 cube nets match the grid-interpolant "
          f"oracle on 2000 points (worst gap {worst:.2e}) in {res['t_equiv']:.0f}s")


def test_criterion_03_interpolant_bound_and_reference_case():
    res = _cube_results()
    for key, row in res["rows"].items():
        assert row["scan"] <= row["bound"], f"{key}: scan {row['scan']} > bound {row['bound']}"
    target = make_target("linear", 1, w=[1.0], b=0.0)
    grid = build_grid(target, 1, 11)
    net = synthesize_cube_approximator(grid, 1.0, 1.0, target.sup_bound)
    scan = sup_error_scan(net_evaluator(net), target, 1, 10_000, seed=0)
    assert abs(scan.sup_error - 0.033333) <= 1e-4
    print(f"\n[PASS] criterion 3: all 36 scans within 2^d d H_f/(N-1); "
          f"reference case measured {scan.sup_error:.6f} (want 0.033333 +/- 1e-4); "
          f"scan phase took {res['t_scan']:.0f}s")


def test_criterion_04_width_error_scaling():
    t0 = time.time()
    target = make_target("product_of_sines", 2)
    pts = []
    for N in (5, 9, 17, 33):
        grid = build_grid(target, 2, N)
        net = synthesize_cube_approximator(
            grid, target.holder_const, 1.0, target.sup_bound
        )
        scan = sup_error_scan(net_evaluator(net), target, 2, 61, seed=0)
        pts.append((net.token_count, scan.sup_error))
    fit = fit_power_law(pts)
    slope = -fit.exponent
    elapsed = time.time() - t0
    assert abs(slope - (-0.5)) <= 0.15, f"slope {slope}"
    assert elapsed < 300.0
    print(f"\n[PASS] criterion 4: error-vs-width slope {slope:.3f} within "
          f"+/-0.15 of -0.5 in {elapsed:.0f}s")


def test_criterion_05_depth_independent_of_accuracy():
    d = 2
    target = make_target("linear", d)
    depths = []
    for eps in (0.4, 0.2, 0.1, 0.05):
        N = choose_N(eps, d, target.holder_const, 1.0)
        grid = build_grid(target, d, N)
        net = synthesize_cube_approximator(grid, target.holder_const, 1.0, target.sup_bound)
        depths.append(len(net.blocks))
    want = int(math.log2(2)) + 4
    assert depths == [want] * 4
    res = _cube_results()
    for (dd, N, name), row in res["rows"].items():
        d_pad = 1 if dd == 1 else (2 if dd == 2 else 4)
        assert row["blocks"] == int(math.log2(d_pad)) + 4
    print(f"\n[PASS] criterion 5: block count log2(d_pad)+4 = {want} across the "
          f"accuracy sweep (and all 36 grid nets)")


def test_criterion_06_manifold_end_to_end():
    t0 = time.time()
    target = make_target("linear", 2, w=[1.0, 0.0], b=0.0)
    atlas = make_atlas("circle", 16, {"r": 0.25})
    plan = prepare_manifold_plan(atlas, target, 0.1)
    net = synthesize_manifold_approximator(atlas, target, 0.1, plan=plan)
    X = atlas.geometry.sample(10_000, seed=3)
    sup_err = float(np.max(np.abs(net_forward_batch(net, X) - target.evaluate(X))))
    assert sup_err <= 0.1

    # exact projection property: the chart block equals the closed form
    rng = np.random.default_rng(6)
    worst_proj = 0.0
    layout = StructuredLayout(3, 1.0)
    for ch in atlas.charts[:4]:
        blk = synthesize_chart_projection(ch, layout)
        C = max(h.tag.cancellation for h in blk.heads)
        for _ in range(25):
            theta = rng.uniform(0.0, 2.0 * np.pi)
            x = np.array([np.cos(theta), np.sin(theta)])
            H = layout.positional().copy()
            H[0, :2] = x
            out = block_forward(blk, H)
            want = chart_projection(ch, x[None, :])[0]
            gap = float(np.max(np.abs(out[0, 2:3] - want)))
            assert gap <= 10.0 * C * EPS
            worst_proj = max(worst_proj, gap)
    elapsed = time.time() - t0
    assert elapsed < 120.0
    print(f"\n[PASS] criterion 6: circle sup error {sup_err:.4f} <= 0.1 over 1e4 "
          f"samples; projection blocks exact (worst {worst_proj:.2e}) in {elapsed:.0f}s")


def test_criterion_07_id_estimator_sanity():
    t0 = time.time()
    values = {}
    for d in (2, 5, 10):
        cloud = sample_synthetic_manifold("cube", 8192, 20, seed=11, d=d)
        est = estimate_id(cloud, K=20, batch_size=4096, seed=5)
        assert 0.85 * d <= est.value <= 1.15 * d, f"d={d}: {est.value}"
        values[d] = est.value
    swiss = estimate_id(
        sample_synthetic_manifold("swiss_roll", 8192, 3, seed=11), K=20, batch_size=4096, seed=5
    )
    assert 1.6 <= swiss.value <= 2.4

    cloud = sample_synthetic_manifold("cube", 4096, 20, seed=3, d=2)
    base = estimate_id(cloud, seed=11).value
    q, _ = np.linalg.qr(np.random.default_rng(99).standard_normal((20, 20)))
    iso_delta = abs(estimate_id(PointCloud(cloud.points @ q.T + 0.37), seed=11).value - base)
    scale_delta = abs(estimate_id(PointCloud(cloud.points * 3.7), seed=11).value - base)
    assert iso_delta < 1e-9 and scale_delta < 1e-9
    elapsed = time.time() - t0
    assert elapsed < 60.0
    print(f"\n[PASS] criterion 7: cube IDs {values[2]:.2f}/{values[5]:.2f}/"
          f"{values[10]:.2f} in [0.85d, 1.15d], swiss roll {swiss.value:.2f}, "
          f"invariance deltas {iso_delta:.1e}/{scale_delta:.1e} in {elapsed:.0f}s")


def test_criterion_08_published_table_reproduction():
    # one unit in the third printed decimal
    a = convert_exponents("alpha_N", 0.076)
    assert abs(a - 0.070) <= 1e-3
    chinchilla = convert_exponents("alpha_N", 0.34)
    assert abs(chinchilla - 0.25) <= 5e-3
    # the 0.095 -> alpha_N row: the formula gives 0.105 where the published
    # table prints 0.106 (its own arithmetic slip, like its 0.28 -> 0.33
    # row, which we document rather than match); asserted as expected-fail
    # in test_scaling.py::TestConvertExponents.
    b = convert_exponents("alpha_D", 0.095)
    assert abs(b - 0.095 / 0.905) <= 1e-15
    assert abs(b - 0.106) > 1e-3  # the documented discrepancy, stated
    print("\n[PASS] criterion 8: 0.076->%.4f (prints 0.070), 0.34->%.4f (prints "
          "0.25); 0.095->%.4f documented against the published 0.106" % (a, chinchilla, b))


def test_criterion_09_exponent_band_consistency():
    # d in [13.3, 18] maps onto alpha_D in [0.1000, 0.1307]; the whole image
    # must sit inside the observed band 0.1 < alpha < 0.15 (endpoints touch)
    ds = np.linspace(13.3, 18.0, 48)
    alphas = np.array([predict_exponents(float(d)).alpha_D for d in ds])
    assert np.all(alphas >= 0.1 - 1e-12)
    assert np.all(alphas <= 0.15)
    assert alphas[0] == pytest.approx(2.0 / 15.3, abs=1e-12)
    assert alphas[-1] == pytest.approx(0.1, abs=1e-12)
    assert np.all(np.diff(alphas) < 0)
    print(f"\n[PASS] criterion 9: alpha_D over d in [13.3, 18] spans "
          f"[{alphas[-1]:.4f}, {alphas[0]:.4f}], inside the observed band (0.1, 0.15)")


def test_criterion_10_fitter_accuracy():
    n = np.logspace(1, 6, 11)
    fit = fit_power_law([(x, 1.3 * x**-0.42) for x in n])
    assert abs(fit.exponent - 0.42) < 1e-10
    assert abs(fit.coefficient - 1.3) < 1.3 * 1e-10

    rng = np.random.default_rng(20240601)
    ns = np.unique(np.logspace(3, 6, 30).astype(int)).astype(float)
    loss = 3.0 * ns**-0.113 * (1.0 + rng.uniform(-0.01, 0.01, ns.size))
    noisy = fit_power_law(list(zip(ns, loss)))
    assert abs(noisy.exponent - 0.113) <= 5e-3
    print(f"\n[PASS] criterion 10: noiseless exponent to 1e-10; 1%-noise "
          f"fixture recovered {noisy.exponent:.4f} (want 0.113 +/- 0.005)")


def test_criterion_11_covering_calculator():
    ones = ArchParams(L_T=1, L_ff=1, w_ff=1, l=1, d_embd=1, m=1,
                      kappa=1.0, M=1.0, R=1.0, D=1, delta=1.0)
    base = log_covering_number(ones)
    assert base == pytest.approx(16.0 * math.log(2.0), abs=1e-12)
    assert base == pytest.approx(11.0904, abs=5e-4)

    params = ArchParams(L_T=2, L_ff=3, w_ff=4, l=40, d_embd=5, m=9,
                        kappa=50.0, M=2.0, R=1.0, D=3, delta=1.0)
    P = covering_slope_in_log_delta(params)
    b0 = log_covering_number(params)
    for delta in (0.7, 0.2, 0.01):
        shifted = ArchParams(**{**params.__dict__, "delta": delta})
        got = log_covering_number(shifted) - b0
        assert got == pytest.approx(-P * math.log(delta), rel=1e-9)
    print(f"\n[PASS] criterion 11: all-ones bound = 16 ln 2 = {base:.4f}; "
          f"log-linear in -ln(delta) with slope P = {P:.0f} to 1e-9")
