"""Acceptance checks; each prints one PASS/FAIL line."""

import time

import numpy as np
import pytest

from parahom.cell import solve_correctors
from parahom.cli import load_config
from parahom.effective import (
    adjoint_check,
    build_flux_correctors,
    build_flux_mismatch,
    constraint_residual,
    effective_tensor,
    flux_identity_residual,
)
from parahom.fields import sample_cell
from parahom.smoothing import verify_scaling
from parahom.solvers import mms_orders
from parahom.study import run_study


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nacceptance {n}: {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def study_1d():
    cfg = load_config("default-1d")
    return cfg, run_study(cfg, write=False)


def test_criterion_1_closed_form_tensors(capsys, micro_space_1d, micro_time_1d):
    start = time.perf_counter()
    cell = sample_cell(micro_space_1d, [0.5], 0.0, 256, 8)
    a_space = effective_tensor(cell, [s.fn for s in solve_correctors(cell)])[0, 0]
    cell = sample_cell(micro_time_1d, [0.5], 0.0, 256, 8)
    a_time = effective_tensor(cell, [s.fn for s in solve_correctors(cell)])[0, 0]
    wall = time.perf_counter() - start
    ok = abs(a_space - np.sqrt(3)) <= 1e-4 and abs(a_time - 2.0) <= 1e-8 and wall < 5
    report(capsys, 1, ok, f"harmonic {a_space:.8f}, micro-time {a_time:.10f}, {wall:.2f} s")


def test_criterion_2_flux_corrector_identities(capsys, preset_1d):
    start = time.perf_counter()
    ident, cons, skew = [], [], 0.0
    for ny, ntau in ((64, 65), (128, 129)):
        i_res, c_res = [], []
        for x, t in ((0.3, 0.2), (0.7, 0.55)):
            cell = sample_cell(preset_1d, np.array([x]), t, ny, ntau)
            B = build_flux_mismatch(cell, [s.fn for s in solve_correctors(cell)])
            fc = build_flux_correctors(B)
            skew = max(skew, float(np.abs(fc.frak + np.swapaxes(fc.frak, 0, 1)).max()))
            i_res.append(np.linalg.norm(flux_identity_residual(fc, B)))
            c_res.append(np.linalg.norm(constraint_residual(fc)))
        ident.append(np.linalg.norm(i_res))
        cons.append(np.linalg.norm(c_res))
    wall = time.perf_counter() - start
    oi, oc = np.log2(ident[0] / ident[1]), np.log2(cons[0] / cons[1])
    ok = skew == 0.0 and oi >= 1.9 and oc >= 1.9 and wall < 30
    report(capsys, 2, ok, f"skew {skew}, identity order {oi:.3f}, constraint order {oc:.3f}, {wall:.2f} s")


def test_criterion_3_adjoint_tensor(capsys, diag_2d):
    pts = [(np.array([0.2, 0.4]), 0.0), (np.array([0.5, 0.5]), 0.0), (np.array([0.9, 0.1]), 0.0)]
    dev = adjoint_check(diag_2d, 32, 1, points=pts)["deviation"]
    report(capsys, 3, dev <= 1e-7, f"max deviation {dev:.3e}")


def test_criterion_4_smoothing_scaling(capsys):
    start = time.perf_counter()
    eps = [0.2, 0.1, 0.05, 0.025]
    spike = verify_scaling("spike", eps, p=1, p1=np.inf)["slope"]
    grad = verify_scaling("gradient", [0.1, 0.05, 0.025])["slope"]
    wall = time.perf_counter() - start
    ok = abs(spike + 1) <= 0.1 and abs(grad - 1) <= 0.1 and wall < 60
    report(capsys, 4, ok, f"spike slope {spike:.4f}, gradient slope {grad:.4f}, {wall:.2f} s")


def test_criterion_5_one_dimensional_rates(capsys, study_1d):
    _, rep = study_1d
    err, w = rep.slopes["err_L2L2"], rep.slopes["w_L2H1"]
    errs = [r["err_L2L2"] for r in rep.rows]
    ok = (
        len(rep.rows) == 4
        and all(a > b for a, b in zip(errs, errs[1:]))
        and err["slope"] >= 0.85 and err["r2"] >= 0.98
        and 0.4 <= w["slope"] <= 0.7 and w["slope"] < err["slope"]
    )
    detail = (f"err slope {err['slope']:.3f} (R2 {err['r2']:.4f}), w slope {w['slope']:.3f} "
              f"(plateau-only {rep.slopes['w_L2H1_plateau']['slope']:.3f}), floor {rep.meta['floor_check']['passed']}")
    report(capsys, 5, ok, detail)


@pytest.mark.slow
def test_criterion_6_two_dimensional_rate(capsys):
    cfg = load_config("separable-2d")
    rep = run_study(cfg, write=False)
    fit = rep.slopes["err_L2Lp0"]
    floor = rep.meta["floor_check"]
    ok = "slope" in fit and fit["slope"] >= 0.8 and floor["passed"]
    report(capsys, 6, ok, f"L2L4 slope {fit.get('slope', float('nan')):.3f}, floor ratio {floor.get('ratio', float('nan')):.3f}")


def test_criterion_7_temporal_layer(capsys, study_1d):
    fit = study_1d[1].slopes["temporal_layer"]
    report(capsys, 7, fit["slope"] >= 0.4, f"temporal layer slope {fit['slope']:.3f}")


def test_criterion_8_manufactured_orders(capsys):
    start = time.perf_counter()
    orders = mms_orders(d=1)
    wall = time.perf_counter() - start
    worst = min(min(orders[k]["orders"]) for k in ("fine", "homogenized", "dual"))
    report(capsys, 8, worst >= 1.9 and wall < 60, f"worst order {worst:.3f}, {wall:.2f} s")


def test_criterion_9_reproducible_csv(capsys, study_1d):
    cfg, first = study_1d
    second = run_study(cfg, write=False)
    same = first.csv_text(with_wall=False) == second.csv_text(with_wall=False)
    report(capsys, 9, same, "identical CSV apart from wall_seconds" if same else "CSV differs between runs")
