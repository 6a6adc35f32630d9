"""Acceptance criteria, one test each. Every test reports a PASS/FAIL line."""

import importlib.util
import time
from pathlib import Path

import numpy as np
import pytest

from ridgeflow.bench import (Shape, SyntheticSpec, bandwidth_rule, convergence_experiment, fd_oracle,
                             generate, hausdorff, scms_gap_experiment)
from ridgeflow.density import build_example1, build_kde, kde_derivative_check
from ridgeflow.flows import Alg1Rule, Alg2Rule, FlowParams
from ridgeflow.pipeline import ExtractionConfig, Stage, auto_eta_threshold, extract
from ridgeflow.ridgeness import build_grid_field, eta_batch, eta_tau_batch, ridgeness_batch
from ridgeflow.spectral import eig_desc, eig_desc_batch, projector_derivative, trailing

A_STEP = 0.005


def conditioned(model, rng, count, min_gap=1e-2):
    out = []
    while len(out) < count:
        Y = model.points[rng.integers(0, len(model.points), 64)] + 0.2 * rng.standard_normal((64, 2))
        lam, _ = eig_desc_batch(model.derivatives(Y, 2)[2])
        out.extend(Y[lam[:, 0] - lam[:, 1] > min_gap])
    return np.array(out[:count])


def circle_kde(seed, n, h):
    rng = np.random.default_rng(seed)
    cloud, _ = generate(SyntheticSpec(Shape.CIRCLE, n, 0.05, seed))
    return build_kde(cloud, h), rng


@pytest.fixture(scope="module")
def circle_runs():
    """Alg1 and Alg2 (tau = 0.1) on the 200-point circle, traces recorded."""
    cloud, _ = generate(SyntheticSpec(Shape.CIRCLE, 200, 0.05, 0))
    flow = FlowParams(a=A_STEP, record_trace=True)
    alg1 = extract(cloud, ExtractionConfig(algorithm="alg1", flow=flow))
    alg2 = extract(cloud, ExtractionConfig(algorithm="alg2", tau=0.1, flow=flow))
    model = build_kde(cloud)
    grid = build_grid_field(model, 1, model.domain, alg2.tau_used, alg2.rho_used)
    return model, grid, alg1, alg2


def traces(result):
    return [o.trace for o in result.per_start if o.trace is not None]


def test_c01_kde_derivatives(report):
    t0 = time.perf_counter()
    model, rng = circle_kde(101, 100, 0.3)
    X = conditioned(model, rng, 100)
    worst = {r: max(kde_derivative_check(model, x, r) for x in X) for r in range(1, 5)}
    elapsed = time.perf_counter() - t0
    ok = worst[1] < 1e-5 and worst[2] < 1e-5 and worst[3] < 1e-4 and worst[4] < 1e-4 and elapsed < 30
    detail = " ".join(f"order{r}={worst[r]:.1e}" for r in worst) + f" time={elapsed:.1f}s"
    assert report(1, ok, detail)


def test_c02_gradient_and_projector(report):
    t0 = time.perf_counter()
    model, rng = circle_kde(102, 100, 0.3)
    X = conditioned(model, rng, 50)
    grads = ridgeness_batch(model, X, 1, need_hessian=False).grad_eta
    grad_err = proj_err = 0.0
    for x, g in zip(X, grads):
        fd = fd_oracle(lambda y: eta_batch(model, y[None], 1)[0][0], x, 1e-6)
        grad_err = max(grad_err, np.linalg.norm(g - fd) / np.linalg.norm(fd))
        b = model.evaluate(x, 3)
        analytic = projector_derivative(b, eig_desc(b.hessian), 1)
        fd = fd_oracle(lambda y: trailing(eig_desc(model.evaluate(y, 2).hessian), 1).projector.ravel(order="F"),
                       x, 1e-6)
        proj_err = max(proj_err, np.abs(analytic - fd).max() / np.abs(fd).max())
    elapsed = time.perf_counter() - t0
    ok = grad_err < 1e-5 and proj_err < 1e-5 and elapsed < 30
    assert report(2, ok, f"grad_eta={grad_err:.1e} projector={proj_err:.1e} time={elapsed:.1f}s")


def test_c03_monotone_ascent(report, circle_runs):
    model, grid, alg1, alg2 = circle_runs
    worst1 = worst2 = 0.0
    for t in traces(alg1):
        eta = eta_batch(model, np.array(t.iterates), 1)[0]
        worst1 = max(worst1, float(np.max(eta[:-1] - eta[1:], initial=0.0)))
    for t in traces(alg2):
        eta = eta_tau_batch(grid, np.array(t.iterates), 0)[0]
        worst2 = max(worst2, float(np.max(eta[:-1] - eta[1:], initial=0.0)))
    ok = worst1 <= 1e-12 and worst2 <= 1e-12
    assert report(3, ok, f"max decrease alg1={worst1:.1e} alg2={worst2:.1e}")


def test_c04_ridge_point_certification(report, circle_runs):
    model, grid, alg1, alg2 = circle_runs
    bound = 10 * 1e-7 / A_STEP
    worst, worst_lam = 0.0, -np.inf
    for result, rule in ((alg1, Alg1Rule(model, 1)), (alg2, Alg2Rule(grid, 1, model))):
        retained = [o.trace for o in result.per_start if o.stage is Stage.RETAINED]
        finals = np.array([t.final for t in retained])
        xi_star, codes = rule.step_batch(finals)
        lam = eta_batch(model, finals, 1)[1]
        assert np.all(codes == 0)
        worst = max(worst, float(np.linalg.norm(xi_star, axis=1).max()))
        worst_lam = max(worst_lam, float(lam.max()))
    ok = worst <= bound and worst_lam < 0
    assert report(4, ok, f"max |xi*|={worst:.1e} (bound {bound:.0e}) max lambda_2={worst_lam:.3f}")


def test_c05_scms_gap(report):
    t0 = time.perf_counter()
    r = scms_gap_experiment()
    elapsed = time.perf_counter() - t0
    ok = (r.coverage_alg1 < 0.05 and r.coverage_scms > 0.1 and r.intersection_scms < 0.05
          and r.intersection_alg1 < 0.05 and elapsed < 120)
    assert report(5, ok, f"coverage alg1={r.coverage_alg1:.3f} scms={r.coverage_scms:.3f} "
                         f"intersection alg1={r.intersection_alg1:.3f} scms={r.intersection_scms:.3f} "
                         f"time={elapsed:.0f}s")


def test_c06_smoothing_bias(report):
    t0 = time.perf_counter()
    m = build_example1()
    rng = np.random.default_rng(6)
    X = np.column_stack([rng.uniform(-0.5, 0.5, 10), rng.uniform(0.5, 1.5, 10)])
    eta = eta_batch(m, X, 1)[0]
    err = {}
    for tau in (0.2, 0.1):
        grid = build_grid_field(m, 1, m.domain, tau, tau / 3)
        err[tau] = float(np.abs(eta_tau_batch(grid, X, 0)[0] - eta).max())
    factor = err[0.2] / err[0.1]
    elapsed = time.perf_counter() - t0
    ok = factor >= 3 and elapsed < 60
    assert report(6, ok, f"err(0.2)={err[0.2]:.2e} err(0.1)={err[0.1]:.2e} factor={factor:.2f}")


def test_c07_hausdorff_trend(report):
    t0 = time.perf_counter()
    rows = convergence_experiment(Shape.CIRCLE, [200, 800, 3200], bandwidth_rule(0.7), "scms", 5)
    elapsed = time.perf_counter() - t0
    med = [r.median_dh for r in rows]
    ok = all(b <= a for a, b in zip(med, med[1:])) and med[-1] < 0.6 * med[0] and elapsed < 600
    detail = " ".join(f"n={r.n}:{r.median_dh:.3f}" for r in rows)
    assert report(7, ok, f"{detail} ratio={med[-1] / med[0]:.2f} time={elapsed:.0f}s")


def test_c08_alg1_alg2_agreement(report, circle_runs):
    _, _, alg1, alg2 = circle_runs
    d = hausdorff(alg1.ridge_points, alg2.ridge_points)
    assert report(8, d < 0.1, f"d_H(alg1, alg2)={d:.3f}")


def test_c09_xcross_threshold(report):
    cloud, _ = generate(SyntheticSpec(Shape.XCROSS, 200, 0.05, 0))
    result = extract(cloud, ExtractionConfig(algorithm="alg2", alpha=0.05, flow=FlowParams(a=A_STEP)))
    etas = np.sort([o.trace.final_eta for o in result.per_start
                    if o.stage in (Stage.RETAINED, Stage.PRUNED_ETA)])
    gaps = np.diff(etas)
    i = int(np.argmax(gaps))
    lo, hi = etas[i], etas[i + 1]
    ratio = gaps[i] / np.median(gaps)
    auto = auto_eta_threshold(etas)
    ok = ratio >= 10 and lo < auto < hi and lo < -0.1 < hi and result.eps_eta_used == auto
    assert report(9, ok, f"largest gap ({lo:.3f}, {hi:.3f}) = {ratio:.0f}x median, auto={auto:.3f}")


def _load_oracles():
    path = Path(__file__).parent / "fixtures" / "build_oracles.py"
    spec = importlib.util.spec_from_file_location("build_oracles", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def test_c10_oracle_equivalence(report, derived):
    oracles = _load_oracles()
    rng = np.random.default_rng(10)
    mismatches = 0
    for _ in range(100):
        A = rng.standard_normal((rng.integers(1, 15), 2))
        B = rng.standard_normal((rng.integers(1, 15), 2))
        if hausdorff(A, B) != oracles.brute_hausdorff(A.tolist(), B.tolist()):
            mismatches += 1
    for pair in derived["hausdorff_pairs"]:
        if hausdorff(np.array(pair["A"]), np.array(pair["B"])) != pair["d"]:
            mismatches += 1
    frozen_ok = oracles.build() == derived
    ok = mismatches == 0 and frozen_ok
    assert report(10, ok, f"hausdorff mismatches={mismatches}/105 fixtures reproducible={frozen_ok}")
