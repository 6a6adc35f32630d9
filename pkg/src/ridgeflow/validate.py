"""Self-checks grouped by invariant, used by ``ridgeflow validate``.

Each group returns a :class:`CheckResult`; a group passes when every check in
it is within tolerance. ``fault="grad_eta_sign"`` flips the sign of the
analytic ridgeness gradient before it is compared, as a negative control.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .bench import fd_oracle, hausdorff
from .density import GaussianKDE, PointCloud, kde_derivative_check
from .flows import Alg1Rule, FlowParams, WorkingRegion, run_flows
from .ridgeness import eta_batch, ridgeness_batch
from .spectral import (eig_desc, eig_desc_batch, projector_derivative,
                       trailing, trailing_projector_batch)

FAULTS = ("grad_eta_sign",)


@dataclass
class CheckResult:
    group: str
    passed: bool
    worst: float
    tolerance: float
    details: Dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"group": self.group, "passed": bool(self.passed), "worst": float(self.worst),
                "tolerance": float(self.tolerance), "details": self.details}


def _fixture(seed=0, n=80, h=0.3):
    rng = np.random.default_rng(seed)
    th = rng.uniform(0.0, 2.0 * np.pi, n)
    pts = np.column_stack([np.cos(th), np.sin(th)]) + 0.1 * rng.standard_normal((n, 2))
    return GaussianKDE(PointCloud(pts), h), rng


def _conditioned_points(model, rng, count, k=1, min_gap=1e-2):
    """Random points near the data where the eigengap is comfortably open."""
    out = []
    while len(out) < count:
        Y = model.points[rng.integers(0, len(model.points), 64)] + 0.2 * rng.standard_normal((64, 2))
        H = model.derivatives(Y, 2)[2]
        lam, _ = eig_desc_batch(H)
        good = (lam[:, k - 1] - lam[:, k]) > min_gap
        out.extend(Y[good])
    return np.array(out[:count])


def check_derivatives() -> CheckResult:
    model, rng = _fixture()
    X = _conditioned_points(model, rng, 10)
    worst = {r: max(kde_derivative_check(model, x, r) for x in X) for r in range(1, 5)}
    tol = {1: 1e-5, 2: 1e-5, 3: 1e-4, 4: 1e-4}
    passed = all(worst[r] < tol[r] for r in worst)
    return CheckResult("derivatives", passed, max(worst[r] / tol[r] for r in worst), 1.0,
                       {f"order_{r}": worst[r] for r in worst})


def check_gradient(fault: Optional[str] = None) -> CheckResult:
    model, rng = _fixture(1)
    X = _conditioned_points(model, rng, 10)
    batch = ridgeness_batch(model, X, 1, need_hessian=False)
    grads = -batch.grad_eta if fault == "grad_eta_sign" else batch.grad_eta
    errs = []
    for x, g in zip(X, grads):
        fd = fd_oracle(lambda y: eta_batch(model, y[None], 1)[0][0], x, 1e-6)
        errs.append(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    worst = float(max(errs))
    return CheckResult("gradient", worst < 1e-5, worst, 1e-5)


def check_projector() -> CheckResult:
    model, rng = _fixture(2)
    X = _conditioned_points(model, rng, 10)
    errs = []
    for x in X:
        bundle = model.evaluate(x, 3)
        analytic = projector_derivative(bundle, eig_desc(bundle.hessian), 1)

        def proj(y):
            return trailing(eig_desc(model.evaluate(y, 2).hessian), 1).projector.ravel(order="F")

        fd = fd_oracle(proj, x, 1e-6)
        errs.append(np.abs(analytic - fd).max() / max(np.abs(fd).max(), 1e-12))
    worst = float(max(errs))
    return CheckResult("projector", worst < 1e-5, worst, 1e-5)


def check_spectral() -> CheckResult:
    rng = np.random.default_rng(3)
    A = rng.standard_normal((50, 4, 4))
    H = A + np.swapaxes(A, 1, 2)
    lam, V = eig_desc_batch(H)
    recon = np.abs(V @ (lam[:, :, None] * np.swapaxes(V, 1, 2)) - H).max()
    order = float(np.clip(np.diff(lam, axis=1), 0.0, None).max())
    P = trailing_projector_batch(V, 2)
    idem = np.abs(P @ P - P).max()
    sym = np.abs(P - np.swapaxes(P, 1, 2)).max()
    rank = np.abs(np.trace(P, axis1=1, axis2=2) - 2.0).max()
    worst = float(max(recon, order, idem, sym, rank))
    return CheckResult("spectral", worst < 1e-10, worst, 1e-10,
                       {"reconstruction": float(recon), "idempotence": float(idem),
                        "symmetry": float(sym), "rank": float(rank), "ordering": order})


def _brute_hausdorff(A, B):
    def directed(P, Q):
        return max(min(float(np.sqrt(((p - q) ** 2).sum())) for q in Q) for p in P)
    return max(directed(A, B), directed(B, A))


def check_hausdorff() -> CheckResult:
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        A, B, C = (rng.standard_normal((rng.integers(1, 12), 2)) for _ in range(3))
        dab = hausdorff(A, B)
        worst = max(worst, abs(dab - _brute_hausdorff(A, B)), abs(dab - hausdorff(B, A)),
                    hausdorff(A, A), max(0.0, dab - hausdorff(A, C) - hausdorff(C, B)))
    return CheckResult("hausdorff", worst < 1e-12, worst, 1e-12)


def check_ascent() -> CheckResult:
    model, rng = _fixture(5, n=60, h=0.35)
    starts = model.points[:8]
    rule = Alg1Rule(model, 1)
    traces = run_flows(rule, starts, FlowParams(a=0.005, max_iters=150, record_trace=True),
                       WorkingRegion(model.domain))
    worst = 0.0
    for t in traces:
        eta = rule.objective(t.iterates)
        worst = max(worst, float(np.max(eta[:-1] - eta[1:], initial=0.0)))
    return CheckResult("ascent", worst <= 1e-12, worst, 1e-12)


GROUPS: Dict[str, Callable[..., CheckResult]] = {
    "derivatives": check_derivatives,
    "gradient": check_gradient,
    "projector": check_projector,
    "spectral": check_spectral,
    "hausdorff": check_hausdorff,
    "ascent": check_ascent,
}


def run_all(fault: Optional[str] = None) -> List[CheckResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}")
    out = []
    for name, fn in GROUPS.items():
        out.append(fn(fault) if name == "gradient" else fn())
    return out
