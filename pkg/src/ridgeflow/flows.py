"""Step rules and the Euler iteration driver.

A step rule maps a batch of points ``Y`` to displacements plus a per-row
status code. The driver advances all active starts of a chunk in lockstep,
which keeps the per-start recursion identical to a one-at-a-time loop while
letting numpy vectorise the kernel sums.
"""

from __future__ import annotations

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .density import Box, DensityModel, GaussianKDE, write_csv
from .errors import DomainExit, EigenGapTooSmall
from .ridgeness import GridField, eta_batch, eta_tau_batch, ridgeness_batch
from .spectral import DEFAULT_GAP_TOL, eig_desc_batch, gap_ok, trailing_projector_batch

OK, GAP_FAIL, DOMAIN_FAIL = 0, 1, 2
START_CHUNK = 64


class Status(str, enum.Enum):
    CONVERGED = "converged"
    DISCARDED_DOMAIN = "discarded_domain_exit"
    DISCARDED_GAP = "discarded_eigengap"
    MAX_ITERS = "max_iters_exceeded"

    @property
    def discarded(self) -> bool:
        return self in (Status.DISCARDED_DOMAIN, Status.DISCARDED_GAP)


@dataclass
class FlowParams:
    a: float = 0.005
    eps_tol: float = 1e-7
    max_iters: int = 10_000
    record_trace: bool = False

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("step size a must be positive")
        if not self.eps_tol > 0:
            raise ValueError("eps_tol must be positive")
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be at least 1")
        self.max_iters = int(self.max_iters)


@dataclass
class FlowTrace:
    start: np.ndarray
    final: np.ndarray
    status: Status
    iterations: int
    iterates: Optional[List[np.ndarray]] = None
    step_norms: Optional[List[float]] = None
    final_eta: float = float("nan")
    final_lambda_k1: float = float("nan")

    def to_csv(self, path, objective=None) -> None:
        """Dump ``iter, y_1..y_d, eta, step_norm``; requires a recorded trace.

        ``objective`` maps a batch of points to the driving function value.
        """
        if self.iterates is None:
            raise ValueError("trace was not recorded")
        Y = np.asarray(self.iterates)
        eta = objective(Y) if objective is not None else np.full(len(Y), np.nan)
        steps = list(self.step_norms) + [float("nan")] * (len(Y) - len(self.step_norms))
        d = Y.shape[1]
        rows = [[j, *Y[j], eta[j], steps[j]] for j in range(len(Y))]
        write_csv(path, ["iter"] + [f"y_{i + 1}" for i in range(d)] + ["eta", "step_norm"], rows)


class StepRule:
    """Displacement field driving a flow.

    Subclasses override ``step_batch``; ``step`` is the single-point view and
    raises on failure.
    """

    required_model_order = 1

    def step_batch(self, Y):
        """Return ``(D, codes)``; rows with nonzero code have undefined ``D``."""
        Y = np.atleast_2d(Y)
        D = np.zeros_like(Y, dtype=float)
        codes = np.zeros(len(Y), dtype=int)
        for i, y in enumerate(Y):
            try:
                D[i] = self.step(y)
            except EigenGapTooSmall:
                codes[i] = GAP_FAIL
            except DomainExit:
                codes[i] = DOMAIN_FAIL
        return D, codes

    def step(self, y):
        D, codes = self.step_batch(np.asarray(y, dtype=float)[None])
        if codes[0] == GAP_FAIL:
            raise EigenGapTooSmall(float("nan"), getattr(self, "gap_tol", DEFAULT_GAP_TOL))
        if codes[0] == DOMAIN_FAIL:
            raise DomainExit(f"{y} outside the valid region of the step rule")
        return D[0]

    def objective(self, Y) -> np.ndarray:
        """Function the flow ascends, used for diagnostics."""
        return np.full(len(np.atleast_2d(Y)), np.nan)

    def diagnostics(self, Y):
        """``(eta, lambda_k1)`` reported for final points."""
        n = len(np.atleast_2d(Y))
        return np.full(n, np.nan), np.full(n, np.nan)


class ConstantRule(StepRule):
    def __init__(self, v):
        self.v = np.asarray(v, dtype=float)

    def step_batch(self, Y):
        Y = np.atleast_2d(Y)
        return np.broadcast_to(self.v, Y.shape).copy(), np.zeros(len(Y), dtype=int)


def mean_shift_batch(model: GaussianKDE, Y) -> np.ndarray:
    """``sum_i X_i w_i / sum_i w_i - y`` with Gaussian weights."""
    w, _ = model.kernel_weights(Y)
    return (w @ model.points) / w.sum(axis=1, keepdims=True) - np.atleast_2d(Y)


def mean_shift(model: GaussianKDE, y) -> np.ndarray:
    y = np.asarray(y, dtype=float).ravel()
    w, _ = model.kernel_weights(y[None])
    if not w.sum() > 0:
        raise ZeroDivisionError("total kernel weight vanished")
    return mean_shift_batch(model, y[None])[0]


def _ridge_diagnostics(model, Y, k, gap_tol):
    Y = np.atleast_2d(Y)
    eta, lam_k1, _ = eta_batch(model, Y, k, gap_tol)
    return eta, lam_k1


class MeanShiftRule(StepRule):
    required_model_order = 0

    def __init__(self, model: GaussianKDE):
        self.model = model

    def step_batch(self, Y):
        return mean_shift_batch(self.model, Y), np.zeros(len(np.atleast_2d(Y)), dtype=int)

    def objective(self, Y):
        return self.model.density(Y)


class SCMSRule(StepRule):
    """Mean shift projected on the trailing Hessian eigenspace.

    For a :class:`GaussianKDE` the mean shift is exact. Other models use the
    surrogate ``surrogate_scale * grad f / f`` (for a Gaussian KDE with
    ``surrogate_scale = h^2`` the two coincide); this exists for comparison
    runs on analytic densities.
    """

    required_model_order = 2

    def __init__(self, model: DensityModel, k: int, surrogate_scale: Optional[float] = None,
                 gap_tol: float = DEFAULT_GAP_TOL):
        self.model, self.k, self.gap_tol = model, k, gap_tol
        if surrogate_scale is None and not isinstance(model, GaussianKDE):
            raise ValueError("analytic models need an explicit surrogate_scale")
        self.surrogate_scale = surrogate_scale

    def shift(self, Y, f, g):
        if isinstance(self.model, GaussianKDE) and self.surrogate_scale is None:
            return mean_shift_batch(self.model, Y)
        return self.surrogate_scale * g / f[:, None]

    def step_batch(self, Y):
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        f, g, H = self.model.derivatives(Y, 2)
        lam, V = eig_desc_batch(H)
        codes = np.where(gap_ok(lam, self.k, self.gap_tol), OK, GAP_FAIL)
        with np.errstate(divide="ignore", invalid="ignore"):
            ms = self.shift(Y, f, g)
        codes[~np.all(np.isfinite(ms), axis=1) & (codes == OK)] = DOMAIN_FAIL
        P = trailing_projector_batch(V, self.k)
        D = np.einsum("mab,mb->ma", P, np.nan_to_num(ms))
        return D, codes

    def objective(self, Y):
        return eta_batch(self.model, Y, self.k, self.gap_tol)[0]

    def diagnostics(self, Y):
        return _ridge_diagnostics(self.model, Y, self.k, self.gap_tol)


def scms_step(model, y, k, surrogate_scale=None, gap_tol=DEFAULT_GAP_TOL):
    return SCMSRule(model, k, surrogate_scale, gap_tol).step(y)


class Alg1Rule(StepRule):
    """Ascent direction ``P* grad eta``, ``P*`` projecting on the trailing
    ``d - k`` eigenvectors of ``hess eta``."""

    required_model_order = 3

    def __init__(self, model: DensityModel, k: int, gap_tol: float = DEFAULT_GAP_TOL):
        self.model, self.k, self.gap_tol = model, k, gap_tol

    def step_batch(self, Y):
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        r = ridgeness_batch(self.model, Y, self.k, need_hessian=True, gap_tol=self.gap_tol)
        lam_s, V_s = eig_desc_batch(np.nan_to_num(r.hess_eta))
        good = r.ok & gap_ok(lam_s, self.k, self.gap_tol)
        P_s = trailing_projector_batch(V_s, self.k)
        D = np.einsum("mab,mb->ma", P_s, r.grad_eta)
        return D, np.where(good, OK, GAP_FAIL)

    def objective(self, Y):
        return eta_batch(self.model, Y, self.k, self.gap_tol)[0]

    def diagnostics(self, Y):
        return _ridge_diagnostics(self.model, Y, self.k, self.gap_tol)


def alg1_step(model, y, k, gap_tol=DEFAULT_GAP_TOL):
    return Alg1Rule(model, k, gap_tol).step(y)


class Alg2Rule(StepRule):
    """Ascent direction of the grid-smoothed ridgeness ``eta_tau``."""

    required_model_order = 2

    def __init__(self, field_: GridField, k: int, model: Optional[DensityModel] = None,
                 gap_tol: float = DEFAULT_GAP_TOL):
        self.field, self.k, self.model, self.gap_tol = field_, k, model, gap_tol

    def step_batch(self, Y):
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        _, g, H, inside = eta_tau_batch(self.field, Y, 2)
        lam, V = eig_desc_batch(np.where(inside[:, None, None], H, 0.0))
        codes = np.where(inside, np.where(gap_ok(lam, self.k, self.gap_tol), OK, GAP_FAIL), DOMAIN_FAIL)
        P = trailing_projector_batch(V, self.k)
        return np.einsum("mab,mb->ma", P, g), codes

    def objective(self, Y):
        v, _, _, ok = eta_tau_batch(self.field, Y, 0)
        return np.where(ok, v, np.nan)

    def diagnostics(self, Y):
        eta = self.objective(Y)
        if self.model is None:
            return eta, np.full(len(eta), np.nan)
        _, lam_k1 = _ridge_diagnostics(self.model, Y, self.k, self.gap_tol)
        return eta, lam_k1


def alg2_step(field_, y, k, gap_tol=DEFAULT_GAP_TOL):
    return Alg2Rule(field_, k, gap_tol=gap_tol).step(y)


class WorkingRegion:
    """Box intersected with the density upper-level set ``f >= eps_f``."""

    def __init__(self, box: Box, model: Optional[DensityModel] = None, eps_f: float = 0.0):
        self.box, self.model, self.eps_f = box, model, eps_f

    def contains(self, Y) -> np.ndarray:
        Y = np.atleast_2d(Y)
        inside = self.box.contains(Y)
        if self.model is not None and self.eps_f > 0 and inside.any():
            inside[inside] = self.model.density(Y[inside]) >= self.eps_f
        return inside


def resolve_threads(threads: Optional[int] = None) -> int:
    if threads is None:
        threads = int(os.environ.get("RIDGE_THREADS", "1") or 1)
    return max(1, int(threads))


def _run_chunk(rule, starts, params, domain, scale_by_a):
    m, d = starts.shape
    Y = starts.copy()
    final = starts.copy()
    status = np.full(m, None, dtype=object)
    iters = np.zeros(m, dtype=int)
    record = params.record_trace
    iterates = [[y.copy()] for y in starts] if record else None
    norms = [[] for _ in range(m)] if record else None

    inside = domain.contains(Y)
    status[~inside] = Status.DISCARDED_DOMAIN
    active = np.flatnonzero(inside)
    scale = params.a if scale_by_a else 1.0
    for _ in range(params.max_iters):
        if active.size == 0:
            break
        D, codes = rule.step_batch(Y[active])
        iters[active] += 1
        gap = codes == GAP_FAIL
        dom = codes == DOMAIN_FAIL
        status[active[gap]] = Status.DISCARDED_GAP
        status[active[dom]] = Status.DISCARDED_DOMAIN
        final[active[gap | dom]] = Y[active[gap | dom]]
        live = ~(gap | dom)
        disp = scale * D
        nrm = np.linalg.norm(disp, axis=1)
        conv = live & (nrm <= params.eps_tol)
        status[active[conv]] = Status.CONVERGED
        final[active[conv]] = Y[active[conv]]
        move = live & ~conv
        idx = active[move]
        Ynew = Y[idx] + disp[move]
        if record:
            for j, i in enumerate(active):
                if live[j]:
                    norms[i].append(float(nrm[j]))
            for j, i in enumerate(idx):
                iterates[i].append(Ynew[j].copy())
        left = ~domain.contains(Ynew)
        status[idx[left]] = Status.DISCARDED_DOMAIN
        final[idx[left]] = Ynew[left]
        Y[idx] = Ynew
        active = idx[~left]
    status[active] = Status.MAX_ITERS
    final[active] = Y[active]

    eta, lam = rule.diagnostics(final)
    return [FlowTrace(starts[i].copy(), final[i].copy(), status[i], int(iters[i]),
                      iterates[i] if record else None, norms[i] if record else None,
                      float(eta[i]), float(lam[i]))
            for i in range(m)]


def run_flows(rule: StepRule, starts, params: FlowParams, domain, scale_by_a: bool = True,
              threads: Optional[int] = None) -> List[FlowTrace]:
    """Iterate ``y <- y + (a *) rule(y)`` from every start.

    Starts are processed in fixed-size chunks so results do not depend on the
    worker count; output order follows ``starts``.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    chunks = [starts[s:s + START_CHUNK] for s in range(0, len(starts), START_CHUNK)]
    work = lambda c: _run_chunk(rule, c, params, domain, scale_by_a)
    n_threads = resolve_threads(threads)
    if n_threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    return [t for part in parts for t in part]


def run_flow(rule: StepRule, start, params: FlowParams, domain, scale_by_a: bool = True) -> FlowTrace:
    return run_flows(rule, np.asarray(start, dtype=float)[None], params, domain, scale_by_a, threads=1)[0]
