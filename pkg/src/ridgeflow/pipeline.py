"""End-to-end ridge extraction: density gate, per-start flows, pruning."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .density import GaussianKDE, PointCloud, build_kde, write_csv
from .flows import (Alg1Rule, Alg2Rule, FlowParams, FlowTrace, SCMSRule, Status,
                    WorkingRegion, run_flows)
from .ridgeness import GridField, build_grid_field
from .spectral import DEFAULT_GAP_TOL


class Algorithm(str, enum.Enum):
    SCMS = "scms"
    ALG1 = "alg1"
    ALG2 = "alg2"


class Stage(str, enum.Enum):
    RETAINED = "retained_final"
    PRUNED_PRE = "pruned_pre"
    PRUNED_EIGEN = "pruned_eigen"
    PRUNED_ETA = "pruned_eta"
    DISCARDED = "discarded"


@dataclass
class ExtractionConfig:
    """Settings for :func:`extract`. ``None`` means "derive from the data".

    ``tau`` defaults to ``h / 2`` and ``rho`` to ``tau / 3``.
    ``eta_threshold`` is either ``None`` (automatic) or a fixed value <= 0;
    final points with ridgeness at or below it are pruned.
    """

    k: int = 1
    h: Optional[float] = None
    algorithm: Algorithm = Algorithm.ALG1
    tau: Optional[float] = None
    rho: Optional[float] = None
    kernel: str = "biweight"
    flow: FlowParams = field(default_factory=FlowParams)
    alpha: float = 0.05
    eta_threshold: Optional[float] = None
    jump_factor: float = 10.0
    eta_floor: float = -0.5
    eta_fallback: float = -0.1
    eta_min_share: float = 0.1
    gap_tol: float = DEFAULT_GAP_TOL
    seed: int = 0
    threads: Optional[int] = None

    def __post_init__(self):
        self.algorithm = Algorithm(self.algorithm)
        if isinstance(self.flow, dict):
            self.flow = FlowParams(**self.flow)
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.eta_threshold is not None and self.eta_threshold > 0:
            raise ValueError("a fixed eta threshold must be <= 0")
        if self.h is not None and not self.h > 0:
            raise ValueError("bandwidth must be positive")
        if self.k < 1:
            raise ValueError("ridge dimension k must be >= 1")
        if self.tau is not None and not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.rho is not None and self.tau is not None and not 0 < self.rho < self.tau:
            raise ValueError("need 0 < rho < tau")

    def validate_for(self, d: int) -> None:
        if not 1 <= self.k <= d - 1:
            raise ValueError(f"ridge dimension k={self.k} invalid for d={d}; need 1 <= k <= d-1")

    def as_dict(self) -> dict:
        out = asdict(self)
        out["algorithm"] = self.algorithm.value
        return out


@dataclass
class StartOutcome:
    start: np.ndarray
    trace: Optional[FlowTrace]
    stage: Stage


@dataclass
class ExtractionResult:
    ridge_points: np.ndarray
    per_start: List[StartOutcome]
    eps_f_used: float
    eps_eta_used: float
    h_used: float
    tau_used: Optional[float] = None
    rho_used: Optional[float] = None

    def stage_counts(self) -> dict:
        counts = {s.value: 0 for s in Stage}
        for o in self.per_start:
            counts[o.stage.value] += 1
        return counts

    def summary(self) -> dict:
        return {
            "eps_f_used": self.eps_f_used,
            "eps_eta_used": self.eps_eta_used,
            "h_used": self.h_used,
            "tau_used": self.tau_used,
            "rho_used": self.rho_used,
            "n_starts": len(self.per_start),
            "n_ridge_points": int(len(self.ridge_points)),
            "stage_counts": self.stage_counts(),
        }

    def write(self, out_dir) -> None:
        """Write ``ridge_points.csv``, ``per_start.csv`` and ``summary.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        d = len(self.per_start[0].start) if self.per_start else self.ridge_points.shape[1]
        write_csv(out / "ridge_points.csv", [f"x{j + 1}" for j in range(d)], self.ridge_points)
        header = ([f"start_{j + 1}" for j in range(d)] + [f"final_{j + 1}" for j in range(d)]
                  + ["stage", "status", "final_eta", "final_lambda_k1", "iterations"])
        rows = []
        for o in self.per_start:
            t = o.trace
            final = t.final if t is not None else np.full(d, np.nan)
            rows.append([*o.start, *final, o.stage.value,
                         t.status.value if t is not None else "",
                         t.final_eta if t is not None else float("nan"),
                         t.final_lambda_k1 if t is not None else float("nan"),
                         t.iterations if t is not None else 0])
        write_csv(out / "per_start.csv", header, rows)
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2), encoding="utf-8")


def preprocess(cloud: PointCloud, model, alpha: float):
    """Density gate: keep samples with ``f(X_i) >= eps_f``.

    ``eps_f`` is the lower-interpolated ``alpha`` quantile of the density at
    the samples. Returns ``(retained_mask, eps_f)``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    dens = model.density(cloud.points)
    eps_f = float(np.quantile(dens, alpha, method="lower"))
    return dens >= eps_f, eps_f


def auto_eta_threshold(final_etas, jump_factor: float = 10.0, floor: float = -0.5,
                       fallback: float = -0.1, min_share: float = 0.1) -> float:
    """Place the ridgeness cutoff in the dominant jump of the sorted values.

    A gap between consecutive sorted values is significant when it exceeds
    ``jump_factor`` times the median positive gap and spans at least
    ``min_share`` of the value range, so a smooth continuum has no jump. The
    cutoff is the midpoint of the widest significant gap whose upper end lies
    above ``floor`` (ties go to the higher gap); ``fallback`` is returned when
    there is none.
    """
    v = np.sort(np.asarray(final_etas, dtype=float))
    v = v[np.isfinite(v)]
    if v.size < 2:
        raise ValueError("need at least two finite ridgeness values")
    if v[0] == v[-1]:
        return float(v[0] - 1e-12)
    gaps = np.diff(v)
    positive = gaps[gaps > 0]
    cut = jump_factor * float(np.median(positive))
    wide = gaps >= min_share * (v[-1] - v[0])
    significant = np.flatnonzero((gaps > cut) & wide & (v[1:] > floor))
    if significant.size == 0:
        return float(fallback)
    sizes = gaps[significant]
    i = significant[np.flatnonzero(sizes == sizes.max())[-1]]
    return float(0.5 * (v[i] + v[i + 1]))


def make_rule(model, config: ExtractionConfig, grid: Optional[GridField] = None):
    """Step rule plus whether the driver should scale it by ``a``."""
    if config.algorithm is Algorithm.SCMS:
        return SCMSRule(model, config.k, gap_tol=config.gap_tol), False
    if config.algorithm is Algorithm.ALG1:
        return Alg1Rule(model, config.k, config.gap_tol), True
    return Alg2Rule(grid, config.k, model, config.gap_tol), True


def extract(cloud: PointCloud, config: ExtractionConfig,
            model: Optional[GaussianKDE] = None) -> ExtractionResult:
    """Run the configured algorithm from every retained sample and prune the finals."""
    config.validate_for(cloud.d)
    if model is None:
        model = build_kde(cloud, config.h)
    retained, eps_f = preprocess(cloud, model, config.alpha)
    region = WorkingRegion(model.domain, model, eps_f)

    grid = None
    tau = rho = None
    if config.algorithm is Algorithm.ALG2:
        tau = config.tau if config.tau is not None else 0.5 * model.h
        rho = config.rho if config.rho is not None else tau / 3.0
        grid = build_grid_field(model, config.k, model.domain, tau, rho, config.kernel, config.gap_tol)
    rule, scale = make_rule(model, config, grid)

    idx = np.flatnonzero(retained)
    traces = (run_flows(rule, cloud.points[idx], config.flow, region, scale, config.threads)
              if idx.size else [])

    outcomes: List[StartOutcome] = [StartOutcome(p.copy(), None, Stage.PRUNED_PRE) for p in cloud.points]
    candidates = []
    for i, t in zip(idx, traces):
        if t.status is not Status.CONVERGED:
            outcomes[i] = StartOutcome(t.start, t, Stage.DISCARDED)
        elif not t.final_lambda_k1 < 0:
            outcomes[i] = StartOutcome(t.start, t, Stage.PRUNED_EIGEN)
        else:
            outcomes[i] = StartOutcome(t.start, t, Stage.RETAINED)
            candidates.append(i)

    etas = np.array([outcomes[i].trace.final_eta for i in candidates])
    if config.eta_threshold is not None:
        eps_eta = float(config.eta_threshold)
    elif etas.size >= 2:
        eps_eta = auto_eta_threshold(etas, config.jump_factor, config.eta_floor,
                                   config.eta_fallback, config.eta_min_share)
    else:
        eps_eta = float(config.eta_fallback)
    for i, e in zip(candidates, etas):
        if not e > eps_eta:
            outcomes[i].stage = Stage.PRUNED_ETA

    kept = [o.trace.final for o in outcomes if o.stage is Stage.RETAINED]
    ridge = np.array(kept) if kept else np.empty((0, cloud.d))
    return ExtractionResult(ridge, outcomes, eps_f, eps_eta, model.h, tau, rho)
