"""Synthetic datasets, distance metrics, finite-difference oracles and the
desk-scale experiments (Hausdorff convergence, SCMS coverage gap)."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .density import Example1Density, PointCloud, build_example1
from .flows import Alg1Rule, FlowParams, SCMSRule, Status, WorkingRegion, run_flows

_HAUSDORFF_CHUNK = 2048


class Shape(str, enum.Enum):
    XCROSS = "xcross"
    CIRCLE = "circle"
    SPIRAL = "spiral"
    EXAMPLE1 = "example1"


@dataclass
class SyntheticSpec:
    shape: Shape = Shape.CIRCLE
    n: int = 200
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.shape = Shape(self.shape)
        if int(self.n) < 1:
            raise ValueError("n must be at least 1")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be non-negative")
        self.n = int(self.n)


@dataclass
class GroundTruth:
    """Dense sampling of the true ridge; ``exclusions`` are (center, radius)
    balls around intersections and endpoints where ridge theory does not apply."""

    points: np.ndarray
    exclusions: list = field(default_factory=list)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.size == 0 or not np.all(np.isfinite(self.points)):
            raise ValueError("ground truth must be a non-empty finite point set")

    def outside_exclusions(self, P) -> np.ndarray:
        P = np.atleast_2d(P)
        keep = np.ones(len(P), dtype=bool)
        for c, r in self.exclusions:
            keep &= np.linalg.norm(P - c, axis=1) > r
        return keep


# Arm half-length of the x-cross segments.
XCROSS_HALF = 1.0
SPIRAL_R0, SPIRAL_RATE, SPIRAL_TURNS = 0.1, 0.15, 4.0 * np.pi
EXCLUSION_RADIUS = 0.1


def _xcross(t):
    """Map ``t`` in [0, 4*HALF) to the two diagonal segments by arclength."""
    t = np.asarray(t, dtype=float)
    second = t >= 2.0 * XCROSS_HALF
    s = np.where(second, t - 2.0 * XCROSS_HALF, t) - XCROSS_HALF
    c = s / np.sqrt(2.0)
    return np.column_stack([c, np.where(second, -c, c)])


def _spiral_table(n=20001):
    theta = np.linspace(0.0, SPIRAL_TURNS, n)
    r = SPIRAL_R0 + SPIRAL_RATE * theta
    # ds/dtheta = sqrt(r^2 + r'^2)
    speed = np.sqrt(r * r + SPIRAL_RATE ** 2)
    s = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(theta))])
    return theta, s


def _spiral(s):
    theta_tab, s_tab = _spiral_table()
    theta = np.interp(s, s_tab, theta_tab)
    r = SPIRAL_R0 + SPIRAL_RATE * theta
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def ground_truth(shape: Shape, step: float = 1e-3) -> GroundTruth:
    """Generating curve(s) sampled with arclength spacing ``step * total length``."""
    shape = Shape(shape)
    if shape is Shape.CIRCLE:
        n = int(np.ceil(1.0 / step))
        th = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
        return GroundTruth(np.column_stack([np.cos(th), np.sin(th)]))
    if shape is Shape.XCROSS:
        total = 4.0 * XCROSS_HALF
        n = int(np.ceil(1.0 / step)) + 1
        pts = _xcross(np.linspace(0.0, total, n, endpoint=False))
        ends = [np.array(p) * XCROSS_HALF / np.sqrt(2.0) for p in ((1, 1), (-1, -1), (1, -1), (-1, 1))]
        excl = [(np.zeros(2), EXCLUSION_RADIUS)] + [(e, EXCLUSION_RADIUS) for e in ends]
        return GroundTruth(pts, excl)
    if shape is Shape.SPIRAL:
        _, s_tab = _spiral_table()
        n = int(np.ceil(1.0 / step)) + 1
        pts = _spiral(np.linspace(0.0, s_tab[-1], n))
        return GroundTruth(pts, [(pts[0], EXCLUSION_RADIUS), (pts[-1], EXCLUSION_RADIUS)])
    model = build_example1()
    pts = model.ridge_curves(step=step)
    # keep only points where the ridge eigenvalue condition holds
    lam = np.linalg.eigvalsh(model.derivatives(pts, 2)[2])
    pts = pts[lam[:, 0] < 0]
    excl = [(model.intersection, EXCLUSION_RADIUS)]
    return GroundTruth(pts, excl)


def _rejection_example1(rng, n):
    out = np.empty((0, 2))
    model = build_example1()
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        cand = np.column_stack([rng.uniform(-1.0, 1.0, m), rng.uniform(0.0, 2.0, m)])
        accept = rng.uniform(0.0, 0.75, m) < model.density(cand)
        out = np.vstack([out, cand[accept]])
    return out[:n]


def generate(spec: SyntheticSpec):
    """Sample a point cloud and its ground-truth ridge.

    Curve shapes are sampled uniformly by arclength and perturbed by isotropic
    Gaussian noise; ``example1`` is drawn from the analytic density by
    rejection (noise is not applied).
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    if spec.shape is Shape.CIRCLE:
        th = rng.uniform(0.0, 2.0 * np.pi, n)
        pts = np.column_stack([np.cos(th), np.sin(th)])
    elif spec.shape is Shape.XCROSS:
        pts = _xcross(rng.uniform(0.0, 4.0 * XCROSS_HALF, n))
    elif spec.shape is Shape.SPIRAL:
        _, s_tab = _spiral_table()
        pts = _spiral(rng.uniform(0.0, s_tab[-1], n))
    else:
        return PointCloud(_rejection_example1(rng, n)), ground_truth(spec.shape)
    if spec.noise_sigma > 0:
        pts = pts + spec.noise_sigma * rng.standard_normal(pts.shape)
    return PointCloud(pts), ground_truth(spec.shape)


def _directed(A, B):
    worst = 0.0
    for s in range(0, len(A), _HAUSDORFF_CHUNK):
        blk = A[s:s + _HAUSDORFF_CHUNK]
        d2 = ((blk[:, None, :] - B[None, :, :]) ** 2).sum(axis=-1)
        worst = max(worst, float(d2.min(axis=1).max()))
    return np.sqrt(worst)


def hausdorff(A, B) -> float:
    """Exact Hausdorff distance between two finite point sets."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.size == 0 or B.size == 0:
        raise ValueError("Hausdorff distance needs two non-empty sets")
    if A.shape[1] != B.shape[1]:
        raise ValueError("point sets differ in dimension")
    return max(_directed(A, B), _directed(B, A))


def fd_oracle(fun: Callable, x, step: float = 1e-5) -> np.ndarray:
    """Central-difference derivative of ``fun`` at ``x``.

    Scalar ``fun`` gives a gradient of shape ``(d,)``; array-valued ``fun``
    gives the Jacobian with the differentiation axis last.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float).ravel()
    cols = []
    for l in range(x.size):
        e = np.zeros_like(x)
        e[l] = step
        cols.append((np.asarray(fun(x + e), dtype=float) - np.asarray(fun(x - e), dtype=float)) / (2.0 * step))
    return np.stack(cols, axis=-1)


def trial_seed(base: int, n: int, trial: int) -> int:
    """Deterministic per-(n, trial) seed."""
    return int(np.random.SeedSequence([base, n, trial]).generate_state(1)[0])


def bandwidth_rule(c: float = 0.7, power: float = 1.0 / 8.0) -> Callable[[int], float]:
    """``h(n) = c * n**(-power)``."""
    if not c > 0:
        raise ValueError("bandwidth constant must be positive")
    return lambda n: c * n ** (-power)


@dataclass
class ConvergenceRow:
    n: int
    h: float
    median_dh: float
    trial_dh: list


def _restricted_truth(gt: GroundTruth, model, eps_f: float) -> np.ndarray:
    pts = gt.points[gt.outside_exclusions(gt.points)]
    inside = model.domain.contains(pts)
    pts = pts[inside]
    keep = model.density(pts) >= eps_f
    return pts[keep]


def extraction_error(cloud: PointCloud, gt: GroundTruth, config) -> float:
    """Hausdorff distance between extracted ridge points and the truth.

    Both sides exclude the ground-truth exclusion balls; the truth is further
    restricted to the region that passes the density gate.
    """
    from .pipeline import extract, preprocess
    from .density import build_kde

    model = build_kde(cloud, config.h)
    res = extract(cloud, config, model)
    ridge = res.ridge_points[gt.outside_exclusions(res.ridge_points)]
    truth = _restricted_truth(gt, model, res.eps_f_used)
    if len(ridge) == 0 or len(truth) == 0:
        return float("inf")
    return hausdorff(ridge, truth)


def convergence_experiment(shape: Shape = Shape.CIRCLE, n_list: Sequence[int] = (200, 800, 3200),
                           h_rule: Optional[Callable[[int], float]] = None, algorithm="scms",
                           trials: int = 5, noise_sigma: float = 0.05, base_seed: int = 0,
                           config=None):
    """Median Hausdorff error of extracted ridges as the sample size grows.

    ``config`` is an optional :class:`ExtractionConfig` template; its
    bandwidth and algorithm are overridden per run.
    """
    from dataclasses import replace
    from .pipeline import ExtractionConfig

    n_list = [int(n) for n in n_list]
    if not n_list or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be non-empty and strictly ascending")
    if trials < 1:
        raise ValueError("trials must be positive")
    h_rule = h_rule or bandwidth_rule()
    base = config if config is not None else ExtractionConfig()
    rows = []
    for n in n_list:
        h = float(h_rule(n))
        cfg = replace(base, h=h, algorithm=algorithm)
        errs = []
        for t in range(trials):
            cloud, gt = generate(SyntheticSpec(shape, n, noise_sigma, trial_seed(base_seed, n, t)))
            errs.append(extraction_error(cloud, gt, cfg))
        rows.append(ConvergenceRow(n, h, float(np.median(errs)), [float(e) for e in errs]))
    return rows


@dataclass
class GapReport:
    coverage_scms: float
    coverage_alg1: float
    intersection_scms: float
    intersection_alg1: float
    coverage_upper_scms: float
    coverage_upper_alg1: float
    n_starts: int
    converged_scms: int
    converged_alg1: int

    def as_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in self.__dict__.items()}


def gap_starts(n_u: int = 4, n_v: int = 40) -> np.ndarray:
    """Start grid on both sides of ``u = 0`` (never on it)."""
    u = 0.05 + 0.1 * np.arange(n_u)
    u = np.concatenate([-u[::-1], u])
    v = (np.arange(n_v) + 0.5) * 2.0 / n_v
    uu, vv = np.meshgrid(u, v, indexing="ij")
    return np.column_stack([uu.ravel(), vv.ravel()])


def _coverage(samples, finals) -> float:
    if len(finals) == 0:
        return float("inf")
    d2 = ((samples[:, None, :] - finals[None, :, :]) ** 2).sum(axis=-1)
    return float(np.sqrt(d2.min(axis=1).max()))


def scms_gap_experiment(starts=None, scms_scale: float = 0.01, alg1_a: float = 0.1,
                        max_iters: int = 20000, threads=None) -> GapReport:
    """Compare projected-gradient (SCMS direction) flows with ridgeness ascent
    on :class:`Example1Density`.

    Coverage is the largest distance from a sample of the vertical ridge piece
    below the crossing, ``u = 0, v in [0.15, 1/sqrt(2) - 0.15]``, to the nearest
    converged final. Along SCMS trajectories that piece is a minimum of ``f``
    (second derivative ``0.375 (1 - 2 v^2) / v > 0``), so those flows leave it.
    Coverage of the piece above the crossing is reported as well. SCMS steps
    are not scaled by a step size; ``scms_scale`` plays that role.
    """
    model = build_example1()
    starts = gap_starts() if starts is None else np.atleast_2d(np.asarray(starts, dtype=float))
    region = WorkingRegion(model.domain)
    r = model.intersection[1]
    lower = np.column_stack([np.zeros(200), np.linspace(0.15, r - 0.15, 200)])
    upper = np.column_stack([np.zeros(200), np.linspace(r + 0.15, 1.8, 200)])

    runs = {
        "scms": (SCMSRule(model, 1, surrogate_scale=scms_scale), False, 1.0),
        "alg1": (Alg1Rule(model, 1), True, alg1_a),
    }
    finals = {}
    for name, (rule, scale, a) in runs.items():
        traces = run_flows(rule, starts, FlowParams(a=a, max_iters=max_iters), region, scale, threads)
        finals[name] = np.array([t.final for t in traces if t.status is Status.CONVERGED]).reshape(-1, 2)

    def to_cross(F):
        return float(np.linalg.norm(F - model.intersection, axis=1).min()) if len(F) else float("inf")

    return GapReport(
        coverage_scms=_coverage(lower, finals["scms"]),
        coverage_alg1=_coverage(lower, finals["alg1"]),
        intersection_scms=to_cross(finals["scms"]),
        intersection_alg1=to_cross(finals["alg1"]),
        coverage_upper_scms=_coverage(upper, finals["scms"]),
        coverage_upper_alg1=_coverage(upper, finals["alg1"]),
        n_starts=len(starts),
        converged_scms=len(finals["scms"]),
        converged_alg1=len(finals["alg1"]),
    )
