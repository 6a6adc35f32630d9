"""Density models with analytic partial derivatives up to order four.

Two models share one evaluation interface:

* :class:`GaussianKDE` -- isotropic Gaussian kernel density estimate. Partial
  derivatives come from the probabilists' Hermite polynomials,
  ``d^m/dx^m phi((X - x)/h) = h^-m He_m(u) phi(u)`` with ``u = (X - x)/h``,
  applied per axis.
* :class:`Example1Density` -- the polynomial density ``(3/8)(1 - u^2) v`` on
  ``[-1, 1] x [0, 2]``, whose ridge set is known in closed form.

Batched evaluation (``derivatives``) is the workhorse; ``evaluate`` wraps it
for a single point and returns a :class:`DerivativeBundle`.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .errors import DomainExit

MAX_ORDER = 4
# bound on m*n pairwise entries held in memory at once during KDE evaluation
_CHUNK_PAIRS = 400_000


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError("point cloud must be a non-empty n x d array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @classmethod
    def from_csv(cls, path) -> "PointCloud":
        """Read a headerless or single-header CSV with one point per row."""
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or all(not c.strip() for c in row):
                    continue
                try:
                    rows.append([float(c) for c in row])
                except ValueError:
                    if lineno == 1 and not rows:
                        continue  # header line
                    raise ValueError(f"{path}:{lineno}: non-numeric field in {row!r}")
                if len(rows[-1]) != len(rows[0]):
                    raise ValueError(f"{path}:{lineno}: expected {len(rows[0])} columns")
        if not rows:
            raise ValueError(f"{path}: no data rows")
        return cls(np.array(rows))

    def to_csv(self, path, header: Optional[Sequence[str]] = None) -> None:
        if header is None:
            header = [f"x{j + 1}" for j in range(self.d)]
        write_csv(path, header, self.points)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``lo <= x <= hi``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).ravel()
        hi = np.asarray(self.hi, dtype=float).ravel()
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ValueError("invalid box bounds")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def d(self) -> int:
        return self.lo.size

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)

    def padded(self, pad: float) -> "Box":
        return Box(self.lo - pad, self.hi + pad)


@dataclass(frozen=True)
class DerivativeBundle:
    """Value and partial derivatives of a density at one point.

    Orders above ``order`` are ``None``.
    """

    value: float
    gradient: Optional[np.ndarray] = None
    hessian: Optional[np.ndarray] = None
    third: Optional[np.ndarray] = None
    fourth: Optional[np.ndarray] = None
    order: int = 0

    def tensor(self, r: int) -> np.ndarray:
        t = (self.value, self.gradient, self.hessian, self.third, self.fourth)[r]
        if t is None:
            raise ValueError(f"order {r} not populated (bundle order {self.order})")
        return np.asarray(t)


class DensityModel:
    """Common interface: batched ``derivatives`` plus single-point ``evaluate``."""

    dimension: int
    domain: Box

    def derivatives(self, X, order: int) -> list:
        """Return ``[f, grad, hess, third, fourth][:order + 1]`` for rows of ``X``.

        Shapes are ``(m,)``, ``(m, d)``, ``(m, d, d)``, and so on.
        """
        raise NotImplementedError

    def density(self, X) -> np.ndarray:
        return self.derivatives(X, 0)[0]

    def evaluate(self, x, order: int = 2) -> DerivativeBundle:
        x = np.asarray(x, dtype=float).reshape(1, self.dimension)
        parts = [p[0] for p in self.derivatives(x, order)]
        parts += [None] * (MAX_ORDER + 1 - len(parts))
        return DerivativeBundle(float(parts[0]), *parts[1:], order=order)

    def _check_order(self, order):
        if not 0 <= order <= MAX_ORDER:
            raise ValueError(f"order must be in 0..{MAX_ORDER}, got {order}")


@lru_cache(maxsize=None)
def _multi_indices(d: int, r: int):
    """Sorted index tuples of order ``r`` and the map from full tensor entries to them."""
    combos = list(itertools.combinations_with_replacement(range(d), r))
    pos = {c: i for i, c in enumerate(combos)}
    full = [pos[tuple(sorted(t))] for t in itertools.product(range(d), repeat=r)]
    counts = [tuple(c.count(a) for a in range(d)) for c in combos]
    return counts, np.array(full, dtype=np.intp)


def _hermite(u: np.ndarray, order: int) -> list:
    """Probabilists' Hermite polynomials He_0..He_order evaluated at ``u``."""
    he = [np.ones_like(u), u]
    for m in range(1, order):
        he.append(u * he[m] - m * he[m - 1])
    return he[: order + 1]


class GaussianKDE(DensityModel):
    """Isotropic Gaussian KDE ``(1/(n h^d)) sum_i phi((X_i - x)/h)``.

    Evaluation is an exact O(n) sum per point; no truncation or trees.
    """

    def __init__(self, cloud: PointCloud, h: float, pad: float = 3.0):
        h = float(h)
        if not np.isfinite(h) or h <= 0:
            raise ValueError(f"bandwidth must be positive and finite, got {h}")
        self.cloud = cloud
        self.h = h
        self.dimension = cloud.d
        pts = cloud.points
        self.domain = Box(pts.min(axis=0), pts.max(axis=0)).padded(pad * h)
        self._norm = 1.0 / (cloud.n * h ** cloud.d * (2.0 * np.pi) ** (cloud.d / 2.0))

    @property
    def points(self) -> np.ndarray:
        return self.cloud.points

    def kernel_weights(self, X) -> tuple:
        """Gaussian weights ``exp(-|X_i - x|^2 / 2h^2)`` shifted for stability.

        Returns ``(w, log_shift)`` with true weights ``w * exp(log_shift)``.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        sq = ((self.points[None, :, :] - X[:, None, :]) / self.h) ** 2
        e = -0.5 * sq.sum(axis=-1)
        shift = e.max(axis=1, keepdims=True)
        return np.exp(e - shift), shift[:, 0]

    def derivatives(self, X, order: int) -> list:
        self._check_order(order)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dimension:
            raise ValueError(f"expected points of dimension {self.dimension}")
        m, d, n = X.shape[0], self.dimension, self.cloud.n
        out = [np.empty((m,) + (d,) * r) for r in range(order + 1)]
        step = max(1, _CHUNK_PAIRS // n)
        for s in range(0, m, step):
            sl = slice(s, min(m, s + step))
            for r, t in enumerate(self._chunk(X[sl], order)):
                out[r][sl] = t
        return out

    def _chunk(self, X, order):
        # layout (m, d, n): each entry is a contiguous reduction over samples
        u = (self.points.T[None, :, :] - X[:, :, None]) / self.h
        phi = np.exp(-0.5 * (u * u).sum(axis=1))
        he = _hermite(u, order)
        m, d = X.shape
        result = [phi.sum(axis=-1) * self._norm]
        for r in range(1, order + 1):
            counts, full = _multi_indices(d, r)
            vals = np.empty((m, len(counts)))
            for e, cnt in enumerate(counts):
                p = phi
                for a, c in enumerate(cnt):
                    if c:
                        p = p * he[c][:, a, :]
                vals[:, e] = p.sum(axis=-1)
            vals *= self._norm / self.h ** r
            result.append(vals[:, full].reshape((m,) + (d,) * r))
        return result


def default_bandwidth(cloud: PointCloud) -> float:
    """Mean per-axis sample std times ``n^(-1/(d+6))``."""
    sd = cloud.points.std(axis=0, ddof=1) if cloud.n > 1 else np.zeros(cloud.d)
    h = float(sd.mean()) * cloud.n ** (-1.0 / (cloud.d + 6))
    if not h > 0:
        raise ValueError("cannot derive a bandwidth from a degenerate cloud")
    return h


def build_kde(cloud: PointCloud, h: Optional[float] = None) -> GaussianKDE:
    if cloud.n < 1:
        raise ValueError("empty point cloud")
    return GaussianKDE(cloud, default_bandwidth(cloud) if h is None else h)


class Example1Density(DensityModel):
    """``f(u, v) = (3/8)(1 - u^2) v`` on ``[-1, 1] x [0, 2]``.

    The polynomial is evaluated (and differentiated) everywhere; the box is
    reported as ``domain``. Its ridge for ``k = 1`` is the vertical segment
    ``u = 0`` together with the arc ``v = (1 - u^2)/sqrt(2 + 2u^2)``, crossing
    at ``(0, 1/sqrt(2))``.
    """

    dimension = 2
    domain = Box([-1.0, 0.0], [1.0, 2.0])
    intersection = np.array([0.0, 1.0 / np.sqrt(2.0)])

    def derivatives(self, X, order: int) -> list:
        self._check_order(order)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        u, v = X[:, 0], X[:, 1]
        m = X.shape[0]
        out = [0.375 * (1.0 - u * u) * v]
        if order >= 1:
            out.append(np.stack([-0.75 * u * v, 0.375 * (1.0 - u * u)], axis=-1))
        if order >= 2:
            H = np.zeros((m, 2, 2))
            H[:, 0, 0] = -0.75 * v
            H[:, 0, 1] = H[:, 1, 0] = -0.75 * u
            out.append(H)
        if order >= 3:
            T = np.zeros((m, 2, 2, 2))
            T[:, 0, 0, 1] = T[:, 0, 1, 0] = T[:, 1, 0, 0] = -0.75
            out.append(T)
        if order >= 4:
            out.append(np.zeros((m, 2, 2, 2, 2)))
        return out

    @staticmethod
    def arc(u):
        u = np.asarray(u, dtype=float)
        return (1.0 - u * u) / np.sqrt(2.0 + 2.0 * u * u)

    def ridge_curves(self, step: float = 1e-3, v_max: float = 2.0) -> np.ndarray:
        """Dense sampling of both ridge curves with spacing at most ``step``."""
        nv = int(np.ceil(v_max / step)) + 1
        vs = np.linspace(0.0, v_max, nv)[1:-1]
        vertical = np.column_stack([np.zeros_like(vs), vs])
        # arc: bounded slope, so a fine uniform grid in u bounds arclength spacing
        nu = int(np.ceil(2.0 * 2.0 / step)) + 1
        us = np.linspace(-1.0, 1.0, nu)[1:-1]
        arc = np.column_stack([us, self.arc(us)])
        return np.vstack([vertical, arc])


def build_example1() -> Example1Density:
    return Example1Density()


def kde_derivative_check(model: DensityModel, x, order: int, step: float = 1e-5) -> float:
    """Max relative gap between analytic order-``order`` derivatives and
    central differences of the analytic order-``order - 1`` derivatives.

    The discrepancy is scaled by the largest magnitude in either tensor.
    """
    if not 1 <= order <= MAX_ORDER:
        raise ValueError("order must be in 1..4")
    x = np.asarray(x, dtype=float).ravel()
    if not model.domain.contains(x)[0]:
        raise DomainExit(f"{x} outside model domain")
    d = x.size
    exact = model.derivatives(x[None, :], order)[order][0]
    shifts = np.concatenate([x + step * np.eye(d), x - step * np.eye(d)])
    lower = model.derivatives(shifts, order - 1)[order - 1]
    fd = (lower[:d] - lower[d:]) / (2.0 * step)
    fd = np.moveaxis(fd, 0, -1)
    scale = max(np.abs(exact).max(), np.abs(fd).max())
    if scale == 0.0:
        return 0.0
    return float(np.abs(exact - fd).max() / scale)
