"""Ridgeness ``eta = -1/2 |V_perp^T grad f|^2`` and its derivatives.

``xi = P grad f`` with ``P`` the projector onto the trailing ``d - k``
Hessian eigenvectors. Its Jacobian follows the product rule

    d xi_a / d x_l = sum_b dP_ab/dx_l g_b + (P H)_al,

so ``grad eta = -J^T xi``. The Hessian

    hess eta = -sum_a xi_a hess(xi_a) - J^T J

uses central differences of the analytic ``J`` for the first term only; that
term vanishes on the ridge, where ``-J^T J`` alone fixes the ascent subspace.

The smoothed ridgeness ``eta_tau`` is a discrete convolution of ``eta``
sampled on a regular grid (:class:`GridField`) with a compact kernel ``L``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import integrate, special

from .density import Box, DensityModel
from .errors import DomainExit, EigenGapTooSmall
from .spectral import (DEFAULT_GAP_TOL, EigenSystem, eig_desc_batch, gap_ok,
                       projector_derivative_batch, trailing_projector_batch)

# chunk of evaluation points processed together
_BATCH = 256


@dataclass
class RidgenessEval:
    xi: np.ndarray
    eta: float
    grad_eta: np.ndarray
    hess_eta: Optional[np.ndarray]
    lambda_k1: float
    eig_star: Optional[EigenSystem] = None


@dataclass
class RidgenessBatch:
    """Row-wise ridgeness quantities; rows with ``ok == False`` are undefined."""

    xi: np.ndarray
    eta: np.ndarray
    grad_eta: np.ndarray
    hess_eta: Optional[np.ndarray]
    lambda_k1: np.ndarray
    ok: np.ndarray


def _fd_step(Y):
    return np.maximum(1e-5, 1e-5 * np.linalg.norm(Y, axis=-1))


def eta_batch(model: DensityModel, Y, k: int, gap_tol: float = DEFAULT_GAP_TOL):
    """Ridgeness and ``lambda_{k+1}`` at rows of ``Y`` (order-2 derivatives only).

    Returns ``(eta, lambda_k1, ok)``.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    _, g, H = model.derivatives(Y, 2)
    lam, V = eig_desc_batch(H)
    ok = gap_ok(lam, k, gap_tol)
    proj = np.einsum("mij,mi->mj", V[:, :, k:], g)
    eta = -0.5 * np.einsum("mj,mj->m", proj, proj)
    return eta, lam[:, k], ok


def _xi_jacobian(model, Y, k, gap_tol):
    _, g, H, T = model.derivatives(Y, 3)
    lam, V = eig_desc_batch(H)
    ok = gap_ok(lam, k, gap_tol)
    P = trailing_projector_batch(V, k)
    dP = projector_derivative_batch(lam, V, T, k)
    xi = np.einsum("mab,mb->ma", P, g)
    J = np.einsum("mabl,mb->mal", dP, g) + P @ H
    proj = np.einsum("mij,mi->mj", V[:, :, k:], g)
    eta = -0.5 * np.einsum("mj,mj->m", proj, proj)
    return xi, J, eta, lam[:, k], ok


def ridgeness_batch(model: DensityModel, Y, k: int, need_hessian: bool = True,
                    gap_tol: float = DEFAULT_GAP_TOL) -> RidgenessBatch:
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    m, d = Y.shape
    if not 0 <= k <= d - 1:
        raise ValueError(f"ridge dimension k must be in 0..{d - 1}, got {k}")
    xi, J, eta, lam_k1, ok = _xi_jacobian(model, Y, k, gap_tol)
    grad = -np.einsum("mal,ma->ml", J, xi)
    hess = None
    if need_hessian:
        delta = _fd_step(Y)
        shifts = np.concatenate([Y[:, None, :] + delta[:, None, None] * np.eye(d),
                                 Y[:, None, :] - delta[:, None, None] * np.eye(d)], axis=1)
        _, Js, _, _, oks = _xi_jacobian(model, shifts.reshape(-1, d), k, gap_tol)
        Js = Js.reshape(m, 2 * d, d, d)
        ok &= oks.reshape(m, 2 * d).all(axis=1)
        # dJ[m, a, l, s] = d J_al / d x_s
        dJ = np.moveaxis((Js[:, :d] - Js[:, d:]) / (2.0 * delta[:, None, None, None]), 1, -1)
        hess = -np.einsum("ma,mals->mls", xi, dJ) - np.einsum("mal,mas->mls", J, J)
        hess = 0.5 * (hess + np.swapaxes(hess, 1, 2))
    return RidgenessBatch(xi, eta, grad, hess, lam_k1, ok)


def ridgeness_eval(model: DensityModel, x, k: int, need_hessian: bool = True,
                   gap_tol: float = DEFAULT_GAP_TOL, with_eig_star: bool = False) -> RidgenessEval:
    """Ridgeness, its gradient and (optionally) Hessian at a single point."""
    x = np.asarray(x, dtype=float).ravel()
    if not model.domain.contains(x)[0]:
        raise DomainExit(f"{x} outside model domain")
    r = ridgeness_batch(model, x[None], k, need_hessian, gap_tol)
    if not r.ok[0]:
        lam = eig_desc_batch(model.derivatives(x[None], 2)[2])[0][0]
        raise EigenGapTooSmall(float(lam[k - 1] - lam[k]) if k else np.inf, gap_tol)
    hess = None if r.hess_eta is None else r.hess_eta[0]
    eig_star = None
    if with_eig_star and hess is not None:
        lam_s, V_s = eig_desc_batch(hess[None])
        eig_star = EigenSystem(lam_s[0], V_s[0])
    return RidgenessEval(r.xi[0], float(r.eta[0]), r.grad_eta[0], hess,
                         float(r.lambda_k1[0]), eig_star)


def s_q_eval(model: DensityModel, x, k: int, q: float, gap_tol: float = DEFAULT_GAP_TOL) -> float:
    """Density-penalised ridgeness ``eta / f^q``."""
    x = np.asarray(x, dtype=float).ravel()
    f = float(model.density(x[None])[0])
    if not f > 0:
        raise ValueError(f"density must be positive, got {f}")
    eta, _, ok = eta_batch(model, x[None], k, gap_tol)
    if not ok[0]:
        raise EigenGapTooSmall(np.nan, gap_tol)
    return float(eta[0] / f ** q)


# --- smoothing kernels -------------------------------------------------------

def _ball_integral(profile, d, radius):
    """Integral over the d-ball of a radial profile ``profile(r)``."""
    surface = 2.0 * math.pi ** (d / 2.0) / special.gamma(d / 2.0)
    val, _ = integrate.quad(lambda r: profile(r) * r ** (d - 1), 0.0, radius,
                            epsabs=1e-14, epsrel=1e-12)
    return surface * val


class SmoothingKernel:
    """Radial kernel with compact support ``|u| <= radius``, unit mass."""

    name = ""
    radius = 1.0

    def __init__(self, d: int):
        self.d = d
        self.c = 1.0 / _ball_integral(self.profile, d, self.radius)

    def profile(self, r):
        raise NotImplementedError

    def evaluate(self, U, order: int = 2):
        """Kernel value, gradient and Hessian at offsets ``U`` of shape ``(..., d)``."""
        raise NotImplementedError


class Biweight(SmoothingKernel):
    """``c (1 - |u|^2)^2`` on the unit ball."""

    name = "biweight"
    radius = 1.0

    def profile(self, r):
        return (1.0 - r * r) ** 2

    def evaluate(self, U, order=2):
        s = 1.0 - np.einsum("...i,...i->...", U, U)
        inside = s > 0
        s = np.where(inside, s, 0.0)
        out = [self.c * s * s]
        if order >= 1:
            out.append(-4.0 * self.c * s[..., None] * U)
        if order >= 2:
            eye = np.eye(U.shape[-1])
            hess = -4.0 * self.c * (s[..., None, None] * eye - 2.0 * U[..., :, None] * U[..., None, :])
            out.append(np.where(inside[..., None, None], hess, 0.0))
        return out


class TruncatedGaussian(SmoothingKernel):
    """Standard Gaussian profile cut at ``|u| = 3`` and renormalised."""

    name = "truncated_gaussian"
    radius = 3.0

    def profile(self, r):
        return math.exp(-0.5 * r * r)

    def evaluate(self, U, order=2):
        sq = np.einsum("...i,...i->...", U, U)
        inside = sq < self.radius ** 2
        L = np.where(inside, self.c * np.exp(-0.5 * sq), 0.0)
        out = [L]
        if order >= 1:
            out.append(-U * L[..., None])
        if order >= 2:
            eye = np.eye(U.shape[-1])
            out.append((U[..., :, None] * U[..., None, :] - eye) * L[..., None, None])
        return out


KERNELS = {"biweight": Biweight, "truncated_gaussian": TruncatedGaussian}


def make_kernel(name: str, d: int) -> SmoothingKernel:
    try:
        return KERNELS[name](d)
    except KeyError:
        raise ValueError(f"unknown smoothing kernel {name!r}; choose from {sorted(KERNELS)}")


# --- grid field --------------------------------------------------------------

@dataclass
class GridField:
    """Ridgeness sampled on a regular grid; node ``i`` sits at ``origin + spacing * idx``.

    ``values`` is flattened in C order over ``extents``. Nodes where the
    eigengap failed hold ``-inf`` and are skipped during convolution.
    """

    origin: np.ndarray
    spacing: float
    extents: tuple
    values: np.ndarray
    tau: float
    k: int
    kernel_name: str = "biweight"
    kernel_radius: float = 1.0
    _kernel: Optional[SmoothingKernel] = field(default=None, repr=False, compare=False)
    _offsets: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.extents = tuple(int(e) for e in self.extents)
        self.values = np.asarray(self.values, dtype=float)
        if not 0 < self.spacing < self.tau:
            raise ValueError("grid spacing must satisfy 0 < rho < tau")
        if self.values.size != int(np.prod(self.extents)):
            raise ValueError("values do not match grid extents")
        self._kernel = make_kernel(self.kernel_name, self.d)
        self.kernel_radius = self._kernel.radius
        reach = int(math.ceil(self.kernel_radius * self.tau / self.spacing)) + 1
        axes = [np.arange(-reach, reach + 1)] * self.d
        self._offsets = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.d)

    @property
    def d(self) -> int:
        return self.origin.size

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values)

    def nodes(self) -> np.ndarray:
        axes = [self.origin[a] + self.spacing * np.arange(self.extents[a]) for a in range(self.d)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.d)

    def upper(self) -> np.ndarray:
        return self.origin + self.spacing * (np.asarray(self.extents) - 1)

    def inner_box(self) -> Box:
        """Points whose kernel support lies inside the grid hull."""
        pad = self.kernel_radius * self.tau
        return Box(self.origin + pad, self.upper() - pad)

    def save(self, stem) -> None:
        """Write ``<stem>.json`` (header) and ``<stem>.csv`` (node values)."""
        stem = Path(stem)
        header = {
            "origin": self.origin.tolist(), "spacing": self.spacing,
            "extents": list(self.extents), "tau": self.tau, "k": self.k,
            "kernel": self.kernel_name, "kernel_radius": self.kernel_radius,
            "values_file": stem.name + ".csv",
        }
        stem.with_suffix(".json").write_text(json.dumps(header, indent=2), encoding="utf-8")
        with open(stem.with_suffix(".csv"), "w", encoding="utf-8") as fh:
            fh.write("eta\n")
            fh.writelines(repr(float(v)) + "\n" for v in self.values)

    @classmethod
    def load(cls, stem) -> "GridField":
        stem = Path(stem)
        header = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
        lines = stem.with_suffix(".csv").read_text(encoding="utf-8").split()
        values = np.array([float(s) for s in lines[1:]])
        return cls(np.array(header["origin"]), header["spacing"], tuple(header["extents"]),
                   values, header["tau"], header["k"], header["kernel"])


def build_grid_field(model: DensityModel, k: int, domain: Box, tau: float, rho: float,
                     kernel: str = "biweight", gap_tol: float = DEFAULT_GAP_TOL) -> GridField:
    """Sample ``eta`` on a grid covering ``domain`` plus the kernel reach.

    Per axis the grid has ``ceil(extent/rho) + 1`` nodes over the domain and
    ``ceil(radius * tau / rho)`` extra nodes on each side.
    """
    if not (np.isfinite(tau) and np.isfinite(rho) and 0 < rho < tau):
        raise ValueError(f"need 0 < rho < tau, got rho={rho}, tau={tau}")
    extent = domain.hi - domain.lo
    if np.any(extent <= 0) or not np.all(np.isfinite(extent)):
        raise ValueError("domain must have positive finite extent on every axis")
    radius = KERNELS[kernel].radius if kernel in KERNELS else make_kernel(kernel, domain.d).radius
    pad = int(math.ceil(radius * tau / rho))
    counts = np.ceil(extent / rho).astype(int) + 1 + 2 * pad
    origin = domain.lo - pad * rho
    field_ = GridField(origin, float(rho), tuple(counts), np.zeros(int(np.prod(counts))),
                       float(tau), k, kernel)
    nodes = field_.nodes()
    values = np.empty(len(nodes))
    for s in range(0, len(nodes), 4 * _BATCH):
        eta, _, ok = eta_batch(model, nodes[s:s + 4 * _BATCH], k, gap_tol)
        values[s:s + 4 * _BATCH] = np.where(ok, eta, -np.inf)
    field_.values = values
    return field_


def eta_tau_batch(field_: GridField, Y, order: int = 2):
    """Smoothed ridgeness at rows of ``Y``.

    Returns ``(value, grad, hess, ok)``; ``grad``/``hess`` are ``None`` below
    the requested order. ``ok`` is False where the kernel support leaves the
    grid or touches only invalid nodes. The value is

        (rho/tau)^d * A * C / B,

    with ``A = sum L_i`` over all nodes in the support, ``B`` the same sum over
    valid nodes and ``C = sum L_i eta_i`` over valid nodes. Without invalid
    nodes this is the plain grid sum; derivatives are exact derivatives of
    this expression.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    m, d = Y.shape
    f = field_
    kern = f._kernel
    inner = f.inner_box()
    ok = inner.contains(Y)
    Ys = np.where(ok[:, None], Y, inner.lo if np.all(inner.hi >= inner.lo) else f.origin)
    base = np.rint((Ys - f.origin) / f.spacing).astype(np.intp)
    idx = base[:, None, :] + f._offsets[None, :, :]
    ext = np.asarray(f.extents)
    inrange = np.all((idx >= 0) & (idx < ext), axis=-1)
    idx = np.clip(idx, 0, ext - 1)
    flat = np.ravel_multi_index(tuple(np.moveaxis(idx, -1, 0)), f.extents)
    node = f.origin + f.spacing * idx
    U = (Ys[:, None, :] - node) / f.tau
    U = np.where(inrange[..., None], U, 2.0 * kern.radius)  # push clipped duplicates outside the support
    parts = kern.evaluate(U, order)
    vals = f.values[flat]
    good = np.isfinite(vals)
    eta = np.where(good, vals, 0.0)
    scale = (f.spacing / f.tau) ** d
    inv = [1.0, 1.0 / f.tau, 1.0 / f.tau ** 2]
    # C-sums: sum L_i eta_i and derivatives
    C = [np.einsum("mn...,mn->m...", parts[r], eta) * inv[r] for r in range(order + 1)]
    clean = good.all(axis=1)
    value = scale * C[0]
    grad = scale * C[1] if order >= 1 else None
    hess = scale * C[2] if order >= 2 else None
    if not clean.all():
        goodf = good.astype(float)
        A = [parts[r].sum(axis=1) * inv[r] for r in range(order + 1)]
        B = [np.einsum("mn...,mn->m...", parts[r], goodf) * inv[r] for r in range(order + 1)]
        dirty = ~clean
        with np.errstate(divide="ignore", invalid="ignore"):
            v, g, h = _renormalised(A, B, C, order)
        ok &= ~(dirty & ~(B[0] > 0))
        value = np.where(dirty, scale * v, value)
        if order >= 1:
            grad = np.where(dirty[:, None], scale * g, grad)
        if order >= 2:
            hess = np.where(dirty[:, None, None], scale * h, hess)
    if hess is not None:
        hess = 0.5 * (hess + np.swapaxes(hess, 1, 2))
    return value, grad, hess, ok


def _renormalised(A, B, C, order):
    """Value and derivatives of ``A * C / B`` by the quotient rule."""
    N0 = A[0] * C[0]
    v = N0 / B[0]
    g = h = None
    if order >= 1:
        N1 = A[1] * C[0][:, None] + A[0][:, None] * C[1]
        b = B[0][:, None]
        g = N1 / b - N0[:, None] * B[1] / b ** 2
    if order >= 2:
        outer = lambda p, q: p[:, :, None] * q[:, None, :]
        N2 = (A[2] * C[0][:, None, None] + outer(A[1], C[1]) + outer(C[1], A[1])
              + A[0][:, None, None] * C[2])
        b = B[0][:, None, None]
        n0 = N0[:, None, None]
        h = (N2 / b - (outer(N1, B[1]) + outer(B[1], N1)) / b ** 2
             - n0 * B[2] / b ** 2 + 2.0 * n0 * outer(B[1], B[1]) / b ** 3)
    return v, g, h


def eta_tau_eval(field_: GridField, x, order: int = 2):
    """``(value, gradient, hessian)`` of the smoothed ridgeness at one point."""
    x = np.asarray(x, dtype=float).ravel()
    v, g, h, ok = eta_tau_batch(field_, x[None], order)
    if not ok[0]:
        raise DomainExit(f"{x} too close to the grid boundary for the kernel support")
    return float(v[0]), (None if g is None else g[0]), (None if h is None else h[0])
