"""P1 finite elements on (0, 1) with homogeneous Dirichlet conditions."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import LinAlgError, solveh_banded

from .coefficient import CoefficientSample
from .jumps import Partition1D

REF_GRID_1D = np.linspace(0.0, 1.0, 1001)
MIN_SPACING = 1e-12

_GL5_X, _GL5_W = np.polynomial.legendre.leggauss(5)
_ORACLE_CHUNK = 2048


class MeshError(ValueError):
    pass


class AssemblyError(RuntimeError):
    pass


class OracleResolutionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Mesh1D:
    nodes: np.ndarray
    interface_conforming: bool = False

    def __post_init__(self):
        x = np.asarray(self.nodes, dtype=float)
        if x.ndim != 1 or x.size < 2 or x[0] != 0.0 or x[-1] != 1.0:
            raise MeshError("nodes must run from 0 to 1")
        if np.any(np.diff(x) < MIN_SPACING):
            raise MeshError("mesh nodes closer than 1e-12")
        x.setflags(write=False)
        object.__setattr__(self, "nodes", x)

    @property
    def realized_h(self) -> float:
        return float(np.diff(self.nodes).max())

    @property
    def n_elements(self) -> int:
        return self.nodes.size - 1


def adaptive_mesh_1d(partition: Partition1D | None, h_bar: float) -> Mesh1D:
    """Interface-fitted mesh: each cell split into ceil(length / h_bar) equal pieces."""
    if not h_bar > 0:
        raise MeshError("h_bar must be positive")
    edges = partition.edges if partition is not None else np.array([0.0, 1.0])
    lengths = np.diff(edges)
    if np.any(lengths < MIN_SPACING):
        raise MeshError("breakpoints closer than 1e-12")
    counts = np.maximum(np.ceil(lengths / h_bar * (1.0 - 1e-14)).astype(int), 1)
    pieces = [np.linspace(a, b, k + 1)[:-1] for a, b, k in zip(edges[:-1], edges[1:], counts)]
    nodes = np.concatenate(pieces + [[1.0]])
    # linspace can land a hair off the breakpoint; pin interfaces exactly
    starts = np.concatenate([[0], np.cumsum(counts)])
    nodes[starts] = edges
    return Mesh1D(nodes, interface_conforming=True)


def uniform_mesh_1d(h: float) -> Mesh1D:
    n = int(round(1.0 / h))
    if n < 1 or abs(n * h - 1.0) > 1e-12:
        raise MeshError("1/h must be an integer")
    return Mesh1D(np.arange(n + 1) / n, interface_conforming=False)


@dataclass(frozen=True)
class Solution1D:
    mesh: Mesh1D
    values: np.ndarray

    def __call__(self, x) -> np.ndarray:
        return np.interp(x, self.mesh.nodes, self.values)

    def gradient(self, x) -> np.ndarray:
        nodes = self.mesh.nodes
        k = np.clip(np.searchsorted(nodes, x, side="right") - 1, 0, nodes.size - 2)
        return np.diff(self.values)[k] / np.diff(nodes)[k]


def _as_callable(f) -> Callable:
    if callable(f):
        return f
    c = float(f)
    return lambda x: np.full(np.shape(x), c)


def assemble_1d(coeff: CoefficientSample, f, mesh: Mesh1D, quadrature: str = "midpoint"):
    """Banded interior stiffness (upper form) and load vector."""
    x = mesh.nodes
    h = np.diff(x)
    f = _as_callable(f)
    if quadrature == "midpoint":
        mid = 0.5 * (x[:-1] + x[1:])
        abar = coeff(mid)
        fm = np.asarray(f(mid), dtype=float)
        load_l = load_r = 0.5 * fm * h
    elif quadrature == "gauss5":
        t = 0.5 * (_GL5_X + 1.0)
        w = 0.5 * _GL5_W
        pts = x[:-1, None] + h[:, None] * t
        abar = coeff(pts) @ w
        fq = np.asarray(f(pts), dtype=float)
        load_l = h * ((fq * (1.0 - t)) @ w)
        load_r = h * ((fq * t) @ w)
    else:
        raise ValueError(f"unknown quadrature {quadrature!r}")
    k = abar / h
    diag = k[:-1] + k[1:]
    off = -k[1:-1]
    rhs = load_r[:-1] + load_l[1:]
    return diag, off, rhs


def assemble_solve_1d(coeff: CoefficientSample, f, mesh: Mesh1D, quadrature: str = "midpoint") -> Solution1D:
    diag, off, rhs = assemble_1d(coeff, f, mesh, quadrature)
    n = diag.size
    values = np.zeros(mesh.nodes.size)
    if n == 0:
        return Solution1D(mesh, values)
    if np.any(diag <= 0):
        raise AssemblyError("non-positive diagonal entry in the stiffness matrix")
    ab = np.zeros((2, n))
    ab[0, 1:] = off
    ab[1] = diag
    try:
        c = rhs / diag if n == 1 else solveh_banded(ab, rhs, check_finite=False)
    except LinAlgError as exc:
        raise AssemblyError(f"stiffness matrix not positive definite: {exc}") from exc
    res = diag * c - rhs
    res[:-1] += off * c[1:]
    res[1:] += off * c[:-1]
    # normwise backward error: |r| <= tol (|A| |c| + |F|)
    a_norm = np.abs(diag).max() + 2.0 * (np.abs(off).max() if off.size else 0.0)
    scale = max(a_norm * np.abs(c).max() + np.abs(rhs).max(), np.finfo(float).tiny)
    if np.abs(res).max() > 1e-10 * scale:
        raise AssemblyError(f"residual {np.abs(res).max():.2e} exceeds tolerance")
    values[1:-1] = c
    return Solution1D(mesh, values)


def prolong_1d(sol: Solution1D, grid=REF_GRID_1D) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if np.any(grid < 0) or np.any(grid > 1):
        raise ValueError("reference grid must lie in [0, 1]")
    return np.interp(grid, sol.mesh.nodes, sol.values)


def h1_dist(f, g, grid=REF_GRID_1D) -> float:
    """Discrete H1 distance: trapezoid L2 part, forward-difference gradient part."""
    d = np.asarray(f, dtype=float) - np.asarray(g, dtype=float)
    grid = np.asarray(grid, dtype=float)
    dx = np.diff(grid)
    l2 = np.sum(0.5 * (d[:-1] ** 2 + d[1:] ** 2) * dx)
    grad = np.sum((np.diff(d) / dx) ** 2 * dx)
    return float(math.sqrt(l2 + grad))


def h1_norm_sq_batch(d, grid=REF_GRID_1D) -> np.ndarray:
    """Squared discrete H1 norms of the rows of ``d``."""
    d = np.atleast_2d(d)
    dx = np.diff(grid)
    l2 = (0.5 * (d[:, :-1] ** 2 + d[:, 1:] ** 2)) @ dx
    grad = (np.diff(d, axis=1) ** 2) @ (1.0 / dx)
    return l2 + grad


# ---------------------------------------------------------------- quadrature oracle

class OracleSolution1D:
    """Reference solution from u'(x) = (C - F(x)) / a(x), F(x) = int_0^x f.

    Integrals use Gauss-Legendre panels that never straddle a breakpoint.
    """

    def __init__(self, coeff: CoefficientSample, f, points: int = 64, panels_per_unit: int | None = None):
        if points < 64:
            raise ValueError("the oracle needs at least 64 points per panel")
        self.coeff = coeff
        self.f = _as_callable(f)
        # constant sources integrate in closed form
        self._f_const = None if callable(f) else float(f)
        if panels_per_unit is None:
            n_modes = coeff.field.cutoff if coeff.field is not None else 0
            panels_per_unit = max(4, int(math.ceil(n_modes / 4)))
        edges = coeff.partition.edges if coeff.partition is not None else np.array([0.0, 1.0])
        knots = [np.linspace(a, b, max(1, int(math.ceil((b - a) * panels_per_unit))) + 1)[:-1]
                 for a, b in zip(edges[:-1], edges[1:])]
        self.knots = np.concatenate(knots + [[1.0]])
        C1 = self._solve(points)
        C2 = self._solve(2 * points)
        if abs(C1[0] - C2[0]) > 1e-10 * max(1.0, abs(C2[0])):
            raise OracleResolutionError(f"flux constant changed by {abs(C1[0] - C2[0]):.2e} when doubling points")
        self.points = 2 * points
        self.C, self._F_knots, self._U_knots = C2

    def _gl(self, lo, hi, n):
        t, w = np.polynomial.legendre.leggauss(n)
        half = 0.5 * (hi - lo)
        return (0.5 * (hi + lo))[:, None] + half[:, None] * t, half[:, None] * w

    def _solve(self, n):
        lo, hi = self.knots[:-1], self.knots[1:]
        x, w = self._gl(lo, hi, n)
        F_knots = np.concatenate([[0.0], np.cumsum(np.sum(self.f(x) * w, axis=1))])
        # F at the quadrature nodes: panel start value plus partial integral
        F_x = F_knots[:-1, None] + self._partial(self.f, lo, x, n)
        inv_a = 1.0 / self.coeff(x)
        C = np.sum(F_x * inv_a * w) / np.sum(inv_a * w)
        U_knots = np.concatenate([[0.0], np.cumsum(np.sum((C - F_x) * inv_a * w, axis=1))])
        return C, F_knots, U_knots

    def _partial(self, g, lo, x, n):
        # int_{lo_j}^{x_jk} g for every node x_jk of panel j
        t, w = np.polynomial.legendre.leggauss(n)
        half = 0.5 * (x - lo[:, None])
        pts = (0.5 * (x + lo[:, None]))[..., None] + half[..., None] * t
        return np.sum(g(pts) * w, axis=-1) * half

    def _panel(self, x):
        return np.clip(np.searchsorted(self.knots, x, side="right") - 1, 0, self.knots.size - 2)

    def _chunked(self, fn, x):
        x = np.asarray(x, dtype=float)
        if x.size <= _ORACLE_CHUNK:
            return fn(x)
        flat = x.ravel()
        out = np.concatenate([fn(flat[i:i + _ORACLE_CHUNK]) for i in range(0, flat.size, _ORACLE_CHUNK)])
        return out.reshape(x.shape)

    def _F(self, x):
        x = np.asarray(x, dtype=float)
        if self._f_const is not None:
            return self._f_const * x
        j = self._panel(x)
        lo = self.knots[j]
        t, w = np.polynomial.legendre.leggauss(self.points)
        half = 0.5 * (x - lo)
        pts = (0.5 * (x + lo))[..., None] + half[..., None] * t
        return self._F_knots[j] + np.sum(self.f(pts) * w, axis=-1) * half

    def du(self, x) -> np.ndarray:
        return self._chunked(self._du, x)

    def _du(self, x):
        return (self.C - self._F(x)) / self.coeff(x)

    def __call__(self, x) -> np.ndarray:
        return self._chunked(self._u, x)

    def _u(self, x):
        j = self._panel(x)
        lo = self.knots[j]
        t, w = np.polynomial.legendre.leggauss(self.points)
        half = 0.5 * (x - lo)
        pts = (0.5 * (x + lo))[..., None] + half[..., None] * t
        return self._U_knots[j] + np.sum(self.du(pts) * w, axis=-1) * half


def oracle_solve_1d(coeff: CoefficientSample, f, points: int = 64, panels_per_unit: int | None = None) -> OracleSolution1D:
    return OracleSolution1D(coeff, f, points, panels_per_unit)


def h1_error_vs_oracle(sol: Solution1D, oracle: OracleSolution1D, points: int = 8) -> float:
    """Exact-geometry H1 error: Gauss-Legendre on every element piece between
    mesh nodes and partition breakpoints."""
    part = oracle.coeff.partition
    cuts = sol.mesh.nodes if part is None else np.union1d(sol.mesh.nodes, part.breakpoints)
    lo, hi = cuts[:-1], cuts[1:]
    t, w = np.polynomial.legendre.leggauss(points)
    half = 0.5 * (hi - lo)
    x = (0.5 * (hi + lo))[:, None] + half[:, None] * t
    ww = half[:, None] * w
    # nodes strictly inside pieces, so the piecewise gradient is unambiguous
    e0 = sol(x) - oracle(x)
    e1 = sol.gradient(x) - oracle.du(x)
    return float(math.sqrt(np.sum((e0**2 + e1**2) * ww)))


def dump_solution_csv(path, sol: Solution1D) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x,u\n")
        for x, u in zip(sol.mesh.nodes, sol.values):
            fh.write(f"{x:.12g},{u:.12g}\n")
