"""P1 finite elements on the unit square."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
import scipy.sparse as sp
import triangle
from scipy.sparse.linalg import cg

from .coefficient import CoefficientSample
from .jumps import LinePartition2D

REF_N_2D = 400
REF_AXIS_2D = np.linspace(0.0, 1.0, REF_N_2D)
BOUNDARY_TOL = 1e-12
DEFAULT_MIN_ANGLE = 15.0
# initial area bound relative to h_bar^2; usually meets the diameter bound at once
AREA_FACTOR = 0.2

DIRICHLET = "dirichlet"
NEUMANN = "neumann"


class MeshQualityError(RuntimeError):
    pass


class SolverError(RuntimeError):
    pass


def _as_callable(f) -> Callable:
    if callable(f):
        return f
    c = float(f)
    return lambda x: np.full(np.shape(x)[:-1], c)


def triangle_angles(vertices, triangles) -> np.ndarray:
    p = vertices[triangles]
    out = np.empty(triangles.shape)
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        cosv = np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
        out[:, k] = np.degrees(np.arccos(np.clip(cosv, -1.0, 1.0)))
    return out


def unique_edges(triangles) -> tuple[np.ndarray, np.ndarray]:
    """Sorted vertex pairs of all edges and how many triangles use each."""
    e = np.sort(np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]), axis=1)
    edges, counts = np.unique(e, axis=0, return_counts=True)
    return edges, counts


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    interface_conforming: bool = False
    boundary_edges: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        # orient counter-clockwise
        p = v[t]
        det = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
        if np.any(det == 0):
            raise MeshQualityError("degenerate triangle")
        t[det < 0] = t[det < 0][:, [0, 2, 1]]
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        edges, counts = unique_edges(t)
        be = edges[counts == 1]
        be.setflags(write=False)
        object.__setattr__(self, "boundary_edges", be)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def realized_h(self) -> float:
        p = self.vertices[self.triangles]
        d = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
        return float(np.sqrt((d**2).sum(axis=2)).max())

    @property
    def min_angle(self) -> float:
        return float(triangle_angles(self.vertices, self.triangles).min())

    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def boundary_tags(self, dirichlet_sides=("left", "right", "bottom", "top")) -> np.ndarray:
        """Tag each boundary edge as Dirichlet or Neumann by the side it lies on."""
        mid = self.vertices[self.boundary_edges].mean(axis=1)
        side = {
            "left": np.abs(mid[:, 0]) < BOUNDARY_TOL,
            "right": np.abs(mid[:, 0] - 1.0) < BOUNDARY_TOL,
            "bottom": np.abs(mid[:, 1]) < BOUNDARY_TOL,
            "top": np.abs(mid[:, 1] - 1.0) < BOUNDARY_TOL,
        }
        dir_mask = np.zeros(mid.shape[0], dtype=bool)
        for s in dirichlet_sides:
            dir_mask |= side[s]
        return np.where(dir_mask, DIRICHLET, NEUMANN)


# ---------------------------------------------------------------- meshes

def _pslg(partition: LinePartition2D | None):
    """Corner grid of the arrangement and the segments between neighbours."""
    if partition is None:
        P = np.array([[[0.0, 0.0], [1.0, 0.0]], [[0.0, 1.0], [1.0, 1.0]]])
    else:
        P = partition.corners
    nb, ns = P.shape[0], P.shape[1]
    idx = np.arange(nb * ns).reshape(nb, ns)
    segs = [np.column_stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()]),
            np.column_stack([idx[:-1, :].ravel(), idx[1:, :].ravel()])]
    return np.array(P.reshape(-1, 2)), np.concatenate(segs).astype(np.int32)


def input_min_angle(partition: LinePartition2D | None) -> float:
    """Smallest angle between segments meeting at a vertex of the arrangement."""
    verts, segs = _pslg(partition)
    best = 180.0
    for k in range(verts.shape[0]):
        nbrs = np.concatenate([segs[segs[:, 0] == k, 1], segs[segs[:, 1] == k, 0]])
        d = verts[nbrs] - verts[k]
        ang = np.sort(np.arctan2(d[:, 1], d[:, 0]))
        gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))
        if nbrs.size >= 2:
            best = min(best, float(np.degrees(gaps.min())))
    return best


def triangulate_conforming(partition: LinePartition2D | None, h_bar: float,
                           theta_min: float = DEFAULT_MIN_ANGLE) -> TriMesh:
    """Quality constrained Delaunay triangulation of the arrangement.

    Every chord piece between crossings is an input segment, so chords are
    unions of mesh edges. The area bound is halved until the longest edge is
    at most ``h_bar``. Next to an input angle phi the Delaunay refinement can
    only guarantee arctan(sin phi / (2 - cos phi)), so the bound is relaxed to
    that value when it falls below ``theta_min``.
    """
    if not h_bar > 0:
        raise ValueError("h_bar must be positive")
    verts, segs = _pslg(partition)
    theta_eff = min(theta_min, small_angle_bound(input_min_angle(partition)))
    q0 = min(max(theta_min, 20.0), 33.0)
    # the outcome near acute input corners depends erratically on the quality
    # switch, so a few values are tried before giving up
    mesh = None
    for q in [q0] + [q for q in _Q_RETRY if q != q0]:
        mesh = _refine_to_diameter(verts, segs, h_bar, q)
        if mesh.min_angle >= theta_eff - 1e-6:
            return mesh
    raise MeshQualityError(f"minimum angle {mesh.min_angle:.3f} below {theta_eff:.3f} degrees")


_Q_RETRY = (22.0, 21.0, 23.0, 25.0, 18.0, 28.0, 30.0, 33.0)


def small_angle_bound(phi: float) -> float:
    """Smallest angle (degrees) Delaunay refinement guarantees next to an input angle ``phi``."""
    r = math.radians(phi)
    return math.degrees(math.atan(math.sin(r) / (2.0 - math.cos(r))))


def _refine_to_diameter(verts, segs, h_bar, q) -> TriMesh:
    area = AREA_FACTOR * h_bar**2
    for _ in range(60):
        out = triangle.triangulate({"vertices": verts, "segments": segs}, f"pq{q:.6f}a{area:.20f}Q")
        mesh = TriMesh(out["vertices"], out["triangles"], interface_conforming=True)
        h = mesh.realized_h
        if h <= h_bar:
            return mesh
        area *= min(0.8, 0.95 * (h_bar / h) ** 2)
    raise MeshQualityError("could not meet the diameter bound")


def uniform_tri_mesh(h: float) -> TriMesh:
    """n x n squares, n = ceil(sqrt(2)/h), each split along its diagonal."""
    n = int(math.ceil(math.sqrt(2.0) / h - 1e-12))
    return _uniform_tri_mesh(n)


@lru_cache(maxsize=16)
def _uniform_tri_mesh(n: int) -> TriMesh:
    g = np.arange(n + 1) / n
    X, Y = np.meshgrid(g, g, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    v00 = (j * (n + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    tris = np.concatenate([np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])])
    return TriMesh(verts, tris, interface_conforming=False)


# ---------------------------------------------------------------- assembly

@dataclass(frozen=True)
class MixedBC:
    """Boundary data: Dirichlet values on the listed sides, Neumann flux elsewhere."""

    dirichlet_sides: tuple = ("left", "right", "bottom", "top")
    dirichlet_value: Callable | float = 0.0
    neumann_flux: Callable | float = 0.0


HOMOGENEOUS_DIRICHLET = MixedBC()
# u = 0.1 on x1 = 0, u = 0.3 on x1 = 1, zero flux on top and bottom
FLOW_BC = MixedBC(("left", "right"), lambda x: 0.1 + 0.2 * x[..., 0], 0.0)


def _gradients(mesh: TriMesh):
    p = mesh.vertices[mesh.triangles]
    area = mesh.areas()
    # grad of barycentric k is the rotated opposite edge over 2|K|
    e0 = p[:, 2] - p[:, 1]
    e1 = p[:, 0] - p[:, 2]
    e2 = p[:, 1] - p[:, 0]
    E = np.stack([e0, e1, e2], axis=1)
    G = np.stack([-E[..., 1], E[..., 0]], axis=-1) / (2.0 * area)[:, None, None]
    return G, area


def assemble_2d(coeff: CoefficientSample, f, mesh: TriMesh, quadrature: str = "centroid"):
    G, area = _gradients(mesh)
    tri = mesh.triangles
    f = _as_callable(f)
    if quadrature == "centroid":
        c = mesh.centroids()
        a = coeff(c)
        fc = np.asarray(f(c), dtype=float)
        load = np.repeat((fc * area / 3.0)[:, None], 3, axis=1)
    elif quadrature == "edge-midpoint":
        p = mesh.vertices[tri]
        mids = 0.5 * (p + p[:, [1, 2, 0]])
        a = coeff(mids).mean(axis=1)
        fm = np.asarray(f(mids), dtype=float)
        # basis k is 1/2 at the two midpoints touching vertex k, 0 at the third
        load = np.stack([(fm[:, 0] + fm[:, 2]), (fm[:, 0] + fm[:, 1]), (fm[:, 1] + fm[:, 2])], axis=1) * (area / 6.0)[:, None]
    else:
        raise ValueError(f"unknown quadrature {quadrature!r}")
    Ke = (a * area)[:, None, None] * np.einsum("tik,tjk->tij", G, G)
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.n_vertices
    A = sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(n, n))
    b = np.bincount(tri.ravel(), weights=load.ravel(), minlength=n)
    return A, b


def assemble_solve_2d(coeff: CoefficientSample, f, mesh: TriMesh, bc: MixedBC = HOMOGENEOUS_DIRICHLET,
                      quadrature: str = "centroid", rtol: float = 1e-10) -> np.ndarray:
    """Nodal values of the P1 Galerkin solution."""
    A, b = assemble_2d(coeff, f, mesh, quadrature)
    n = mesh.n_vertices
    tags = mesh.boundary_tags(bc.dirichlet_sides)
    be = mesh.boundary_edges
    neu = be[tags == NEUMANN]
    if neu.size:
        g = _as_callable(bc.neumann_flux)
        pv = mesh.vertices[neu]
        gm = np.asarray(g(pv.mean(axis=1)), dtype=float)
        length = np.linalg.norm(pv[:, 1] - pv[:, 0], axis=1)
        b += np.bincount(neu.ravel(), weights=np.repeat(0.5 * gm * length, 2), minlength=n)
    dnodes = np.unique(be[tags == DIRICHLET])
    u = np.zeros(n)
    if dnodes.size:
        u[dnodes] = np.asarray(_as_callable(bc.dirichlet_value)(mesh.vertices[dnodes]), dtype=float)
    free = np.setdiff1d(np.arange(n), dnodes, assume_unique=True)
    if free.size == 0:
        return u
    Aff = A[free][:, free]
    rhs = b[free] - A[free][:, dnodes] @ u[dnodes]
    d = Aff.diagonal()
    if np.any(d <= 0):
        raise SolverError("non-positive diagonal entry in the stiffness matrix")
    M = sp.diags(1.0 / d)
    if np.all(rhs == 0):
        return u
    x, info = cg(Aff, rhs, rtol=rtol, atol=0.0, maxiter=20 * free.size, M=M)
    if info != 0:
        raise SolverError(f"CG did not converge in {20 * free.size} iterations "
                          f"(dof {free.size}, diagonal range {d.min():.3e}..{d.max():.3e})")
    u[free] = x
    return u


# ---------------------------------------------------------------- prolongation

def _raster(mesh: TriMesh, axis):
    """Grid points in each triangle's bounding box with their barycentrics.

    Returns flat grid ids (x1 index slowest), the candidate triangle ids,
    the three barycentric coordinates and the inside mask.
    """
    n = axis.size
    step = axis[1] - axis[0]
    p = mesh.vertices[mesh.triangles]
    tol = 1e-10
    lo = np.clip(np.ceil((p.min(axis=1) - axis[0] - tol) / step).astype(np.int64), 0, n - 1)
    hi = np.clip(np.floor((p.max(axis=1) - axis[0] + tol) / step).astype(np.int64), 0, n - 1)
    ny = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    cnt = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0) * ny
    # barycentrics as affine functions of the point, per triangle
    a, b, c = p[:, 0], p[:, 1], p[:, 2]
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    k1x = (c[:, 1] - a[:, 1]) / det
    k1y = -(c[:, 0] - a[:, 0]) / det
    k2x = -(b[:, 1] - a[:, 1]) / det
    k2y = (b[:, 0] - a[:, 0]) / det
    k1 = -(k1x * a[:, 0] + k1y * a[:, 1])
    k2 = -(k2x * a[:, 0] + k2y * a[:, 1])
    tid = np.repeat(np.arange(len(p)), cnt)
    offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    nyr = np.repeat(ny, cnt)
    ix = np.repeat(lo[:, 0], cnt) + offs // nyr
    iy = np.repeat(lo[:, 1], cnt) + offs % nyr
    px, py = axis[ix], axis[iy]
    l1 = np.repeat(k1, cnt) + np.repeat(k1x, cnt) * px + np.repeat(k1y, cnt) * py
    l2 = np.repeat(k2, cnt) + np.repeat(k2x, cnt) * px + np.repeat(k2y, cnt) * py
    l0 = 1.0 - l1 - l2
    inside = (l0 >= -tol) & (l1 >= -tol) & (l2 >= -tol)
    return ix * n + iy, tid, l0, l1, l2, inside


def prolongation_matrix(mesh: TriMesh, axis=REF_AXIS_2D) -> sp.csr_matrix:
    """Sparse barycentric interpolation from mesh vertices to a tensor grid.

    Grid points are flattened with x1 varying slowest (``ij`` indexing).
    A grid point on a shared edge takes the first containing triangle.
    """
    axis = np.asarray(axis, dtype=float)
    n = axis.size
    gid, tid, l0, l1, l2, inside = _raster(mesh, axis)
    gid, first = np.unique(gid[inside], return_index=True)
    if gid.size != n * n:
        raise MeshQualityError(f"{n * n - gid.size} grid points not covered by the mesh")
    lam = np.column_stack([l0[inside], l1[inside], l2[inside]])[first]
    tri = mesh.triangles[tid[inside][first]]
    return sp.csr_matrix((lam.ravel(), (np.repeat(gid, 3), tri.ravel())), shape=(n * n, mesh.n_vertices))


def _prolong_direct(mesh: TriMesh, values, axis) -> np.ndarray:
    # a point on a shared edge gets the same value from every containing
    # triangle (up to rounding), so the write order does not matter
    n = axis.size
    gid, tid, l0, l1, l2, inside = _raster(mesh, axis)
    uv = np.asarray(values, dtype=float)[mesh.triangles]
    cnt = np.bincount(tid, minlength=len(uv))
    val = l0 * np.repeat(uv[:, 0], cnt) + l1 * np.repeat(uv[:, 1], cnt) + l2 * np.repeat(uv[:, 2], cnt)
    out = np.full(n * n, np.nan)
    out[gid[inside]] = val[inside]
    if np.isnan(out).any():
        raise MeshQualityError(f"{int(np.isnan(out).sum())} grid points not covered by the mesh")
    return out


@lru_cache(maxsize=8)
def _uniform_prolongation(n: int, n_ref: int) -> sp.csr_matrix:
    return prolongation_matrix(_uniform_tri_mesh(n), np.linspace(0.0, 1.0, n_ref))


def cached_prolongation(mesh: TriMesh, n_ref: int = REF_N_2D) -> sp.csr_matrix:
    """Prolongation matrix, cached for structured meshes."""
    if not mesh.interface_conforming:
        n = int(round(math.sqrt(mesh.n_vertices))) - 1
        if (n + 1) ** 2 == mesh.n_vertices and mesh is _uniform_tri_mesh(n):
            return _uniform_prolongation(n, n_ref)
    return prolongation_matrix(mesh, np.linspace(0.0, 1.0, n_ref))


def prolong_2d(mesh: TriMesh, values, n_ref: int = REF_N_2D) -> np.ndarray:
    """Values on the n_ref x n_ref grid, shape (n_ref, n_ref) indexed [i1, i2]."""
    if not mesh.interface_conforming:
        n = int(round(math.sqrt(mesh.n_vertices))) - 1
        if (n + 1) ** 2 == mesh.n_vertices and mesh is _uniform_tri_mesh(n):
            return (_uniform_prolongation(n, n_ref) @ np.asarray(values, dtype=float)).reshape(n_ref, n_ref)
    return _prolong_direct(mesh, values, np.linspace(0.0, 1.0, n_ref)).reshape(n_ref, n_ref)


def locate_brute_force(mesh: TriMesh, pts) -> np.ndarray:
    """Index of a triangle containing each point (all-triangle scan)."""
    pts = np.asarray(pts, dtype=float)
    p = mesh.vertices[mesh.triangles]
    out = np.full(len(pts), -1)
    for k, q in enumerate(pts):
        a, b, c = p[:, 0], p[:, 1], p[:, 2]
        d1 = (b[:, 0] - a[:, 0]) * (q[1] - a[:, 1]) - (q[0] - a[:, 0]) * (b[:, 1] - a[:, 1])
        d2 = (c[:, 0] - b[:, 0]) * (q[1] - b[:, 1]) - (q[0] - b[:, 0]) * (c[:, 1] - b[:, 1])
        d3 = (a[:, 0] - c[:, 0]) * (q[1] - c[:, 1]) - (q[0] - c[:, 0]) * (a[:, 1] - c[:, 1])
        hit = np.flatnonzero((d1 >= -1e-12) & (d2 >= -1e-12) & (d3 >= -1e-12))
        out[k] = hit[0] if hit.size else -1
    return out


def h1_dist_2d(f, g, axis=REF_AXIS_2D) -> float:
    """Discrete H1 distance on a tensor grid: trapezoid rule, central differences."""
    return float(math.sqrt(h1_norm_sq_2d(np.asarray(f, dtype=float) - np.asarray(g, dtype=float), axis)))


def _trap_weights(axis):
    w = np.zeros(axis.size)
    d = np.diff(axis)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


def h1_norm_sq_2d(d, axis=REF_AXIS_2D) -> float:
    d = np.asarray(d, dtype=float)
    w = _trap_weights(np.asarray(axis))
    W = np.outer(w, w)
    g1, g2 = np.gradient(d, axis, axis)
    return float(np.sum(W * (d**2 + g1**2 + g2**2)))


def dump_mesh_csv(prefix, mesh: TriMesh) -> None:
    with open(f"{prefix}_vertices.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x,y\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.12g},{y:.12g}\n")
    with open(f"{prefix}_triangles.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("v0,v1,v2\n")
        for t in mesh.triangles:
            fh.write(f"{t[0]},{t[1]},{t[2]}\n")
