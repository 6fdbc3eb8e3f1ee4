"""Exact polynomial quadrature on edges, planar polygons and polyhedra.

Faces are fanned into triangles from their star center and cells into
tetrahedra from the cell star center; collapsed Gauss-Legendre rules on
the sub-simplices give exactness to any requested degree.  The
sub-tessellation exists only inside the quadrature rules, it never
enters the definition of any discrete space.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from sfvem.mesh import MeshGeometryError, PolyhedralMesh

EntityRef = tuple[str, int]


@dataclass(frozen=True)
class QuadratureRule:
    """Points, weights and the polynomial degree integrated exactly."""

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def measure(self) -> float:
        return float(self.weights.sum())

    def integrate(self, f) -> float:
        vals = f(self.points)
        return float(self.weights @ np.asarray(vals))


@lru_cache(maxsize=64)
def _gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


def edge_rule(mesh: PolyhedralMesh, e: int, degree: int) -> QuadratureRule:
    a, b = mesh.edges[e]
    va, vb = mesh.vertices[a], mesh.vertices[b]
    n = max(1, (degree + 2) // 2)
    x, w = _gauss_legendre(n)
    pts = 0.5 * (1 - x)[:, None] * va + 0.5 * (1 + x)[:, None] * vb
    length = np.linalg.norm(vb - va)
    return QuadratureRule(pts, 0.5 * length * w, degree)


def _triangle_points(v0, v1, v2, degree):
    """Collapsed tensor Gauss rule on a 3D triangle, exact to ``degree``."""
    na = max(1, (degree + 3) // 2)
    nb = max(1, (degree + 2) // 2)
    xa, wa = _gauss_legendre(na)
    xb, wb = _gauss_legendre(nb)
    a = 0.5 * (xa + 1.0)
    b = 0.5 * (xb + 1.0)
    wa = 0.5 * wa
    wb = 0.5 * wb
    A, B = np.meshgrid(a, b, indexing="ij")
    WA, WB = np.meshgrid(wa, wb, indexing="ij")
    pts = (
        (1 - A)[..., None] * v0
        + (A * (1 - B))[..., None] * v1
        + (A * B)[..., None] * v2
    )
    area2 = np.linalg.norm(np.cross(v1 - v0, v2 - v0))
    w = area2 * A * WA * WB
    return pts.reshape(-1, 3), w.ravel()


def face_rule(mesh: PolyhedralMesh, f: int, degree: int) -> QuadratureRule:
    center = mesh.face_star_center[f]
    loop = mesh.faces[f]
    if mesh.face_kernel_radius[f] <= 0:
        raise MeshGeometryError(f"face {f} is not star-shaped; no quadrature rule")
    pts_all = []
    w_all = []
    unit = mesh.face_normal[f]
    verts = mesh.vertices[list(loop)]
    for i in range(len(loop)):
        v1 = verts[i]
        v2 = verts[(i + 1) % len(loop)]
        pts, w = _triangle_points(center, v1, v2, degree)
        # signed area relative to the face normal keeps fans exact even
        # when the star center sits outside a nonconvex corner
        sgn = np.sign(np.dot(np.cross(v1 - center, v2 - center), unit))
        pts_all.append(pts)
        w_all.append(sgn * w)
    return QuadratureRule(np.vstack(pts_all), np.concatenate(w_all), degree)


def _tet_points(v0, v1, v2, v3, degree):
    """Collapsed tensor Gauss rule on a tetrahedron, exact to ``degree``."""
    na = max(1, (degree + 4) // 2)
    nb = max(1, (degree + 3) // 2)
    nc = max(1, (degree + 2) // 2)
    xa, wa = _gauss_legendre(na)
    xb, wb = _gauss_legendre(nb)
    xc, wc = _gauss_legendre(nc)
    a = 0.5 * (xa + 1.0)
    b = 0.5 * (xb + 1.0)
    c = 0.5 * (xc + 1.0)
    wa, wb, wc = 0.5 * wa, 0.5 * wb, 0.5 * wc
    A, B, C = np.meshgrid(a, b, c, indexing="ij")
    WA, WB, WC = np.meshgrid(wa, wb, wc, indexing="ij")
    pts = (
        (1 - A)[..., None] * v0
        + (A * (1 - B))[..., None] * v1
        + (A * B * (1 - C))[..., None] * v2
        + (A * B * C)[..., None] * v3
    )
    vol6 = np.dot(np.cross(v1 - v0, v2 - v0), v3 - v0)
    w = vol6 * A * A * B * WA * WB * WC
    return pts.reshape(-1, 3), w.ravel()


def cell_rule(mesh: PolyhedralMesh, ci: int, degree: int) -> QuadratureRule:
    if mesh.cell_kernel_radius[ci] <= 0:
        raise MeshGeometryError(f"cell {ci} is not star-shaped; no quadrature rule")
    apex = mesh.cell_star_center[ci]
    pts_all = []
    w_all = []
    for f, s in mesh.cells[ci]:
        loop = mesh.faces[f] if s == 1 else tuple(reversed(mesh.faces[f]))
        verts = mesh.vertices[list(loop)]
        center = mesh.face_star_center[f]
        for i in range(len(loop)):
            v1 = verts[i]
            v2 = verts[(i + 1) % len(loop)]
            pts, w = _tet_points(apex, center, v1, v2, degree)
            pts_all.append(pts)
            w_all.append(w)
    return QuadratureRule(np.vstack(pts_all), np.concatenate(w_all), degree)


def rule_for(mesh: PolyhedralMesh, entity: EntityRef, degree: int) -> QuadratureRule:
    """Quadrature rule on a mesh entity, exact for polynomials to ``degree``."""
    kind, idx = entity
    if kind == "edge":
        return edge_rule(mesh, idx, degree)
    if kind == "face":
        return face_rule(mesh, idx, degree)
    if kind == "cell":
        return cell_rule(mesh, idx, degree)
    raise ValueError(f"unknown entity kind {kind!r}")


def inner_product(f, g, rule: QuadratureRule) -> float:
    """L2 inner product of two callables (or constants) under a rule."""
    fv = f(rule.points) if callable(f) else f
    gv = g(rule.points) if callable(g) else g
    fv = np.asarray(fv, dtype=float)
    gv = np.asarray(gv, dtype=float)
    if fv.ndim <= 1 and gv.ndim <= 1:
        return float(rule.weights @ (fv * gv))
    # vector fields come as (n_points, 3)
    return float(rule.weights @ np.sum(fv * gv, axis=-1))
