"""Polyhedral mesh data model: ingestion, orientation, frames, regularity.

A mesh is a collection of vertices, planar face loops and cells given as
signed face references.  Everything derived (edges, normals, centroids,
diameters, star centers) is computed once at construction time and the
object is treated as immutable afterwards, so concurrent read access
from per-element loops is safe.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

PLANARITY_TOL = 1e-9  # relative to the face diameter


class MeshError(Exception):
    """Base class for mesh construction failures."""


class MeshFormatError(MeshError):
    """Input file does not parse under the mesh format grammar."""


class MeshTopologyError(MeshError):
    """Cell surfaces are not closed or edges are inconsistently oriented."""


class MeshGeometryError(MeshError):
    """Degenerate or non-planar geometry beyond tolerance."""


@dataclass(frozen=True)
class LocalFrame:
    """Orthonormal frame attached to a mesh entity.

    ``axes`` has one row per local coordinate: the edge tangent for edges,
    two in-plane tangents for faces, the global axes for cells.  For faces
    the frame is right-handed with the stored normal: t1 x t2 = n.
    Local (scaled) coordinates of a point x are ``axes @ (x - origin) / h``.
    """

    origin: np.ndarray
    axes: np.ndarray
    h: float
    normal: np.ndarray | None = None

    def local_coords(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        return (pts - self.origin) @ self.axes.T / self.h


@dataclass
class RegularityReport:
    """Outcome of the shape-regularity check.

    ``rho`` is the largest radius fraction for which every clause holds:
    cells star-shaped w.r.t. a ball of radius rho*h_K, faces w.r.t. a disk
    of radius rho*h_F, and h_E >= rho*h_F >= rho^2*h_K for all edges.
    """

    rho_min: float
    rho: float
    cell_rho: np.ndarray
    face_rho: np.ndarray
    cell_h: np.ndarray
    face_h: np.ndarray
    edge_h: np.ndarray
    clause_star_cells: bool
    clause_star_faces: bool
    clause_ratios: bool

    @property
    def passed(self) -> bool:
        return bool(
            self.clause_star_cells and self.clause_star_faces and self.clause_ratios
        )


def _polygon_area_normal(pts: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Area, unit normal (Newell) and area centroid of a planar polygon."""
    ref = pts.mean(axis=0)
    n_acc = np.zeros(3)
    c_acc = np.zeros(3)
    a_acc = 0.0
    for i in range(len(pts)):
        a = pts[i] - ref
        b = pts[(i + 1) % len(pts)] - ref
        cr = np.cross(a, b)
        n_acc += cr
    normal = n_acc / 2.0
    area = np.linalg.norm(normal)
    if area <= 0.0:
        raise MeshGeometryError("degenerate face with zero area")
    unit = normal / area
    for i in range(len(pts)):
        a = pts[i] - ref
        b = pts[(i + 1) % len(pts)] - ref
        tri_area = 0.5 * np.dot(np.cross(a, b), unit)
        tri_centroid = (ref + pts[i] + pts[(i + 1) % len(pts)]) / 3.0
        a_acc += tri_area
        c_acc += tri_area * tri_centroid
    return a_acc, unit, c_acc / a_acc


def _diameter(pts: np.ndarray) -> float:
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    return float(np.sqrt(d2.max()))


def _chebyshev_radius(normals: np.ndarray, offsets: np.ndarray) -> tuple[float, np.ndarray]:
    """Largest inscribed ball in the halfspace intersection n.x <= b.

    Maximizes r subject to n_i . x + r <= b_i, returning (r, center).
    r <= 0 means the region has empty interior (not star-shaped).
    """
    dim = normals.shape[1]
    c = np.zeros(dim + 1)
    c[-1] = -1.0
    a_ub = np.hstack([normals, np.ones((len(normals), 1))])
    bounds = [(None, None)] * dim + [(None, None)]
    res = linprog(c, A_ub=a_ub, b_ub=offsets, bounds=bounds, method="highs")
    if not res.success:
        return -np.inf, np.zeros(dim)
    return float(res.x[-1]), res.x[:-1]


class PolyhedralMesh:
    """Vertices, ordered face loops and cells of signed face references.

    Cells store pairs (face index, sign): sign +1 uses the face loop as
    stored, -1 reverses it, and the signed loops of a cell must form a
    closed surface with outward orientation.  Edges are derived as the
    lexicographically sorted set of canonical vertex pairs (v0 < v1).
    """

    def __init__(
        self,
        vertices: Sequence[Sequence[float]],
        faces: Sequence[Sequence[int]],
        cells: Sequence[Sequence[tuple[int, int] | int]],
    ):
        self.vertices = np.asarray(vertices, dtype=float)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshFormatError("vertices must be an array of 3D points")
        self.faces = [tuple(int(v) for v in loop) for loop in faces]
        self.cells = [self._normalize_cell(c) for c in cells]
        self._validate_indices()
        self._build_edges()
        self._build_face_geometry()
        self._validate_cells()
        self._build_cell_geometry()

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _normalize_cell(cell) -> tuple[tuple[int, int], ...]:
        out = []
        for entry in cell:
            if isinstance(entry, (tuple, list)):
                f, s = int(entry[0]), int(entry[1])
            else:
                # signed 1-based reference: +k is face k-1, -k is reversed
                ref = int(entry)
                if ref == 0:
                    raise MeshFormatError("cell face reference 0 is invalid")
                f, s = abs(ref) - 1, (1 if ref > 0 else -1)
            if s not in (-1, 1):
                raise MeshFormatError("cell face sign must be +1 or -1")
            out.append((f, s))
        return tuple(out)

    def _validate_indices(self):
        nv = len(self.vertices)
        for loop in self.faces:
            if len(loop) < 3 or len(set(loop)) != len(loop):
                raise MeshTopologyError("face loop needs >= 3 distinct vertices")
            if min(loop) < 0 or max(loop) >= nv:
                raise MeshFormatError("face references a vertex out of range")
        nf = len(self.faces)
        for cell in self.cells:
            if not cell:
                raise MeshTopologyError("cell with no faces")
            for f, _ in cell:
                if f < 0 or f >= nf:
                    raise MeshFormatError("cell references a face out of range")

    def _build_edges(self):
        pairs = set()
        for loop in self.faces:
            for i in range(len(loop)):
                a, b = loop[i], loop[(i + 1) % len(loop)]
                if a == b:
                    raise MeshTopologyError("face loop repeats a vertex consecutively")
                pairs.add((min(a, b), max(a, b)))
        self.edges = sorted(pairs)
        self._edge_index = {e: i for i, e in enumerate(self.edges)}
        self.face_edges = []
        for loop in self.faces:
            es = []
            for i in range(len(loop)):
                a, b = loop[i], loop[(i + 1) % len(loop)]
                # orientation of the loop edge w.r.t. the canonical pair
                sign = 1 if a < b else -1
                es.append((self._edge_index[(min(a, b), max(a, b))], sign))
            self.face_edges.append(tuple(es))

    def _build_face_geometry(self):
        nf = len(self.faces)
        self.face_area = np.zeros(nf)
        self.face_normal = np.zeros((nf, 3))
        self.face_centroid = np.zeros((nf, 3))
        self.face_h = np.zeros(nf)
        for f, loop in enumerate(self.faces):
            pts = self.vertices[list(loop)]
            area, normal, centroid = _polygon_area_normal(pts)
            h = _diameter(pts)
            dist = (pts - centroid) @ normal
            if np.abs(dist).max() > PLANARITY_TOL * h:
                raise MeshGeometryError(
                    f"face {f} deviates from a plane by {np.abs(dist).max():.3e} "
                    f"(tolerance {PLANARITY_TOL * h:.3e})"
                )
            self.face_area[f] = area
            self.face_normal[f] = normal
            self.face_centroid[f] = centroid
            self.face_h[f] = h
        self.edge_h = np.array(
            [np.linalg.norm(self.vertices[b] - self.vertices[a]) for a, b in self.edges]
        )

    def _validate_cells(self):
        for ci, cell in enumerate(self.cells):
            seen: dict[tuple[int, int], int] = {}
            for f, s in cell:
                loop = self.faces[f] if s == 1 else tuple(reversed(self.faces[f]))
                for i in range(len(loop)):
                    a, b = loop[i], loop[(i + 1) % len(loop)]
                    key = (min(a, b), max(a, b))
                    d = 1 if a < b else -1
                    seen[key] = seen.get(key, 0) + d
                    if abs(seen[key]) > 1:
                        raise MeshTopologyError(
                            f"cell {ci}: edge {key} traversed twice in the same direction"
                        )
            open_edges = {k for k, v in seen.items() if v != 0}
            counts: dict[tuple[int, int], int] = {}
            for f, s in cell:
                loop = self.faces[f]
                for i in range(len(loop)):
                    a, b = loop[i], loop[(i + 1) % len(loop)]
                    key = (min(a, b), max(a, b))
                    counts[key] = counts.get(key, 0) + 1
            if open_edges or any(v != 2 for v in counts.values()):
                raise MeshTopologyError(f"cell {ci} surface is not closed and oriented")

    def _build_cell_geometry(self):
        nc = len(self.cells)
        self.cell_volume = np.zeros(nc)
        self.cell_centroid = np.zeros((nc, 3))
        self.cell_h = np.zeros(nc)
        self.cell_star_center = np.zeros((nc, 3))
        self.cell_kernel_radius = np.zeros(nc)
        self.face_star_center = np.zeros((len(self.faces), 3))
        self.face_kernel_radius = np.zeros(len(self.faces))
        for f in range(len(self.faces)):
            r, c = self._face_kernel(f)
            self.face_kernel_radius[f] = r
            frame = self.face_frame(f)
            self.face_star_center[f] = (
                frame.origin + frame.h * (c[0] * frame.axes[0] + c[1] * frame.axes[1])
            )
        for ci, cell in enumerate(self.cells):
            vol = 0.0
            cvol = np.zeros(3)
            for f, s in cell:
                loop = self.faces[f] if s == 1 else tuple(reversed(self.faces[f]))
                pts = self.vertices[list(loop)]
                ref = self.face_centroid[f]
                for i in range(len(pts)):
                    a = pts[i]
                    b = pts[(i + 1) % len(pts)]
                    v6 = np.dot(ref, np.cross(a, b))  # signed tet volume * 6 vs origin
                    vol += v6 / 6.0
                    cvol += v6 / 6.0 * (ref + a + b) / 4.0
            if vol <= 0.0:
                raise MeshGeometryError(
                    f"cell {ci} has non-positive volume {vol:.3e}; orientation not outward"
                )
            self.cell_volume[ci] = vol
            self.cell_centroid[ci] = cvol / vol
            verts = self.cell_vertices(ci)
            self.cell_h[ci] = _diameter(self.vertices[verts])
            r, c = self._cell_kernel(ci)
            self.cell_kernel_radius[ci] = r
            centroid = self.cell_centroid[ci]
            # prefer the centroid when it lies inside the visibility kernel
            if self._kernel_margin(ci, centroid) >= 0.05 * r:
                self.cell_star_center[ci] = centroid
            else:
                self.cell_star_center[ci] = c

    def _cell_planes(self, ci: int) -> tuple[np.ndarray, np.ndarray]:
        cell = self.cells[ci]
        normals = np.array([s * self.face_normal[f] for f, s in cell])
        offsets = np.array(
            [np.dot(s * self.face_normal[f], self.face_centroid[f]) for f, s in cell]
        )
        return normals, offsets

    def _cell_kernel(self, ci: int) -> tuple[float, np.ndarray]:
        normals, offsets = self._cell_planes(ci)
        return _chebyshev_radius(normals, offsets)

    def _kernel_margin(self, ci: int, point: np.ndarray) -> float:
        normals, offsets = self._cell_planes(ci)
        return float(np.min(offsets - normals @ point))

    def _face_kernel(self, f: int) -> tuple[float, np.ndarray]:
        """Inscribed-disk radius of the face kernel, in the face frame."""
        frame = self.face_frame(f)
        loop = self.faces[f]
        pts2 = frame.local_coords(self.vertices[list(loop)])
        normals = []
        offsets = []
        for i in range(len(loop)):
            a = pts2[i]
            b = pts2[(i + 1) % len(loop)]
            d = b - a
            nrm = np.array([d[1], -d[0]])  # outward for a CCW loop
            ln = np.linalg.norm(nrm)
            if ln == 0.0:
                raise MeshGeometryError(f"face {f} has a zero-length edge")
            nrm /= ln
            normals.append(nrm)
            offsets.append(np.dot(nrm, a))
        r, c = _chebyshev_radius(np.array(normals), np.array(offsets))
        return r * frame.h, c

    # -- public geometry ------------------------------------------------------

    def face_frame(self, f: int) -> LocalFrame:
        """Deterministic face frame: t1 along the first loop edge, t2 = n x t1."""
        loop = self.faces[f]
        normal = self.face_normal[f]
        e0 = self.vertices[loop[1]] - self.vertices[loop[0]]
        t1 = e0 - np.dot(e0, normal) * normal
        ln = np.linalg.norm(t1)
        if ln < 1e-14 * self.face_h[f]:
            raise MeshGeometryError(f"face {f} first edge is degenerate")
        t1 /= ln
        t2 = np.cross(normal, t1)
        return LocalFrame(
            origin=self.face_centroid[f].copy(),
            axes=np.vstack([t1, t2]),
            h=float(self.face_h[f]),
            normal=normal.copy(),
        )

    def edge_frame(self, e: int) -> LocalFrame:
        a, b = self.edges[e]
        t = self.vertices[b] - self.vertices[a]
        h = np.linalg.norm(t)
        if h == 0.0:
            raise MeshGeometryError(f"edge {e} has zero length")
        return LocalFrame(
            origin=0.5 * (self.vertices[a] + self.vertices[b]),
            axes=(t / h)[None, :],
            h=float(h),
        )

    def cell_frame(self, ci: int) -> LocalFrame:
        return LocalFrame(
            origin=self.cell_centroid[ci].copy(),
            axes=np.eye(3),
            h=float(self.cell_h[ci]),
        )

    def cell_faces(self, ci: int) -> tuple[tuple[int, int], ...]:
        return self.cells[ci]

    def cell_edges(self, ci: int) -> list[int]:
        out = sorted({e for f, _ in self.cells[ci] for e, _ in self.face_edges[f]})
        return out

    def cell_vertices(self, ci: int) -> list[int]:
        out = sorted({v for f, _ in self.cells[ci] for v in self.faces[f]})
        return out

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_cells(self) -> int:
        return len(self.cells)


def load_mesh(path: str, fmt: str = "json") -> PolyhedralMesh:
    """Load a mesh from the structured text format.

    The file holds an object with keys ``vertices`` (array of [x, y, z]),
    ``faces`` (arrays of 0-based vertex loops) and ``cells`` (arrays of
    signed 1-based face references).
    """
    if fmt != "json":
        raise MeshFormatError(f"unknown mesh format {fmt!r}")
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise MeshFormatError(f"cannot parse mesh file {path}: {exc}") from exc
    for key in ("vertices", "faces", "cells"):
        if key not in data:
            raise MeshFormatError(f"mesh file missing key {key!r}")
    return PolyhedralMesh(data["vertices"], data["faces"], data["cells"])


def save_mesh(mesh_dict: dict, path: str):
    """Write a mesh dictionary in the structured text format."""
    with open(path, "w") as fh:
        json.dump(mesh_dict, fh)


def face_frame(mesh: PolyhedralMesh, f: int) -> LocalFrame:
    return mesh.face_frame(f)


def check_regularity(mesh: PolyhedralMesh, rho_min: float) -> RegularityReport:
    """Shape-regularity check with an explicit estimate of the constant.

    Star-shapedness is certified through the largest inscribed ball of the
    visibility kernel (intersection of the boundary-plane halfspaces),
    found as a Chebyshev-center linear program.
    """
    if not 0.0 < rho_min < 1.0:
        raise ValueError("rho_min must lie in (0, 1)")
    cell_rho = mesh.cell_kernel_radius / mesh.cell_h
    face_rho = mesh.face_kernel_radius / mesh.face_h
    ratio_bound = np.inf
    for ci, cell in enumerate(mesh.cells):
        for f, _ in cell:
            ratio_bound = min(ratio_bound, mesh.face_h[f] / mesh.cell_h[ci])
            for e, _ in mesh.face_edges[f]:
                ratio_bound = min(ratio_bound, mesh.edge_h[e] / mesh.face_h[f])
    rho = float(min(cell_rho.min(), face_rho.min(), ratio_bound))
    return RegularityReport(
        rho_min=rho_min,
        rho=rho,
        cell_rho=cell_rho,
        face_rho=face_rho,
        cell_h=mesh.cell_h.copy(),
        face_h=mesh.face_h.copy(),
        edge_h=mesh.edge_h.copy(),
        clause_star_cells=bool(np.all(cell_rho >= rho_min)),
        clause_star_faces=bool(np.all(face_rho >= rho_min)),
        clause_ratios=bool(ratio_bound >= rho_min),
    )
