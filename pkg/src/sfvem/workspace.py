"""Per-mesh cache of rules, monomial tables and orthonormal bases.

Every inner product in the element machinery reduces to small matrix
products against cached monomial value tables, and every test basis
(degree-of-freedom functionals and projection targets alike) is a
graded orthonormal basis built here.  Graded construction makes all
bases prefix-stable: the basis of a lower order is literally the head
of the basis of a higher order, which is what keeps moment-map columns
unchanged when the projection order grows.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from sfvem import polynomials as poly
from sfvem.mesh import LocalFrame, PolyhedralMesh
from sfvem.polynomials import PolyBasis, monomial_dim
from sfvem.quadrature import QuadratureRule, cell_rule, edge_rule, face_rule

GRAM_TOL = 1e-10

EntityRef = tuple[str, int]


class RankLossError(RuntimeError):
    """A basis turned out numerically dependent on its entity."""


@dataclass(frozen=True)
class OrthoBasis:
    """Orthonormal basis with the transform from its raw spanning set.

    ``transform`` T satisfies member_i = sum_j T[i, j] raw_j, block
    lower-triangular with respect to the degree grading.  ``potentials``
    tags bases that are images of differential operators (gradients,
    rotated gradients) with the matching scalar potentials, transformed
    by the same coefficients as the members.
    """

    members: PolyBasis
    transform: np.ndarray
    potentials: PolyBasis | None = None

    @property
    def dim(self) -> int:
        return self.members.dim

    def head(self, n: int) -> "OrthoBasis":
        idx = np.arange(n)
        pots = self.potentials.take(idx) if self.potentials is not None else None
        return OrthoBasis(self.members.take(idx), self.transform[:n], pots)

    def up_to_degree(self, deg: int) -> "OrthoBasis":
        n = int(np.searchsorted(self.members.degrees, deg + 0.5))
        return self.head(n)


class Workspace:
    """Geometry, quadrature and basis cache for one mesh.

    ``l_cap`` bounds the polynomial projection order the workspace can
    serve; all rules are exact to degree 2 (l_cap + 2), matching the
    default degree used for analytic integrands.
    """

    def __init__(self, mesh: PolyhedralMesh, l_cap: int):
        self.mesh = mesh
        self.l_cap = int(l_cap)
        self.rule_degree = 2 * (self.l_cap + 2)
        self.mono_cap = {
            "cell": self.l_cap + 1,
            "face": self.l_cap + 2,
            "edge": self.l_cap + 2,
        }
        self._rules: dict[EntityRef, QuadratureRule] = {}
        self._frames: dict[EntityRef, LocalFrame] = {}
        self._tables: dict = {}
        self._grams: dict = {}
        self._onb: dict = {}
        self._misc: dict = {}

    # -- geometry -------------------------------------------------------------

    def frame(self, entity: EntityRef) -> LocalFrame:
        if entity not in self._frames:
            kind, idx = entity
            if kind == "cell":
                self._frames[entity] = self.mesh.cell_frame(idx)
            elif kind == "face":
                self._frames[entity] = self.mesh.face_frame(idx)
            else:
                self._frames[entity] = self.mesh.edge_frame(idx)
        return self._frames[entity]

    def rule(self, entity: EntityRef) -> QuadratureRule:
        if entity not in self._rules:
            kind, idx = entity
            if kind == "cell":
                self._rules[entity] = cell_rule(self.mesh, idx, self.rule_degree)
            elif kind == "face":
                self._rules[entity] = face_rule(self.mesh, idx, self.rule_degree)
            else:
                self._rules[entity] = edge_rule(self.mesh, idx, self.rule_degree)
        return self._rules[entity]

    def dim_of(self, entity: EntityRef) -> int:
        return {"cell": 3, "face": 2, "edge": 1}[entity[0]]

    # -- monomial tables -------------------------------------------------------

    def table(self, entity: EntityRef) -> np.ndarray:
        """Scaled monomials of the entity evaluated at its rule points."""
        key = ("table", entity)
        if key not in self._tables:
            d = self.dim_of(entity)
            exps = poly.monomial_exponents(d, self.mono_cap[entity[0]])
            pts = self.frame(entity).local_coords(self.rule(entity).points)
            self._tables[key] = poly.monomial_values(exps, pts)
        return self._tables[key]

    def table_at(self, owner: EntityRef, entity: EntityRef) -> np.ndarray:
        """Monomials of ``owner``'s frame at ``entity``'s rule points."""
        if owner == entity:
            return self.table(entity)
        key = ("table_at", owner, entity)
        if key not in self._tables:
            d = self.dim_of(owner)
            exps = poly.monomial_exponents(d, self.mono_cap[owner[0]])
            pts = self.frame(owner).local_coords(self.rule(entity).points)
            self._tables[key] = poly.monomial_values(exps, pts)
        return self._tables[key]

    def mono_gram(self, entity: EntityRef) -> np.ndarray:
        key = ("gram", entity)
        if key not in self._grams:
            t = self.table(entity)
            self._grams[key] = (t * self.rule(entity).weights) @ t.T
        return self._grams[key]

    # -- inner products ---------------------------------------------------------

    def gram(self, entity: EntityRef, A: PolyBasis, B: PolyBasis) -> np.ndarray:
        """L2 Gram matrix between two bases living in the entity frame."""
        G = self.mono_gram(entity)
        na, nb = A.n_mono, B.n_mono
        if A.q != B.q:
            raise ValueError("component counts differ")
        out = np.zeros((A.dim, B.dim))
        for c in range(A.q):
            out += A.coeffs[:, c, :] @ G[:na, :nb] @ B.coeffs[:, c, :].T
        return out

    def values(self, entity: EntityRef, basis: PolyBasis) -> np.ndarray:
        """Member values at the entity rule points: (dim, q, n_pts)."""
        t = self.table(entity)[: basis.n_mono]
        return np.einsum("mqc,cp->mqp", basis.coeffs, t)

    def values_at(self, owner: EntityRef, entity: EntityRef, basis: PolyBasis) -> np.ndarray:
        t = self.table_at(owner, entity)[: basis.n_mono]
        return np.einsum("mqc,cp->mqp", basis.coeffs, t)

    def lift(self, face: EntityRef, vals2: np.ndarray) -> np.ndarray:
        """In-plane component values (m, 2, p) to global 3-vector values."""
        axes = self.frame(face).axes
        return np.einsum("mip,ij->mjp", vals2, axes)

    # -- orthonormalization ------------------------------------------------------

    def orthonormalize(
        self, entity: EntityRef, basis: PolyBasis, potentials: PolyBasis | None = None
    ) -> OrthoBasis:
        """Graded Gram-Schmidt with re-orthogonalization.

        Blocks of equal degree are processed low to high so the result
        is prefix-stable; within a block a Cholesky factor keeps the
        ordering.  Raises RankLossError when members are dependent on
        the entity beyond the rank tolerance.
        """
        if basis.dim == 0:
            return OrthoBasis(replace(basis, orthonormal=True), np.zeros((0, 0)), potentials)
        if np.any(np.diff(basis.degrees) < 0):
            raise ValueError("orthonormalize expects a graded basis")
        G = self.gram(entity, basis, basis)
        scale = np.sqrt(np.clip(np.diag(G), 1e-300, None))
        T = np.zeros((0, basis.dim))
        degrees = basis.degrees
        for deg in sorted(set(degrees.tolist())):
            block = np.where(degrees == deg)[0]
            V = np.zeros((block.size, basis.dim))
            V[np.arange(block.size), block] = 1.0 / scale[block]
            for _ in range(2):
                V -= (V @ G @ T.T) @ T
            B = V @ G @ V.T
            try:
                L = np.linalg.cholesky(B)
            except np.linalg.LinAlgError as exc:
                raise RankLossError(
                    f"dependent members at degree {deg} on {entity}"
                ) from exc
            cond_diag = np.abs(np.diag(L))
            if cond_diag.min() < 1e-8 * cond_diag.max():
                raise RankLossError(f"near-dependent members at degree {deg} on {entity}")
            V = np.linalg.solve(L, V)
            T = np.vstack([T, V])
        # one global correction pass keeps the Gram at identity to ~1e-14
        Gn = T @ G @ T.T
        err = np.abs(Gn - np.eye(len(Gn))).max()
        if err > 1e-13:
            L = np.linalg.cholesky(Gn)
            T = np.linalg.solve(L, T)
        members = replace(
            basis,
            coeffs=np.einsum("nm,mqc->nqc", T, basis.coeffs),
            degrees=degrees.copy(),
            orthonormal=True,
        )
        pots = None
        if potentials is not None:
            pots = replace(
                potentials,
                coeffs=np.einsum("nm,mqc->nqc", T, potentials.coeffs),
                degrees=potentials.degrees.copy(),
            )
        return OrthoBasis(members, T, pots)

    # -- structured orthonormal bases ---------------------------------------------

    def scalar_onb(self, entity: EntityRef, k: int) -> PolyBasis:
        """Orthonormal scalar polynomials of degree <= k on the entity."""
        key = ("scalar", entity)
        if key not in self._onb:
            d = self.dim_of(entity)
            cap = self.mono_cap[entity[0]]
            raw = poly.monomial_basis(d, 1, 0, cap)
            self._onb[key] = self.orthonormalize(entity, raw)
        cap = self.mono_cap[entity[0]]
        if k > cap:
            raise ValueError(f"scalar order {k} exceeds workspace cap {cap}")
        return self._onb[key].up_to_degree(k).members

    def grad_onb(self, cell: EntityRef) -> OrthoBasis:
        """Orthonormal basis of grad P on the cell, potentials attached.

        Members are true gradients of the potentials (chain factor from
        the scaled coordinates applied), so integration by parts holds
        verbatim between a member and its potential.
        """
        key = ("grad", cell)
        if key not in self._onb:
            pots = poly.monomial_basis(3, 1, 1, self.mono_cap["cell"])
            members = poly.diff_op(pots, "grad", h=self.frame(cell).h)
            self._onb[key] = self.orthonormalize(cell, members, pots)
        return self._onb[key]

    def cross_onb(self, cell: EntityRef) -> OrthoBasis:
        """Orthonormal graded basis of x cross P^3 up to generator l_cap."""
        key = ("cross", cell)
        if key not in self._onb:
            raw = poly.cross_space(self.l_cap)
            self._onb[key] = self.orthonormalize(cell, raw)
        return self._onb[key]

    def x_onb(self, cell: EntityRef) -> OrthoBasis:
        """Orthonormal basis of x P up to generator l_cap on the cell.

        Potentials carry the scalar generators (members are x times the
        potential), needed by the boundary terms of transfer identities.
        """
        key = ("x", cell)
        if key not in self._onb:
            gens = poly.monomial_basis(3, 1, 0, self.l_cap)
            raw = poly.coordinate_multiply(gens, "x")
            self._onb[key] = self.orthonormalize(cell, raw, gens)
        return self._onb[key]

    def face_x_onb(self, face: EntityRef) -> OrthoBasis:
        """Orthonormal basis of x_F P on the face (in-plane components)."""
        key = ("face_x", face)
        if key not in self._onb:
            gens = poly.monomial_basis(2, 1, 0, self.l_cap)
            raw = poly.coordinate_multiply(gens, "x")
            self._onb[key] = self.orthonormalize(face, raw, gens)
        return self._onb[key]

    def face_rot_onb(self, face: EntityRef) -> OrthoBasis:
        """Orthonormal basis of curl_F P on the face, potentials attached.

        Members are true rotated gradients of the potentials.
        """
        key = ("face_rot", face)
        if key not in self._onb:
            pots = poly.monomial_basis(2, 1, 1, self.mono_cap["face"])
            members = poly.diff_op(pots, "curl_F", h=self.frame(face).h)
            self._onb[key] = self.orthonormalize(face, members, pots)
        return self._onb[key]

    # -- derived geometric scalars ---------------------------------------------

    def face_plane_offset(self, cell: EntityRef, f: int, sign: int) -> float:
        """Scaled distance (x - x_K) . n_out / h_K, constant on face f."""
        cf = self.frame(cell)
        n_out = sign * self.mesh.face_normal[f]
        return float(np.dot(self.mesh.face_centroid[f] - cf.origin, n_out) / cf.h)

    def edge_line_offset(self, face: EntityRef, e: int, loop_sign: int) -> float:
        """Scaled distance (x - x_F) . n_E / h_F, constant on edge e.

        ``loop_sign`` is the orientation of the face-loop traversal of e
        relative to the canonical edge direction; n_E is the in-plane
        outward normal d x n of the loop direction d.
        """
        fr = self.frame(face)
        a, b = self.mesh.edges[e]
        t = self.mesh.vertices[b] - self.mesh.vertices[a]
        t = t / np.linalg.norm(t)
        d = loop_sign * t
        n_e = np.cross(d, fr.normal)
        mid = 0.5 * (self.mesh.vertices[a] + self.mesh.vertices[b])
        return float(np.dot(mid - fr.origin, n_e) / fr.h)

    # -- restriction -----------------------------------------------------------

    def project_onto(
        self, entity: EntityRef, onb: PolyBasis, values: np.ndarray
    ) -> np.ndarray:
        """Coefficients of given point values in an orthonormal basis.

        Exact whenever the sampled function lies in the basis span;
        values have shape (n_fields, q, n_pts) at the entity rule points.
        """
        w = self.rule(entity).weights
        ovals = self.values(entity, onb)
        return np.einsum("fqp,nqp,p->fn", values, ovals, w)

    def restrict_scalar(self, owner: EntityRef, entity: EntityRef, basis: PolyBasis, k: int) -> np.ndarray:
        """Expand scalar cell/face polynomials in the entity scalar ONB."""
        vals = self.values_at(owner, entity, basis)
        onb = self.scalar_onb(entity, k)
        return self.project_onto(entity, onb, vals)
