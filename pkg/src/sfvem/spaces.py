"""Virtual element space descriptors, DoF sets and identifiability checks.

A descriptor records the preserved orders of the serendipity reduction
together with the (larger) orders of the original space it is carved
from; the original space exists only through its DoF list and moment
machinery, the extra orders being what makes high-order polynomial
projections computable.

Degrees of freedom are moments against graded orthonormal test bases,
so a DoF order always refers to the generator polynomial in the paper
family definitions (p in fields like x cross p), not the degree of the
resulting test field.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from sfvem import polynomials as poly
from sfvem.polynomials import PolyBasis, monomial_dim
from sfvem.workspace import EntityRef, Workspace

IDENTIFIABILITY_TOL = 1e-10

KIND_NAMES = {
    ("node", 1): "vertex_value",
    ("node", 2): "edge_scalar_moment",
    ("node", 3): "face_scalar_moment",
    ("node", 4): "cell_scalar_moment",
    ("edge", 1): "edge_tangent_moment",
    ("edge", 2): "face_x_moment",
    ("edge", 3): "face_rot_moment",
    ("edge", 4): "curl_cross_moment",
    ("edge", 5): "cell_x_moment",
    ("face", 1): "face_normal_moment",
    ("face", 2): "cell_grad_moment",
    ("face", 3): "cell_cross_moment",
}


class SpaceError(ValueError):
    """Invalid space configuration."""


@dataclass(frozen=True)
class SpaceDescriptor:
    """Symbolic description of a (serendipity) virtual element space.

    ``preserved`` and ``original`` map per-family order names to the
    orders kept by the reduction and carried by the original space.
    Face keys: normal, grad, cross.  Edge keys: tangent, face_x,
    face_rot, curl_cross, cell_x.  Node keys: edge, face, cell.
    """

    family: str
    order: int
    preserved: tuple[tuple[str, int], ...]
    original: tuple[tuple[str, int], ...]
    l_max: int
    contains_target_polys: bool = True

    def p(self, key: str) -> int:
        return dict(self.preserved)[key]

    def o(self, key: str) -> int:
        return dict(self.original)[key]

    @property
    def curl_free(self) -> bool:
        return (
            self.family == "edge"
            and self.o("face_rot") == -1
            and self.o("curl_cross") == -1
        )

    def with_preserved(self, **updates: int) -> "SpaceDescriptor":
        pres = dict(self.preserved)
        orig = dict(self.original)
        for k, v in updates.items():
            if k not in pres:
                raise SpaceError(f"unknown order key {k!r} for family {self.family}")
            pres[k] = v
            orig[k] = max(orig[k], v)
        return replace(
            self,
            preserved=tuple(sorted(pres.items())),
            original=tuple(sorted(orig.items())),
        )

    def describe(self) -> dict:
        return {
            "family": self.family,
            "order": self.order,
            "preserved": dict(self.preserved),
            "original": dict(self.original),
            "l_max": self.l_max,
        }


def face_space(m: int, curl_order: int | None = None, l_max: int | None = None) -> SpaceDescriptor:
    """H(div)-conforming face space of target order m.

    DoFs: normal traces to order m on faces, gradient moments to m-1 and
    cross moments to ``curl_order`` on the cell; the original space
    carries cross moments up to l_max - 1 so projections to order l_max
    stay computable.  curl_order defaults to m-1, the smallest value
    for which the target-polynomial moments come from preserved DoFs.
    """
    if m < 0:
        raise SpaceError("face space needs order m >= 0")
    kr = m - 1 if curl_order is None else curl_order
    if kr < -1:
        raise SpaceError("curl_order must be >= -1")
    lm = m + 4 if l_max is None else l_max
    if lm < m:
        raise SpaceError("l_max must be >= m")
    pres = {"normal": m, "grad": m - 1, "cross": kr}
    orig = {"normal": m, "grad": m - 1, "cross": max(kr, m - 1, lm - 1)}
    return SpaceDescriptor(
        "face", m, tuple(sorted(pres.items())), tuple(sorted(orig.items())), lm
    )


def edge_space(
    m: int,
    face_x_order: int | None = None,
    curl_cross_order: int | None = None,
    cell_x_order: int | None = None,
    l_max: int | None = None,
) -> SpaceDescriptor:
    """H(curl)-conforming edge space of target order m.

    DoFs: tangential traces to order m on edges, rotated-gradient face
    moments to m-1, x_F face moments to ``face_x_order``, cross moments
    of the curl to ``curl_cross_order`` and x moments to
    ``cell_x_order``; the original space carries orders up to l_max.
    """
    if m < 0:
        raise SpaceError("edge space needs order m >= 0")
    bd = max(m - 1, -1) if face_x_order is None else face_x_order
    mr = max(m - 2, -1) if curl_cross_order is None else curl_cross_order
    kd = max(m - 1, -1) if cell_x_order is None else cell_x_order
    if min(bd, mr, kd) < -1:
        raise SpaceError("orders must be >= -1")
    lm = m + 4 if l_max is None else l_max
    if lm < m:
        raise SpaceError("l_max must be >= m")
    pres = {"tangent": m, "face_x": bd, "face_rot": m - 1, "curl_cross": mr, "cell_x": kd}
    orig = {
        "tangent": m,
        "face_x": max(bd, m, lm),
        "face_rot": m - 1,
        "curl_cross": max(mr, m, lm),
        "cell_x": max(kd, m - 1, lm - 1),
    }
    return SpaceDescriptor(
        "edge", m, tuple(sorted(pres.items())), tuple(sorted(orig.items())), lm
    )


def node_space(
    m: int,
    face_order: int | None = None,
    cell_order: int | None = None,
    l_max: int | None = None,
) -> SpaceDescriptor:
    """H1-conforming node space of target order m.

    DoFs: vertex values, edge moments to m-2, face moments to
    ``face_order`` and cell moments to ``cell_order`` (cell <= face).
    The cell order defaults to m: interior moments of the target
    polynomials must come from preserved DoFs for the serendipity
    projector to be computable.
    """
    if m < 1:
        raise SpaceError("node space needs order m >= 1")
    kv = m if cell_order is None else cell_order
    kf = max(kv, m) if face_order is None else face_order
    if kv > kf:
        raise SpaceError("node space requires cell_order <= face_order")
    lm = m + 4 if l_max is None else l_max
    if lm < m:
        raise SpaceError("l_max must be >= m")
    kv_orig = max(kv, m, lm)
    pres = {"edge": m, "face": kf, "cell": kv}
    orig = {"edge": m, "face": max(kf, kv_orig), "cell": kv_orig}
    return SpaceDescriptor(
        "node", m, tuple(sorted(pres.items())), tuple(sorted(orig.items())), lm
    )


def gradient_image_space(node_desc: SpaceDescriptor) -> SpaceDescriptor:
    """Edge-family descriptor of gradients of a node space.

    Gradient fields have no rotated face component and no curl, so the
    corresponding orders are -1; this descriptor only drives DoF lists
    and moment maps, it is not itself a serendipity space (the full
    vector polynomials are not inside it).
    """
    if node_desc.family != "node":
        raise SpaceError("expected a node-family descriptor")
    m = node_desc.order
    pres = {
        "tangent": m - 1,
        "face_x": node_desc.p("face"),
        "face_rot": -1,
        "curl_cross": -1,
        "cell_x": node_desc.p("cell"),
    }
    orig = {
        "tangent": m - 1,
        "face_x": node_desc.o("face"),
        "face_rot": -1,
        "curl_cross": -1,
        "cell_x": node_desc.o("cell"),
    }
    return SpaceDescriptor(
        "edge",
        m - 1,
        tuple(sorted(pres.items())),
        tuple(sorted(orig.items())),
        node_desc.l_max,
        contains_target_polys=False,
    )


def curl_image_space(edge_desc: SpaceDescriptor) -> SpaceDescriptor:
    """Face-family descriptor of curls of an edge space (divergence free)."""
    if edge_desc.family != "edge":
        raise SpaceError("expected an edge-family descriptor")
    pres = {
        "normal": edge_desc.p("face_rot"),
        "grad": -1,
        "cross": edge_desc.p("curl_cross"),
    }
    orig = {
        "normal": edge_desc.o("face_rot"),
        "grad": -1,
        "cross": edge_desc.o("curl_cross"),
    }
    return SpaceDescriptor(
        "face",
        max(edge_desc.p("face_rot"), 0),
        tuple(sorted(pres.items())),
        tuple(sorted(orig.items())),
        edge_desc.l_max,
        contains_target_polys=False,
    )


# -- DoF sets -----------------------------------------------------------------


@dataclass(frozen=True)
class DofFunctional:
    """One degree of freedom: a moment against an orthonormal test member."""

    kind: str
    entity: EntityRef
    index: int
    order: int
    preserved: bool
    block: int


@dataclass
class DofSet:
    """Ordered DoF list of a space on one cell.

    Rows follow block order ([1], [2], ... of the family definition),
    entities in cell order and test members graded low to high.  The
    preserved-first permutation required by the serendipity split is
    available through ``preserved_idx`` / ``reduced_idx``.
    """

    descriptor: SpaceDescriptor
    cell: int
    functionals: list[DofFunctional]
    layout: dict[tuple[int, EntityRef], np.ndarray]

    @property
    def n_total(self) -> int:
        return len(self.functionals)

    @property
    def preserved_mask(self) -> np.ndarray:
        return np.array([f.preserved for f in self.functionals], dtype=bool)

    @property
    def preserved_idx(self) -> np.ndarray:
        return np.where(self.preserved_mask)[0]

    @property
    def reduced_idx(self) -> np.ndarray:
        return np.where(~self.preserved_mask)[0]

    @property
    def n_preserved(self) -> int:
        return int(self.preserved_mask.sum())

    def rows(self, block: int, entity: EntityRef) -> np.ndarray:
        return self.layout.get((block, entity), np.zeros(0, dtype=int))


def _cell_entities(ws: Workspace, c: int):
    mesh = ws.mesh
    faces = [(f, s) for f, s in mesh.cells[c]]
    edges = mesh.cell_edges(c)
    verts = mesh.cell_vertices(c)
    return verts, edges, faces


def _onb_orders(basis: PolyBasis, kind: str) -> np.ndarray:
    """Generator order of each test member, per DoF kind."""
    if kind in ("cell_grad_moment", "face_rot_moment"):
        return basis.degrees + 1
    if kind in (
        "cell_cross_moment",
        "curl_cross_moment",
        "cell_x_moment",
        "face_x_moment",
    ):
        return basis.degrees - 1
    return basis.degrees.copy()


def build_dof_set(desc: SpaceDescriptor, ws: Workspace, c: int) -> DofSet:
    """Instantiate the ordered DoF list of a descriptor on one cell."""
    verts, edges, faces = _cell_entities(ws, c)
    cell: EntityRef = ("cell", c)
    functionals: list[DofFunctional] = []
    layout: dict[tuple[int, EntityRef], np.ndarray] = {}

    def add_block(block, entity, kind, basis, pres_order):
        orders = _onb_orders(basis, kind)
        rows = []
        for i in range(basis.dim):
            rows.append(len(functionals))
            functionals.append(
                DofFunctional(
                    kind=kind,
                    entity=entity,
                    index=i,
                    order=int(orders[i]),
                    preserved=bool(orders[i] <= pres_order),
                    block=block,
                )
            )
        layout[(block, entity)] = np.array(rows, dtype=int)

    fam = desc.family
    if fam == "node":
        for v in verts:
            rows = [len(functionals)]
            functionals.append(
                DofFunctional("vertex_value", ("vertex", v), 0, 0, True, 1)
            )
            layout[(1, ("vertex", v))] = np.array(rows, dtype=int)
        for e in edges:
            onb = ws.scalar_onb(("edge", e), desc.o("edge") - 2)
            add_block(2, ("edge", e), "edge_scalar_moment", onb, desc.p("edge") - 2)
        for f, _ in faces:
            onb = ws.scalar_onb(("face", f), desc.o("face"))
            add_block(3, ("face", f), "face_scalar_moment", onb, desc.p("face"))
        onb = ws.scalar_onb(cell, desc.o("cell"))
        add_block(4, cell, "cell_scalar_moment", onb, desc.p("cell"))
    elif fam == "edge":
        for e in edges:
            onb = ws.scalar_onb(("edge", e), desc.o("tangent"))
            add_block(1, ("edge", e), "edge_tangent_moment", onb, desc.p("tangent"))
        for f, _ in faces:
            onb = ws.face_x_onb(("face", f)).up_to_degree(desc.o("face_x") + 1).members
            add_block(2, ("face", f), "face_x_moment", onb, desc.p("face_x"))
        for f, _ in faces:
            onb = ws.face_rot_onb(("face", f)).up_to_degree(desc.o("face_rot") - 1).members
            add_block(3, ("face", f), "face_rot_moment", onb, desc.p("face_rot"))
        onb = ws.cross_onb(cell).up_to_degree(desc.o("curl_cross") + 1).members
        add_block(4, cell, "curl_cross_moment", onb, desc.p("curl_cross"))
        onb = ws.x_onb(cell).up_to_degree(desc.o("cell_x") + 1).members
        add_block(5, cell, "cell_x_moment", onb, desc.p("cell_x"))
    elif fam == "face":
        for f, _ in faces:
            onb = ws.scalar_onb(("face", f), desc.o("normal"))
            add_block(1, ("face", f), "face_normal_moment", onb, desc.p("normal"))
        onb = ws.grad_onb(cell).up_to_degree(desc.o("grad") - 1).members
        add_block(2, cell, "cell_grad_moment", onb, desc.p("grad"))
        onb = ws.cross_onb(cell).up_to_degree(desc.o("cross") + 1).members
        add_block(3, cell, "cell_cross_moment", onb, desc.p("cross"))
    else:
        raise SpaceError(f"unknown family {fam!r}")
    return DofSet(desc, c, functionals, layout)


def _preserved_split_threshold(kind: str, order: int) -> int:
    """Member-degree threshold matching a preserved generator order."""
    if kind in ("cell_grad_moment", "face_rot_moment"):
        return order - 1
    if kind in ("cell_cross_moment", "curl_cross_moment", "cell_x_moment", "face_x_moment"):
        return order + 1
    return order


# -- DoF evaluation -----------------------------------------------------------


def _block_onb(dofs: DofSet, ws: Workspace, block: int, entity: EntityRef) -> PolyBasis:
    desc = dofs.descriptor
    fam = desc.family
    if fam == "node":
        if block == 2:
            return ws.scalar_onb(entity, desc.o("edge") - 2)
        if block == 3:
            return ws.scalar_onb(entity, desc.o("face"))
        if block == 4:
            return ws.scalar_onb(entity, desc.o("cell"))
    if fam == "edge":
        if block == 1:
            return ws.scalar_onb(entity, desc.o("tangent"))
        if block == 2:
            return ws.face_x_onb(entity).up_to_degree(desc.o("face_x") + 1).members
        if block == 3:
            return ws.face_rot_onb(entity).up_to_degree(desc.o("face_rot") - 1).members
        if block == 4:
            return ws.cross_onb(entity).up_to_degree(desc.o("curl_cross") + 1).members
        if block == 5:
            return ws.x_onb(entity).up_to_degree(desc.o("cell_x") + 1).members
    if fam == "face":
        if block == 1:
            return ws.scalar_onb(entity, desc.o("normal"))
        if block == 2:
            return ws.grad_onb(entity).up_to_degree(desc.o("grad") - 1).members
        if block == 3:
            return ws.cross_onb(entity).up_to_degree(desc.o("cross") + 1).members
    raise SpaceError(f"no test basis for family {fam} block {block}")


def dof_matrix_on_polynomials(dofs: DofSet, basis: PolyBasis, ws: Workspace) -> np.ndarray:
    """Evaluate every DoF on every member of a cell-frame basis.

    The result is the matrix D with D[i, j] = F_i(p_j); all moments use
    the cached exact quadrature of the workspace.
    """
    c = dofs.cell
    cell: EntityRef = ("cell", c)
    fam = dofs.descriptor.family
    D = np.zeros((dofs.n_total, basis.dim))
    h_cell = ws.frame(cell).h
    for (block, entity), rows in dofs.layout.items():
        if rows.size == 0:
            continue
        if fam == "node" and block == 1:
            vtx = ws.mesh.vertices[entity[1]][None, :]
            loc = ws.frame(cell).local_coords(vtx)
            exps = poly.monomial_exponents(3, basis.k_hi)
            vals = poly.monomial_values(exps, loc)
            D[rows[0]] = (basis.coeffs[:, 0, :] @ vals)[:, 0]
            continue
        onb = _block_onb(dofs, ws, block, entity)
        if entity[0] == "cell" and block in (2, 3, 5) and fam in ("face", "edge"):
            B = basis if block != 4 else basis
            D[rows] = ws.gram(cell, onb, B)
            continue
        if fam == "edge" and block == 4:
            curl = poly.diff_op(basis, "curl", h=h_cell)
            D[rows] = ws.gram(cell, onb, curl)
            continue
        if fam == "node" and block == 4:
            D[rows] = ws.gram(cell, onb, basis)
            continue
        # boundary moments: values of the cell polynomials on the entity
        vals = ws.values_at(cell, entity, basis)
        w = ws.rule(entity).weights
        if fam == "node":
            ovals = ws.values(entity, onb)[:, 0, :]
            D[rows] = np.einsum("np,mp,p->nm", ovals, vals[:, 0, :], w)
            continue
        if fam == "edge" and block == 1:
            t = ws.frame(entity).axes[0]
            tangential = np.einsum("mqp,q->mp", vals, t)
            ovals = ws.values(entity, onb)[:, 0, :]
            D[rows] = np.einsum("np,mp,p->nm", ovals, tangential, w)
            continue
        if fam == "face" and block == 1:
            n = ws.frame(entity).normal
            normal_trace = np.einsum("mqp,q->mp", vals, n)
            ovals = ws.values(entity, onb)[:, 0, :]
            D[rows] = np.einsum("np,mp,p->nm", ovals, normal_trace, w)
            continue
        if fam == "edge" and block in (2, 3):
            ovals3 = ws.lift(entity, ws.values(entity, onb))
            D[rows] = np.einsum("nqp,mqp,p->nm", ovals3, vals, w)
            continue
        raise SpaceError(f"unhandled DoF block {block} for family {fam}")
    return D


def interpolate_dofs(dofs: DofSet, field, ws: Workspace) -> np.ndarray:
    """DoF values of an analytic field (value/curl callables as needed)."""
    c = dofs.cell
    cell: EntityRef = ("cell", c)
    fam = dofs.descriptor.family
    out = np.zeros(dofs.n_total)
    for (block, entity), rows in dofs.layout.items():
        if rows.size == 0:
            continue
        if fam == "node" and block == 1:
            out[rows[0]] = float(np.asarray(field.value(ws.mesh.vertices[entity[1]][None, :]))[0])
            continue
        onb = _block_onb(dofs, ws, block, entity)
        rule = ws.rule(entity)
        w = rule.weights
        if fam == "edge" and block == 4:
            vals = np.asarray(field.curl(rule.points))
            ovals = ws.values(entity, onb)
            out[rows] = np.einsum("nqp,pq,p->n", ovals, vals, w)
            continue
        vals = np.asarray(field.value(rule.points))
        if fam == "node" or (fam == "face" and block == 1) or (fam == "edge" and block == 1):
            if vals.ndim == 2:
                if fam == "face":
                    vals = vals @ ws.frame(entity).normal
                elif fam == "edge" and entity[0] == "edge":
                    vals = vals @ ws.frame(entity).axes[0]
            ovals = ws.values(entity, onb)[:, 0, :]
            out[rows] = np.einsum("np,p,p->n", ovals, vals, w)
            continue
        if entity[0] == "cell":
            ovals = ws.values(entity, onb)
            out[rows] = np.einsum("nqp,pq,p->n", ovals, vals, w)
            continue
        # in-plane face moments of a vector field
        ovals3 = ws.lift(entity, ws.values(entity, onb))
        out[rows] = np.einsum("nqp,pq,p->n", ovals3, vals, w)
        continue
    return out


# -- identifiability ----------------------------------------------------------


@dataclass(frozen=True)
class IdentifiabilityResult:
    ok: bool
    sigma_min: float
    sigma_max: float
    n_prefix: int
    order: int


def target_poly_basis(desc: SpaceDescriptor, ws: Workspace, c: int, k: int) -> PolyBasis:
    """Orthonormal basis of the kept polynomial space P^(3)_k on the cell."""
    q = 1 if desc.family == "node" else 3
    raw = poly.monomial_basis(3, q, 0, max(k, 0))
    return ws.orthonormalize(("cell", c), raw).members


def is_identifying(
    dofs: DofSet,
    ws: Workspace,
    n_prefix: int | None = None,
    order: int | None = None,
    tol: float = IDENTIFIABILITY_TOL,
) -> IdentifiabilityResult:
    """Do the first N (preserved-first) DoFs identify the polynomials?

    True iff the DoF matrix on an orthonormal P^(q)_m basis restricted
    to those rows has full column rank with sigma_min > tol * sigma_max.
    """
    desc = dofs.descriptor
    m = desc.order if order is None else order
    n = dofs.n_preserved if n_prefix is None else n_prefix
    basis = target_poly_basis(desc, ws, dofs.cell, m)
    if basis.dim == 0:
        return IdentifiabilityResult(True, np.inf, np.inf, n, m)
    perm = np.concatenate([dofs.preserved_idx, dofs.reduced_idx])
    D = dof_matrix_on_polynomials(dofs, basis, ws)[perm[:n]]
    if n < basis.dim or D.size == 0:
        return IdentifiabilityResult(False, 0.0, 0.0, n, m)
    sv = np.linalg.svd(D, compute_uv=False)
    ok = bool(sv[-1] > tol * sv[0])
    return IdentifiabilityResult(ok, float(sv[-1]), float(sv[0]), n, m)


def count_dofs(desc: SpaceDescriptor, ws: Workspace, c: int) -> tuple[int, int]:
    """(N_V, N_S): total and preserved DoF counts on a cell."""
    dofs = build_dof_set(desc, ws, c)
    return dofs.n_total, dofs.n_preserved
