"""Computable moment maps: DoF vectors to L2 moments against polynomials.

For each space family the map assembles, column by column, how the
moment of a member against an orthonormal polynomial target is read off
the DoF vector of the original space: directly for moment-type DoFs,
through integration by parts once boundary traces and the divergence or
in-plane curl have been identified as polynomials, and through the
direct-sum decompositions of the vector polynomial spaces for the rest.
Columns touching only preserved DoFs stay after the serendipity
reduction; the others are rewritten by the projector equivalence in
:mod:`sfvem.serendipity`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sfvem import polynomials as poly
from sfvem.polynomials import PolyBasis
from sfvem.spaces import DofSet, SpaceDescriptor, build_dof_set
from sfvem.workspace import EntityRef, Workspace

TAG_DIRECT = "direct-dof"
TAG_IBP = "integration-by-parts"
TAG_DECOMP = "decomposition"
TAG_EQUIV = "serendipity-equivalence"


@dataclass
class MomentMap:
    """Moments of original-space members against orthonormal targets.

    ``w_full`` has one row per DoF of the original space and one column
    per target: (v, target_j) = sum_i w_full[i, j] F_i(v) for every v in
    the space.  Targets are graded low to high; ``n_columns(l)`` is the
    number of targets of degree <= l.
    """

    descriptor: SpaceDescriptor
    cell: int
    dofs: DofSet
    targets: PolyBasis
    w_full: np.ndarray
    tags: list[str]
    parts: list[str]
    div_matrix: np.ndarray | None = None
    rot_matrices: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def target_degrees(self) -> np.ndarray:
        return self.targets.degrees

    def n_columns(self, l: int) -> int:
        return int(np.searchsorted(self.target_degrees, l + 0.5))

    def refresh_tags(self, tol: float = 1e-12):
        """Re-tag columns that involve reduced DoFs as equivalence-bound."""
        red = self.dofs.reduced_idx
        if red.size == 0:
            return
        touched = np.abs(self.w_full[red, :]).max(axis=0) > tol
        for j in np.where(touched)[0]:
            self.tags[j] = TAG_EQUIV


def _merge_graded(parts: list[tuple[PolyBasis, str, str]]) -> tuple[PolyBasis, list[str], list[str], np.ndarray]:
    """Concatenate labeled bases and stable-sort members by degree.

    Returns the merged basis, per-member tags and part labels, and the
    permutation mapping merged positions back to concatenated ones.
    """
    q = max(b.q for b, _, _ in parts)
    k_hi = max((b.k_hi for b, _, _ in parts if b.dim), default=0)
    coeffs = []
    degrees = []
    tags: list[str] = []
    labels: list[str] = []
    for b, tag, label in parts:
        if b.dim == 0:
            continue
        bb = b.resized(k_hi)
        coeffs.append(bb.coeffs)
        degrees.append(bb.degrees)
        tags.extend([tag] * bb.dim)
        labels.extend([label] * bb.dim)
    if not coeffs:
        return poly.empty_basis(parts[0][0].d, q), [], [], np.zeros(0, dtype=int)
    c = np.concatenate(coeffs, axis=0)
    deg = np.concatenate(degrees)
    order = np.argsort(deg, kind="stable")
    merged = PolyBasis(parts[0][0].d, q, k_hi, c[order], deg[order])
    return (
        merged,
        [tags[i] for i in order],
        [labels[i] for i in order],
        order,
    )


def _scatter(rows: np.ndarray, block: np.ndarray, n_total: int) -> np.ndarray:
    """Embed a (n_rows_used x m) block into (n_total x m) at given rows."""
    out = np.zeros((n_total, block.shape[1]))
    out[rows] = block
    return out


# -- face family ---------------------------------------------------------------


def face_moment_map(desc: SpaceDescriptor, ws: Workspace, c: int, dofs: DofSet | None = None) -> MomentMap:
    """Moments of H(div)-type members against grad P (+) x cross P^3.

    The divergence and the normal traces are identified as polynomials
    from DoFs [1], [2]; gradients then integrate by parts to any order,
    while cross moments are DoF data up to the original cross order.
    """
    if desc.family != "face":
        raise ValueError("face_moment_map expects a face descriptor")
    cell: EntityRef = ("cell", c)
    dofs = dofs or build_dof_set(desc, ws, c)
    n_total = dofs.n_total
    L = min(ws.l_cap, desc.l_max)
    kd = desc.o("grad")
    krp = desc.o("cross")
    h_cell = ws.frame(cell).h

    # divergence identification in the cell scalar basis of degree kd
    chi = ws.scalar_onb(cell, kd)
    div_matrix = np.zeros((chi.dim, n_total))
    if chi.dim:
        grad_chi = poly.diff_op(chi, "grad", h=h_cell)
        g_onb = ws.grad_onb(cell).up_to_degree(kd - 1).members
        rows2 = dofs.rows(2, cell)
        div_matrix[:, rows2] -= ws.gram(cell, grad_chi, g_onb)
        for f, s in ws.mesh.cells[c]:
            rows1 = dofs.rows(1, ("face", f))
            restr = ws.restrict_scalar(cell, ("face", f), chi, desc.o("normal"))
            div_matrix[:, rows1] += s * restr

    # gradient targets: (v, grad pi) = -(div v, pi) + sum_F s (v.n, pi)_F
    gfull = ws.grad_onb(cell).up_to_degree(L)
    n_g = gfull.dim
    m_grad = np.zeros((n_total, n_g))
    if n_g:
        pots = gfull.potentials
        if chi.dim:
            m_grad -= div_matrix.T @ ws.gram(cell, chi, pots)
        for f, s in ws.mesh.cells[c]:
            rows1 = dofs.rows(1, ("face", f))
            restr = ws.restrict_scalar(cell, ("face", f), pots, desc.o("normal"))
            m_grad[rows1] += s * restr.T

    # cross targets are direct DoF data
    cross = ws.cross_onb(cell).up_to_degree(min(krp, L - 1) + 1).members
    rows3 = dofs.rows(3, cell)
    m_cross = np.zeros((n_total, cross.dim))
    if cross.dim:
        m_cross[rows3[: cross.dim]] = np.eye(cross.dim)

    kr_pres = desc.p("cross")
    cross_tags = [
        TAG_DIRECT if d - 1 <= kr_pres else TAG_EQUIV for d in cross.degrees
    ]
    merged, tags, labels, order = _merge_graded(
        [(gfull.members, TAG_IBP, "grad"), (cross, "?", "cross")]
    )
    # per-member tags for the cross part were computed above
    raw_tags = [TAG_IBP] * n_g + cross_tags
    tags = [raw_tags[i] for i in order]
    onb = ws.orthonormalize(cell, merged)
    m_raw = np.concatenate([m_grad, m_cross], axis=1)[:, order]
    w_full = m_raw @ onb.transform.T
    mm = MomentMap(desc, c, dofs, onb.members, w_full, tags, labels, div_matrix=div_matrix)
    mm.refresh_tags()
    return mm


# -- node family ---------------------------------------------------------------


def node_moment_map(desc: SpaceDescriptor, ws: Workspace, c: int, dofs: DofSet | None = None) -> MomentMap:
    """Scalar moments up to the original cell order, direct DoF data."""
    if desc.family != "node":
        raise ValueError("node_moment_map expects a node descriptor")
    cell: EntityRef = ("cell", c)
    dofs = dofs or build_dof_set(desc, ws, c)
    L = min(ws.l_cap, desc.l_max)
    kv = min(desc.o("cell"), L)
    targets = ws.scalar_onb(cell, kv)
    rows4 = dofs.rows(4, cell)
    w_full = np.zeros((dofs.n_total, targets.dim))
    w_full[rows4[: targets.dim]] = np.eye(targets.dim)
    tags = [
        TAG_DIRECT if d <= desc.p("cell") else TAG_EQUIV for d in targets.degrees
    ]
    return MomentMap(desc, c, dofs, targets, w_full, tags, ["scalar"] * targets.dim)


# -- edge family ---------------------------------------------------------------


def _face_loop_edges(ws: Workspace, f: int):
    return ws.mesh.face_edges[f]


def rot_identification(desc: SpaceDescriptor, ws: Workspace, c: int, f: int, dofs: DofSet) -> np.ndarray:
    """Coefficients of the in-plane curl of a member in the face basis.

    Uses (rot_F v, p)_F = (v, curl_F p)_F + sum_E sigma (v.t, p)_E with
    the rotated-gradient moments [3] and tangential traces [1].
    """
    face: EntityRef = ("face", f)
    br = desc.o("face_rot")
    chi = ws.scalar_onb(face, br)
    out = np.zeros((chi.dim, dofs.n_total))
    if chi.dim == 0:
        return out
    h_face = ws.frame(face).h
    curl_chi = poly.diff_op(chi, "curl_F", h=h_face)
    zeta = ws.face_rot_onb(face).up_to_degree(br - 1).members
    rows3 = dofs.rows(3, face)
    if zeta.dim:
        out[:, rows3] += ws.gram(face, curl_chi, zeta)
    for e, sigma in _face_loop_edges(ws, f):
        rows1 = dofs.rows(1, ("edge", e))
        if rows1.size == 0:
            continue
        restr = ws.restrict_scalar(face, ("edge", e), chi, desc.o("tangent"))
        out[:, rows1] += sigma * restr
    return out


def _zeta_map(desc: SpaceDescriptor, ws: Workspace, c: int, f: int, dofs: DofSet, rot_c: np.ndarray, pot_cap: int) -> np.ndarray:
    """(v, curl_F a)_F for the full rotated-gradient basis, as DoF rows.

    (v, curl_F a)_F = (rot_F v, a)_F - sum_E sigma (v.t, a)_E; valid for
    potentials a of any degree because rot_F v and v.t are identified.
    """
    face: EntityRef = ("face", f)
    zfull = ws.face_rot_onb(face).up_to_degree(pot_cap - 1)
    pots = zfull.potentials
    out = np.zeros((zfull.dim, dofs.n_total))
    if zfull.dim == 0:
        return out
    br = desc.o("face_rot")
    chi = ws.scalar_onb(face, br)
    if chi.dim:
        out += ws.gram(face, pots, chi) @ rot_c
    for e, sigma in _face_loop_edges(ws, f):
        rows1 = dofs.rows(1, ("edge", e))
        if rows1.size == 0:
            continue
        restr = ws.restrict_scalar(face, ("edge", e), pots, desc.o("tangent"))
        out[:, rows1] -= sigma * restr
    return out


def _trace_decomposition(ws: Workspace, f: int, deg: int):
    """Factor for splitting degree-deg tangential traces on face f.

    Returns (basis sizes, solve) where solve maps stacked in-plane trace
    values (n_fields, 2, n_pts) to coefficients on [curl_F part, x_F
    part] of the matched-degree direct sum P^2_deg.
    """
    key = ("trace_solve", f, deg)
    if key in ws._misc:
        return ws._misc[key]
    face: EntityRef = ("face", f)
    # matched split of P^2_deg: curl_F potentials to deg + 1, x_F
    # generators to deg - 1, both meaning member degree <= deg
    zeta = ws.face_rot_onb(face).up_to_degree(deg).members
    xi = ws.face_x_onb(face).up_to_degree(deg).members
    merged, _, _, order = _merge_graded([(zeta, "", "rot"), (xi, "", "x")])
    gram = ws.gram(face, merged, merged)
    vals = ws.values(face, merged)
    w = ws.rule(face).weights
    n_rot = zeta.dim

    inv_order = np.argsort(order)

    def solve(trace_vals: np.ndarray):
        rhs = np.einsum("nqp,mqp,p->mn", vals, trace_vals, w)
        lam = np.linalg.solve(gram, rhs.T).T if merged.dim else np.zeros((len(trace_vals), 0))
        lam = lam[:, inv_order]
        return lam[:, :n_rot], lam[:, n_rot:]

    ws._misc[key] = (zeta.dim, xi.dim, solve)
    return ws._misc[key]


def _cross_candidates(desc: SpaceDescriptor, ws: Workspace, c: int, gen_cap: int) -> tuple[PolyBasis, np.ndarray]:
    """Cross-space members admissible as curl generators, with combos.

    When the face_x order bounds the computable trace split, candidates
    are restricted to the nullspace of the stacked per-face constraint
    matrices (coefficients of the x_F trace part beyond that order).
    Returns the generator basis (combinations of the cross ONB) and the
    combination matrix in cross-ONB coordinates.
    """
    cell: EntityRef = ("cell", c)
    cross = ws.cross_onb(cell).up_to_degree(gen_cap + 1).members
    n = cross.dim
    if n == 0:
        return cross, np.zeros((0, 0))
    bdp = desc.o("face_x")
    if bdp >= gen_cap:
        return cross, np.eye(n)
    # constrained case: per degree block, extend the nullspace basis
    combos: list[np.ndarray] = []
    degrees: list[int] = []
    for gen in range(gen_cap + 1):
        upto = int(np.searchsorted(cross.degrees, gen + 1 + 0.5))
        if upto == 0:
            continue
        rows = []
        for f, s in ws.mesh.cells[c]:
            lam_x = _face_trace_x_coeffs(ws, c, f, cross.take(np.arange(upto)))
            face: EntityRef = ("face", f)
            xi = ws.face_x_onb(face).up_to_degree(gen + 1).members
            forbidden = xi.degrees - 1 > bdp
            if forbidden.any():
                rows.append(lam_x[:, : xi.dim][:, forbidden].T)
        C = np.vstack(rows) if rows else np.zeros((0, upto))
        if C.shape[0] == 0:
            null = np.eye(upto)
        else:
            _, sv, vt = np.linalg.svd(C, full_matrices=True)
            rank = int(np.sum(sv > poly.RANK_TOL * max(sv[0] if sv.size else 1.0, 1.0)))
            null = vt[rank:].T
        # keep only directions beyond the span of earlier blocks
        prev = np.zeros((upto, len(combos)))
        for i, v in enumerate(combos):
            prev[: len(v), i] = v
        if combos:
            q, _ = np.linalg.qr(prev)
            null = null - q @ (q.T @ null)
        keep = poly.independent_rows(null.T, scale=1.0)
        for i in keep:
            combos.append(null[:, i])
            degrees.append(gen + 1)
    if not combos:
        return cross.take(np.zeros(0, dtype=int)), np.zeros((0, n))
    comb = np.zeros((len(combos), n))
    for i, v in enumerate(combos):
        comb[i, : len(v)] = v
    members = PolyBasis(
        3,
        3,
        cross.k_hi,
        np.einsum("an,nqc->aqc", comb, cross.coeffs),
        np.array(degrees, dtype=int),
    )
    return members, comb


def _face_trace_x_coeffs(ws: Workspace, c: int, f: int, gens: PolyBasis) -> np.ndarray:
    """x_F-part coefficients of (gen x n_F) traces, matched by degree."""
    face: EntityRef = ("face", f)
    cell: EntityRef = ("cell", c)
    n_f = ws.mesh.face_normal[f]
    vals = ws.values_at(cell, face, gens)
    w3 = np.cross(vals.transpose(0, 2, 1), n_f).transpose(0, 2, 1)
    axes = ws.frame(face).axes
    w2 = np.einsum("iq,mqp->mip", axes, w3)
    out = None
    xi_full = ws.face_x_onb(face)
    for deg in sorted(set(gens.degrees.tolist())):
        block = np.where(gens.degrees == deg)[0]
        _, n_x, solve = _trace_decomposition(ws, f, deg)
        _, lam_x = solve(w2[block])
        if out is None:
            out = np.zeros((gens.dim, xi_full.dim))
        out[block, :n_x] = lam_x
    return out if out is not None else np.zeros((gens.dim, xi_full.dim))


def edge_moment_map(desc: SpaceDescriptor, ws: Workspace, c: int, dofs: DofSet | None = None) -> MomentMap:
    """Moments of H(curl)-type members against curl(X) (+) x P.

    X is x cross P^3 up to the curl-moment order (unbounded for
    curl-free spaces) intersected with the per-face trace condition; the
    boundary terms of the curl integration by parts are split by the
    in-plane decomposition into rotated-gradient and x_F parts.
    """
    if desc.family != "edge":
        raise ValueError("edge_moment_map expects an edge descriptor")
    cell: EntityRef = ("cell", c)
    dofs = dofs or build_dof_set(desc, ws, c)
    n_total = dofs.n_total
    L = min(ws.l_cap, desc.l_max)
    h_cell = ws.frame(cell).h

    rot_matrices = {}
    zeta_maps = {}
    for f, s in ws.mesh.cells[c]:
        rot_matrices[f] = rot_identification(desc, ws, c, f, dofs)
        zeta_maps[f] = _zeta_map(desc, ws, c, f, dofs, rot_matrices[f], pot_cap=L + 2)

    # curl-part generators
    mu_eff = L if desc.curl_free else min(desc.o("curl_cross"), L)
    gens, comb = _cross_candidates(desc, ws, c, mu_eff)
    curl_targets = poly.diff_op(gens, "curl", h=h_cell) if gens.dim else poly.empty_basis(3, 3)
    constrained = desc.o("face_x") < mu_eff

    m_curl = np.zeros((n_total, gens.dim))
    if gens.dim:
        rows4 = dofs.rows(4, cell)
        if rows4.size:
            # (curl v, gen)_K read from DoF block [4] via the combos
            n_c = comb.shape[1]
            m_curl[rows4[:n_c]] = comb.T
        for f, s in ws.mesh.cells[c]:
            face: EntityRef = ("face", f)
            n_f = ws.mesh.face_normal[f]
            vals = ws.values_at(cell, face, gens)
            w3 = np.cross(vals.transpose(0, 2, 1), n_f).transpose(0, 2, 1)
            axes = ws.frame(face).axes
            w2 = np.einsum("iq,mqp->mip", axes, w3)
            rows2 = dofs.rows(2, face)
            for deg in sorted(set(gens.degrees.tolist())):
                block = np.where(gens.degrees == deg)[0]
                n_rot, n_x, solve = _trace_decomposition(ws, f, deg)
                lam_rot, lam_x = solve(w2[block])
                contrib = zeta_maps[f][:n_rot].T @ lam_rot.T
                if n_x:
                    if n_x > rows2.size:
                        resid = np.abs(lam_x[:, rows2.size :]).max() if lam_x.size else 0.0
                        if resid > 1e-9:
                            raise ValueError(
                                "trace split needs x_F moments beyond the original order"
                            )
                        lam_x = lam_x[:, : rows2.size]
                    contrib += _scatter(rows2[: lam_x.shape[1]], lam_x.T, n_total)
                m_curl[:, block] -= s * contrib

    # x-part targets are direct DoF data
    x_onb = ws.x_onb(cell).up_to_degree(min(desc.o("cell_x"), L - 1) + 1).members
    rows5 = dofs.rows(5, cell)
    m_x = np.zeros((n_total, x_onb.dim))
    if x_onb.dim:
        m_x[rows5[: x_onb.dim]] = np.eye(x_onb.dim)

    curl_tag = TAG_DECOMP if constrained else TAG_IBP
    x_tags = [
        TAG_DIRECT if d - 1 <= desc.p("cell_x") else TAG_EQUIV for d in x_onb.degrees
    ]
    merged, _, labels, order = _merge_graded(
        [(curl_targets, curl_tag, "curl"), (x_onb, "?", "x")]
    )
    raw_tags = [curl_tag] * curl_targets.dim + x_tags
    tags = [raw_tags[i] for i in order]
    onb = ws.orthonormalize(cell, merged)
    m_raw = np.concatenate([m_curl, m_x], axis=1)[:, order]
    w_full = m_raw @ onb.transform.T
    mm = MomentMap(
        desc, c, dofs, onb.members, w_full, tags, labels, rot_matrices=rot_matrices
    )
    mm.refresh_tags()
    return mm


def moment_map(desc: SpaceDescriptor, ws: Workspace, c: int, dofs: DofSet | None = None) -> MomentMap:
    if desc.family == "face":
        return face_moment_map(desc, ws, c, dofs)
    if desc.family == "edge":
        return edge_moment_map(desc, ws, c, dofs)
    if desc.family == "node":
        return node_moment_map(desc, ws, c, dofs)
    raise ValueError(f"unknown family {desc.family!r}")
