"""Serendipity reduction, stable polynomial projection and element forms.

The reduction constrains every reduced DoF to agree with the L2
projector onto the kept polynomial space, which itself is assembled
from the computable moment map.  Reduced rows of the map are then
eliminated through that equivalence, leaving moments that depend on
preserved DoFs alone; prefix slices of the eliminated map are both the
stability moment matrix M^l and the coefficient matrix of the discrete
L2 projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sfvem import polynomials as poly
from sfvem.moments import MomentMap, moment_map
from sfvem.polynomials import PolyBasis, monomial_dim
from sfvem.spaces import (
    DofSet,
    SpaceDescriptor,
    build_dof_set,
    curl_image_space,
    dof_matrix_on_polynomials,
    gradient_image_space,
    interpolate_dofs,
    is_identifying,
    IdentifiabilityResult,
)
from sfvem.workspace import EntityRef, Workspace

STABILITY_TOL = 1e-8
ELIMINATION_TOL = 1e-10


class SerendipityError(RuntimeError):
    """Reduction is not well posed for the given configuration."""


@dataclass
class ElementOperators:
    """Computable per-element operators of a serendipity space.

    ``projector_matrix`` S maps preserved DoF values to coefficients of
    the kept-polynomial projection in the orthonormal target basis;
    ``recovery`` R gives the reduced DoF values of a member from its
    preserved ones; ``moments`` W holds all computable moments:
    (v, target_j) = W[:, j] . preserved-DoFs.
    """

    descriptor: SpaceDescriptor
    cell: int
    dofs: DofSet
    map: MomentMap
    projector_matrix: np.ndarray
    recovery: np.ndarray
    moments: np.ndarray
    n_kept_polys: int
    identifiability: IdentifiabilityResult
    elimination_sigma: float
    stable_order: int | None = None
    stable_sigma: float | None = None

    @property
    def n_preserved(self) -> int:
        return self.dofs.n_preserved

    def n_columns(self, l: int) -> int:
        return self.map.n_columns(l)

    def moment_matrix(self, l: int) -> np.ndarray:
        """M^l: rows are the Lagrange basis of the space, columns the
        orthonormal moments of the computable target up to degree l."""
        return self.moments[:, : self.n_columns(l)]

    def projection(self, l: int) -> np.ndarray:
        """Preserved DoFs -> coefficients of the L2 projection to degree l."""
        return self.moments[:, : self.n_columns(l)].T

    def target_basis(self, l: int) -> PolyBasis:
        return self.map.targets.take(np.arange(self.n_columns(l)))

    def extension(self) -> np.ndarray:
        """Preserved DoFs -> full original DoF vector (reduced via R)."""
        n_v = self.dofs.n_total
        out = np.zeros((n_v, self.n_preserved))
        out[self.dofs.preserved_idx] = np.eye(self.n_preserved)
        out[self.dofs.reduced_idx] = self.recovery
        return out


def build_element_operators(
    desc: SpaceDescriptor,
    ws: Workspace,
    c: int,
    check_identifiability: bool = True,
    mm: MomentMap | None = None,
) -> ElementOperators:
    """Assemble the serendipity projector and eliminated moment map.

    The kept polynomial space must be covered by the moment targets;
    its coefficients solve the fixed-point system produced by replacing
    reduced DoFs with their projector equivalents.
    """
    if not desc.contains_target_polys:
        raise SerendipityError(
            "descriptor does not contain the kept polynomials; "
            "image descriptors only support moment maps"
        )
    mm = mm or moment_map(desc, ws, c)
    dofs = mm.dofs
    m = desc.order
    n_p_expected = monomial_dim(m, 3) * (1 if desc.family == "node" else 3)
    n_p = mm.n_columns(m)
    if n_p != n_p_expected:
        raise SerendipityError(
            f"moment target covers {n_p} of {n_p_expected} kept polynomials"
        )
    ident = is_identifying(dofs, ws)
    if check_identifiability and not ident.ok:
        raise SerendipityError(
            f"preserved DoFs are not identifying: sigma_min={ident.sigma_min:.3e}, "
            f"sigma_max={ident.sigma_max:.3e}"
        )
    kept = mm.targets.take(np.arange(n_p))
    d_s = dof_matrix_on_polynomials(dofs, kept, ws)
    pres, red = dofs.preserved_idx, dofs.reduced_idx
    a = mm.w_full[red, :n_p].T @ d_s[red] if red.size else np.zeros((n_p, n_p))
    lhs = np.eye(n_p) - a
    sv = np.linalg.svd(lhs, compute_uv=False) if n_p else np.ones(1)
    sigma_elim = float(sv[-1] / sv[0]) if n_p else 1.0
    if n_p and sv[-1] <= ELIMINATION_TOL * sv[0]:
        raise SerendipityError(
            "projector fixed point is singular; kept-polynomial moments are not "
            f"determined by preserved DoFs (sigma ratio {sv[-1] / sv[0]:.3e})"
        )
    s_matrix = np.linalg.solve(lhs, mm.w_full[pres, :n_p].T) if n_p else np.zeros((0, pres.size))
    recovery = d_s[red] @ s_matrix if red.size else np.zeros((0, pres.size))
    w_elim = mm.w_full[pres, :].copy()
    if red.size:
        w_elim += recovery.T @ mm.w_full[red, :]
    return ElementOperators(
        descriptor=desc,
        cell=c,
        dofs=dofs,
        map=mm,
        projector_matrix=s_matrix,
        recovery=recovery,
        moments=w_elim,
        n_kept_polys=n_p,
        identifiability=ident,
        elimination_sigma=sigma_elim,
    )


# -- stable order search -------------------------------------------------------


def _dim_grad(k: int) -> int:
    return max(monomial_dim(k, 3) - 1, 0)


def _dim_curl(k: int) -> int:
    if k < 1:
        return 0
    return 3 * monomial_dim(k, 3) - _dim_grad(k + 1)


def heuristic_lower_bound(family: str, m: int, deficit: int, l_cap: int = 64) -> int:
    """Smallest l whose projected-kernel subspace can hold the deficit.

    Face spaces project the projector kernel into gradients of degrees
    m+1..l, edge spaces into curls, node spaces into scalars; the search
    starts where the corresponding dimension count reaches N_S - N_P.
    """
    for l in range(m, l_cap + 1):
        if family == "face":
            room = _dim_grad(l + 1) - _dim_grad(m + 1)
        elif family == "edge":
            room = _dim_curl(l + 1) - _dim_curl(m + 1)
        else:
            room = monomial_dim(l, 3) - monomial_dim(m, 3)
        if room >= deficit:
            return l
    raise SerendipityError("no order satisfies the dimension heuristic")


@dataclass
class StableOrderResult:
    order: int
    sigma_min: float
    heuristic_bound: int
    moment_matrix: np.ndarray
    prefix_stable: bool
    kernel_confined: bool | None
    sigma_trace: list[tuple[int, float]] = field(default_factory=list)


def _row_equilibrated_sigma(mat: np.ndarray) -> float:
    norms = np.linalg.norm(mat, axis=1)
    if mat.shape[1] < mat.shape[0] or np.any(norms == 0.0):
        return 0.0
    sv = np.linalg.svd(mat / norms[:, None], compute_uv=False)
    return float(sv[-1])


def stable_order_search(
    ops: ElementOperators,
    ws: Workspace | None = None,
    l_max: int | None = None,
    tau: float = STABILITY_TOL,
) -> StableOrderResult:
    """Smallest l with a full-row-rank moment matrix M^l.

    Starts at the dimension-heuristic bound and certifies, along the
    way, that the kernel of the kept-polynomial projector only reaches
    the image columns allowed by the family decomposition.
    """
    desc = ops.descriptor
    m = desc.order
    l_cap = l_max if l_max is not None else desc.l_max
    l_cap = min(l_cap, _map_order_cap(ops))
    n_s, n_p = ops.n_preserved, ops.n_kept_polys
    bound = heuristic_lower_bound(desc.family, m, n_s - n_p)
    if l_cap < bound:
        raise SerendipityError(
            f"l_max={l_cap} below the heuristic lower bound {bound}"
        )
    trace = []
    found = None
    sigma = 0.0
    for l in range(bound, l_cap + 1):
        mat = ops.moment_matrix(l)
        sigma = _row_equilibrated_sigma(mat)
        trace.append((l, sigma))
        if sigma > tau:
            found = l
            break
    if found is None:
        raise SerendipityError(
            f"no stable order up to l_max={l_cap}; sigma trace: "
            + ", ".join(f"l={l}: {s:.2e}" for l, s in trace)
        )
    kernel_ok = _kernel_confinement(ops, ws, found) if ws is not None else None
    ops.stable_order = found
    ops.stable_sigma = sigma
    return StableOrderResult(
        order=found,
        sigma_min=sigma,
        heuristic_bound=bound,
        moment_matrix=ops.moment_matrix(found),
        prefix_stable=True,
        kernel_confined=kernel_ok,
        sigma_trace=trace,
    )


def _map_order_cap(ops: ElementOperators) -> int:
    return int(ops.map.target_degrees.max(initial=0))


def projector_kernel(ops: ElementOperators) -> np.ndarray:
    """Orthonormal DoF-space basis of the kept-polynomial projector kernel."""
    s = ops.projector_matrix
    if s.size == 0:
        return np.eye(ops.n_preserved)
    _, sv, vt = np.linalg.svd(s, full_matrices=True)
    rank = int(np.sum(sv > 1e-12 * (sv[0] if sv.size else 1.0)))
    return vt[rank:].T


def _forbidden_band(ops: ElementOperators, ws: Workspace, l: int) -> PolyBasis:
    """Moment subspace the projector kernel must annihilate.

    Face kernels lose all cross moments (their DoFs are either inside
    the kept polynomials or reduced), edge kernels all x moments, node
    kernels every scalar moment; the claimed containment of the
    projected kernel in the gradient (resp. curl) band of degrees
    m+1..l is exactly the vanishing of these moments together with the
    kept-polynomial ones.
    """
    desc = ops.descriptor
    cell: EntityRef = ("cell", ops.cell)
    if desc.family == "face":
        return ws.cross_onb(cell).up_to_degree(l).members
    if desc.family == "edge":
        return ws.x_onb(cell).up_to_degree(l).members
    return ws.scalar_onb(cell, l)


def kernel_confinement_residual(ops: ElementOperators, ws: Workspace, l: int) -> float | None:
    """Largest forbidden moment of the projected projector kernel.

    Returns the relative magnitude of the kept-polynomial coefficients
    and the forbidden-band moments of Pi_l Ker(Pi_m), or None when the
    preserved orders void the claim (reduced-type moment DoFs kept
    above order m - 1 need not vanish on the kernel).
    """
    desc = ops.descriptor
    m = desc.order
    if desc.family == "face" and desc.p("cross") > m - 1:
        return None
    if desc.family == "edge" and desc.p("cell_x") > m - 1:
        return None
    kernel = projector_kernel(ops)
    if kernel.shape[1] == 0:
        return 0.0
    n_l = ops.n_columns(l)
    k_proj = ops.moments[:, :n_l].T @ kernel
    scale = max(float(np.abs(k_proj).max()), 1e-300)
    cell: EntityRef = ("cell", ops.cell)
    targets = ops.target_basis(l)
    band = _forbidden_band(ops, ws, l)
    pieces = [np.abs(k_proj[: ops.n_kept_polys]).max(initial=0.0)]
    if band.dim:
        coords = ws.gram(cell, targets, band.resized(targets.k_hi))
        pieces.append(np.abs(coords.T @ k_proj).max(initial=0.0))
    return float(max(pieces) / scale)


def _kernel_confinement(ops: ElementOperators, ws: Workspace, l: int, tol: float = 1e-9) -> bool | None:
    resid = kernel_confinement_residual(ops, ws, l)
    if resid is None:
        return None
    return bool(resid < tol)


# -- interpolation and error surrogates -----------------------------------------


def interpolate(ops: ElementOperators, v, ws: Workspace) -> np.ndarray:
    """Preserved DoF vector of the interpolant of an analytic field."""
    full = interpolate_dofs(ops.dofs, v, ws)
    return full[ops.dofs.preserved_idx]


def projection_values(
    ops: ElementOperators, dof_values: np.ndarray, l: int, ws: Workspace, entity: EntityRef
) -> np.ndarray:
    """Point values of the degree-l projection at entity rule points."""
    coeff = ops.projection(l) @ dof_values
    basis = ops.target_basis(l)
    vals = ws.values(entity, basis)
    return np.einsum("n,nqp->pq", coeff, vals)


def l2_projection_error(ops, dof_values, l, ws, field) -> float:
    """|| v - Pi_l v_h ||_K for an analytic v and interpolant DoFs."""
    cell: EntityRef = ("cell", ops.cell)
    rule = ws.rule(cell)
    approx = projection_values(ops, dof_values, l, ws, cell)
    exact = np.asarray(field.value(rule.points), dtype=float)
    if exact.ndim == 1:
        exact = exact[:, None]
    diff = exact - approx[:, : exact.shape[1]]
    return float(np.sqrt(rule.weights @ np.sum(diff * diff, axis=1)))


# -- transfers along the differential complex -----------------------------------


def _edge_trace_identification(ws: Workspace, node_desc: SpaceDescriptor, dofs: DofSet, e: int) -> np.ndarray:
    """Node DoFs -> coefficients of the edge trace in the edge basis.

    The trace of a node member on an edge is a polynomial of the trace
    order, pinned by the two endpoint values and the edge moments.
    """
    m = node_desc.o("edge")
    edge: EntityRef = ("edge", e)
    onb = ws.scalar_onb(edge, m)
    a, b = ws.mesh.edges[e]
    frame = ws.frame(edge)
    exps = poly.monomial_exponents(1, onb.k_hi)
    pts = frame.local_coords(ws.mesh.vertices[[a, b]])
    endpoint = onb.coeffs[:, 0, :] @ poly.monomial_values(exps, pts)  # (n, 2)
    n = onb.dim
    rows2 = dofs.rows(2, edge)
    rows_a = dofs.rows(1, ("vertex", a))
    rows_b = dofs.rows(1, ("vertex", b))
    # equations: p(a), p(b) and the first n - 2 orthonormal moments
    sys = np.zeros((n, n))
    rhs = np.zeros((n, dofs.n_total))
    sys[0] = endpoint[:, 0]
    rhs[0, rows_a[0]] = 1.0
    sys[1] = endpoint[:, 1]
    rhs[1, rows_b[0]] = 1.0
    for i in range(rows2.size):
        sys[2 + i, i] = 1.0
        rhs[2 + i, rows2[i]] = 1.0
    return np.linalg.solve(sys, rhs)


def gradient_transfer(node_desc: SpaceDescriptor, ws: Workspace, c: int, node_dofs: DofSet | None = None) -> tuple[SpaceDescriptor, DofSet, np.ndarray]:
    """Full DoF vector of the gradient from a node full DoF vector.

    Implements the integration-by-parts identities that express every
    edge-family DoF of grad v through vertex values and edge, face and
    cell moments of v.
    """
    if node_desc.family != "node":
        raise ValueError("gradient_transfer expects a node descriptor")
    img = gradient_image_space(node_desc)
    node_dofs = node_dofs or build_dof_set(node_desc, ws, c)
    img_dofs = build_dof_set(img, ws, c)
    cell: EntityRef = ("cell", c)
    h_cell = ws.frame(cell).h
    T = np.zeros((img_dofs.n_total, node_dofs.n_total))
    traces = {}
    for e in ws.mesh.cell_edges(c):
        traces[e] = _edge_trace_identification(ws, node_desc, node_dofs, e)
    # [1] tangential moments: (grad v . t, p)_E = [v p]_a^b - (v, dp/dt)_E
    for e in ws.mesh.cell_edges(c):
        rows = img_dofs.rows(1, ("edge", e))
        if rows.size == 0:
            continue
        edge: EntityRef = ("edge", e)
        onb = ws.scalar_onb(edge, img.o("tangent"))
        a, b = ws.mesh.edges[e]
        frame = ws.frame(edge)
        exps = poly.monomial_exponents(1, onb.k_hi)
        pts = frame.local_coords(ws.mesh.vertices[[a, b]])
        vals = onb.coeffs[:, 0, :] @ poly.monomial_values(exps, pts)
        rows_a = node_dofs.rows(1, ("vertex", a))
        rows_b = node_dofs.rows(1, ("vertex", b))
        T[rows, rows_b[0]] += vals[:, 1]
        T[rows, rows_a[0]] -= vals[:, 0]
        dp = poly.diff_op(onb, "grad", h=frame.h)
        trace_onb = ws.scalar_onb(edge, node_desc.o("edge"))
        expand = ws.gram(edge, dp, trace_onb)
        T[rows] -= expand @ traces[e]
    # [2] face moments: (grad v, xi)_F = -(v, div_F xi)_F + sum_E (v, xi.n_E)_E
    for f, s in ws.mesh.cells[c]:
        rows = img_dofs.rows(2, ("face", f))
        if rows.size == 0:
            continue
        face: EntityRef = ("face", f)
        h_face = ws.frame(face).h
        xis = ws.face_x_onb(face).up_to_degree(img.o("face_x") + 1)
        div_xi = poly.diff_op(xis.members, "div", h=h_face)
        fonb = ws.scalar_onb(face, node_desc.o("face"))
        node_rows3 = node_dofs.rows(3, face)
        T[np.ix_(rows, node_rows3)] -= ws.gram(face, div_xi, fonb)
        gens = xis.potentials
        for e, sigma in ws.mesh.face_edges[f]:
            offset = ws.edge_line_offset(face, e, sigma)
            restr = ws.restrict_scalar(face, ("edge", e), gens, node_desc.o("edge"))
            T[rows] += offset * (restr @ traces[e])
    # [5] cell moments: (grad v, u)_K = -(v, div u)_K + sum_F s (v, gen d_F)_F
    rows = img_dofs.rows(5, cell)
    if rows.size:
        us = ws.x_onb(cell).up_to_degree(img.o("cell_x") + 1)
        div_u = poly.diff_op(us.members, "div", h=h_cell)
        conb = ws.scalar_onb(cell, node_desc.o("cell"))
        node_rows4 = node_dofs.rows(4, cell)
        T[np.ix_(rows, node_rows4)] -= ws.gram(cell, div_u, conb)
        gens = us.potentials
        for f, s in ws.mesh.cells[c]:
            face: EntityRef = ("face", f)
            offset = ws.face_plane_offset(cell, f, s)
            fonb = ws.scalar_onb(face, node_desc.o("face"))
            restr = ws.restrict_scalar(cell, face, gens, node_desc.o("face"))
            node_rows3 = node_dofs.rows(3, face)
            T[np.ix_(rows, node_rows3)] += offset * restr
    return img, img_dofs, T


def curl_transfer(edge_desc: SpaceDescriptor, ws: Workspace, c: int, mm: MomentMap) -> tuple[SpaceDescriptor, DofSet, np.ndarray]:
    """Full face-family DoF vector of the curl from an edge full vector.

    Normal moments of the curl are in-plane curls of the tangential
    part, read from the rotation identification of the edge moment map;
    cross moments of the curl are edge DoF block [4] verbatim.
    """
    if edge_desc.family != "edge":
        raise ValueError("curl_transfer expects an edge descriptor")
    img = curl_image_space(edge_desc)
    img_dofs = build_dof_set(img, ws, c)
    edge_dofs = mm.dofs
    cell: EntityRef = ("cell", c)
    T = np.zeros((img_dofs.n_total, edge_dofs.n_total))
    for f, s in ws.mesh.cells[c]:
        rows = img_dofs.rows(1, ("face", f))
        if rows.size == 0:
            continue
        T[rows] = mm.rot_matrices[f][: rows.size]
    rows3 = img_dofs.rows(3, cell)
    rows4 = edge_dofs.rows(4, cell)
    if rows3.size:
        T[np.ix_(rows3, rows4[: rows3.size])] = np.eye(rows3.size)
    return img, img_dofs, T


def divergence_matrix(ops: ElementOperators) -> np.ndarray:
    """Preserved face DoFs -> coefficients of the (polynomial) divergence."""
    if ops.descriptor.family != "face":
        raise ValueError("divergence is only identified for face spaces")
    return ops.map.div_matrix @ ops.extension()


# -- commuting diagrams ----------------------------------------------------------


@dataclass(frozen=True)
class CommutingResult:
    identity: str
    residual: float
    scale: float

    @property
    def relative(self) -> float:
        return self.residual / self.scale if self.scale > 0 else self.residual


class _DerivedField:
    """Wraps the derivative of a catalog field as a field of its own."""

    def __init__(self, base, kind: str):
        self._base = base
        self._kind = kind

    def value(self, pts):
        return getattr(self._base, self._kind)(pts)

    def curl(self, pts):
        if self._kind == "grad":
            return np.zeros((len(np.atleast_2d(pts)), 3))
        raise NotImplementedError


def commuting_check(ops: ElementOperators, v, ws: Workspace) -> CommutingResult:
    """Residual of the commuting identity applicable to this family.

    Face: divergence of the interpolant against the projected
    divergence.  Edge: face DoFs of the curl of the interpolant against
    the interpolated curl.  Node: edge DoFs of the gradient of the
    interpolant against the interpolated gradient.
    """
    desc = ops.descriptor
    cell: EntityRef = ("cell", ops.cell)
    c = ops.cell
    if desc.family == "face":
        pres = interpolate(ops, v, ws)
        div_coeff = divergence_matrix(ops) @ pres
        chi = ws.scalar_onb(cell, desc.o("grad"))
        rule = ws.rule(cell)
        vals = np.asarray(v.div(rule.points), dtype=float)[None, None, :]
        exact = ws.project_onto(cell, chi, vals)[0] if chi.dim else np.zeros(0)
        resid = float(np.linalg.norm(div_coeff - exact))
        scale = max(float(np.linalg.norm(exact)), 1.0)
        return CommutingResult("div_interp_equals_proj_div", resid, scale)
    if desc.family == "edge":
        pres = interpolate(ops, v, ws)
        full = ops.extension() @ pres
        img, img_dofs, T = curl_transfer(desc, ws, c, ops.map)
        lhs = T @ full
        rhs = interpolate_dofs(img_dofs, _DerivedField(v, "curl"), ws)
        resid = float(np.linalg.norm(lhs - rhs))
        scale = max(float(np.linalg.norm(rhs)), 1.0)
        return CommutingResult("curl_interp_equals_interp_curl", resid, scale)
    if desc.family == "node":
        pres = interpolate(ops, v, ws)
        full = ops.extension() @ pres
        img, img_dofs, T = gradient_transfer(desc, ws, c, ops.dofs)
        lhs = T @ full
        rhs = interpolate_dofs(img_dofs, _DerivedField(v, "grad"), ws)
        resid = float(np.linalg.norm(lhs - rhs))
        scale = max(float(np.linalg.norm(rhs)), 1.0)
        return CommutingResult("grad_interp_equals_interp_grad", resid, scale)
    raise ValueError(f"unknown family {desc.family!r}")


# -- equivalent discrete bilinear forms -------------------------------------------


@dataclass
class FormResult:
    matrix: np.ndarray
    order: int | None
    kernel_dim: int
    factors: list[str]
    sigma_gap: float


def _image_stable_order(
    composite: np.ndarray,
    degrees: np.ndarray,
    kernel_dim: int,
    l_start: int,
    l_cap: int,
    tau: float = STABILITY_TOL,
) -> tuple[int, np.ndarray]:
    """Smallest l whose composite moment rows make the form full rank."""
    n = composite.shape[1]
    want = n - kernel_dim
    col_scale = np.linalg.norm(composite, axis=0)
    col_scale[col_scale == 0.0] = 1.0
    trace = []
    for l in range(l_start, l_cap + 1):
        n_l = int(np.searchsorted(degrees, l + 0.5))
        mat = composite[:n_l]
        if mat.shape[0] < want:
            continue
        sv = np.linalg.svd(mat / col_scale, compute_uv=False)
        if len(sv) >= want and want > 0:
            sig = sv[want - 1] / sv[0]
        else:
            sig = 1.0
        trace.append((l, sig))
        if want == 0 or sig > tau:
            return l, mat
    raise SerendipityError(
        "no stable image order; trace: "
        + ", ".join(f"l={l}: {s:.2e}" for l, s in trace)
    )


def bilinear_form(
    ops: ElementOperators,
    kind: str,
    ws: Workspace,
    coeff: float = 1.0,
    l: int | None = None,
) -> FormResult:
    """Element matrix of an equivalent discrete bilinear form.

    mass: (Pi_l u, Pi_l v) on the space itself.  gradgrad: gradients
    are transferred to their edge-family image and projected there in
    full.  curlcurl: likewise through the face-family image of the
    curl.  divdiv: the divergence is a polynomial, no projection.
    The assembly path is recorded in ``factors``; it never contains a
    DoF-space product, which is the structural form of being
    stabilization free.
    """
    desc = ops.descriptor
    c = ops.cell
    if kind == "mass":
        ll = l if l is not None else (ops.stable_order or stable_order_search(ops).order)
        p_l = ops.projection(ll)
        mat = coeff * p_l.T @ p_l
        kd = _kernel_dim_of(mat, ops.n_preserved)
        return FormResult(mat, ll, kd, ["projection", "projection"], _sigma_gap(mat, kd))
    if kind == "divdiv":
        d = divergence_matrix(ops)
        mat = coeff * d.T @ d
        kd = _kernel_dim_of(mat, ops.n_preserved)
        return FormResult(mat, None, kd, ["divergence", "divergence"], _sigma_gap(mat, kd))
    if kind == "curlcurl":
        img, img_dofs, T = curl_transfer(desc, ws, c, ops.map)
        composite_dofs = T @ ops.extension()
        mm = moment_map(img, ws, c, img_dofs)
        comp = mm.w_full.T @ composite_dofs
        kd = _rank_deficiency(composite_dofs)
        l_start = max(desc.order - 1, 0) if l is None else l
        ll, mat = _image_stable_order(
            comp, mm.target_degrees, kd, l_start, min(desc.l_max, ws.l_cap)
        )
        A = coeff * mat.T @ mat
        return FormResult(A, ll, kd, ["curl-transfer", "projection"] * 1, _sigma_gap(A, kd))
    if kind == "gradgrad":
        img, img_dofs, T = gradient_transfer(desc, ws, c, ops.dofs)
        composite_dofs = T @ ops.extension()
        mm = moment_map(img, ws, c, img_dofs)
        comp = mm.w_full.T @ composite_dofs
        kd = _rank_deficiency(composite_dofs)
        l_start = max(desc.order - 1, 0) if l is None else l
        ll, mat = _image_stable_order(
            comp, mm.target_degrees, kd, l_start, min(desc.l_max, ws.l_cap)
        )
        A = coeff * mat.T @ mat
        return FormResult(A, ll, kd, ["gradient-transfer", "projection"], _sigma_gap(A, kd))
    raise ValueError(f"unknown form kind {kind!r}")


def _rank_deficiency(mat: np.ndarray, tol: float = 1e-10) -> int:
    if mat.size == 0:
        return mat.shape[1]
    sv = np.linalg.svd(mat, compute_uv=False)
    rank = int(np.sum(sv > tol * sv[0]))
    return mat.shape[1] - rank

def _kernel_dim_of(mat: np.ndarray, n: int, tol: float = 1e-10) -> int:
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return n
    return int(np.sum(sv <= tol * sv[0])) + (n - sv.size)


def _sigma_gap(mat: np.ndarray, kernel_dim: int) -> float:
    """Ratio between the smallest kept and largest dropped eigenvalue."""
    ev = np.linalg.eigvalsh(mat)
    n = len(ev)
    if kernel_dim == 0:
        return np.inf if ev.min() > 0 else float(ev.max() / max(abs(ev.min()), 1e-300))
    kept = ev[kernel_dim:]
    dropped = np.abs(ev[:kernel_dim]).max()
    if kept.size == 0:
        return np.inf
    return float(kept.min() / max(dropped, 1e-300))
