"""Scaled polynomial bases and exact coefficient-level calculus.

Polynomials live on a mesh entity through its local frame: members are
linear combinations of scaled monomials ((x - origin) . axis / h)^alpha
in graded-lex order.  Differential operators (grad, curl, div and their
in-plane versions) and coordinate multiplications act exactly on the
coefficient arrays, which is what makes the moment-map construction of
the projectors a pure linear-algebra exercise.

``PolyBasis.degrees`` always tags each member with its actual polynomial
degree; generator orders (the degree of p in fields like x cross p) are
recovered by shifting, which keeps one grading convention everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from math import comb

import numpy as np
from scipy.linalg import qr as _scipy_qr

RANK_TOL = 1e-10


def monomial_dim(k: int, d: int) -> int:
    """Dimension of the scalar polynomials of total degree <= k in d vars."""
    if k < 0:
        return 0
    return comb(k + d, d)


@lru_cache(maxsize=512)
def monomial_exponents(d: int, k: int) -> tuple[tuple[int, ...], ...]:
    """Exponent tuples of all monomials of degree <= k, graded-lex order."""
    out: list[tuple[int, ...]] = []
    for total in range(k + 1):
        out.extend(_degree_block(d, total))
    return tuple(out)


def _degree_block(d: int, total: int) -> list[tuple[int, ...]]:
    if d == 1:
        return [(total,)]
    block = []
    for first in range(total, -1, -1):
        for rest in _degree_block(d - 1, total - first):
            block.append((first,) + rest)
    return block


@lru_cache(maxsize=512)
def _exponent_index(d: int, k: int):
    return {e: i for i, e in enumerate(monomial_exponents(d, k))}


def monomial_values(exponents, points: np.ndarray) -> np.ndarray:
    """Evaluate monomials at local points: (n_mono, n_points)."""
    pts = np.atleast_2d(points)
    vals = np.empty((len(exponents), len(pts)))
    for i, e in enumerate(exponents):
        v = np.ones(len(pts))
        for a, p in enumerate(e):
            if p:
                v = v * pts[:, a] ** p
        vals[i] = v
    return vals


@dataclass(frozen=True)
class PolyBasis:
    """Basis of scalar or vector polynomials over scaled monomials.

    ``coeffs`` has shape (n_members, q, n_mono) with monomials running
    over all exponents of degree <= k_hi.  Vector components refer to
    the frame axes (in-plane components for faces, global for cells).
    """

    d: int
    q: int
    k_hi: int
    coeffs: np.ndarray
    degrees: np.ndarray
    orthonormal: bool = False

    @property
    def dim(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_mono(self) -> int:
        return self.coeffs.shape[2]

    def flat(self) -> np.ndarray:
        return self.coeffs.reshape(self.dim, -1)

    def take(self, idx) -> "PolyBasis":
        return replace(
            self,
            coeffs=self.coeffs[idx],
            degrees=self.degrees[idx],
            orthonormal=self.orthonormal,
        )

    def resized(self, k_new: int) -> "PolyBasis":
        """Re-express over the monomials of degree <= k_new.

        Growing pads with zeros; shrinking requires the dropped
        coefficients to vanish (members of low actual degree stored in
        an oversized array).
        """
        n_new = monomial_dim(k_new, self.d)
        if n_new == self.n_mono:
            return replace(self, k_hi=k_new)
        if n_new > self.n_mono:
            c = np.zeros((self.dim, self.q, n_new))
            c[:, :, : self.n_mono] = self.coeffs
            return replace(self, k_hi=k_new, coeffs=c)
        tail = self.coeffs[:, :, n_new:]
        if tail.size and np.abs(tail).max() > 0.0:
            raise ValueError("resizing would drop nonzero coefficients")
        return replace(self, k_hi=k_new, coeffs=self.coeffs[:, :, :n_new].copy())


def empty_basis(d: int, q: int) -> PolyBasis:
    return PolyBasis(d, q, 0, np.zeros((0, q, 1)), np.zeros(0, dtype=int))


def monomial_basis(d: int, q: int, k_lo: int, k_hi: int) -> PolyBasis:
    """Monomial basis of P^q over degrees k_lo..k_hi (empty if k_hi < k_lo)."""
    if k_hi < 0 or k_hi < k_lo:
        return empty_basis(d, q)
    exps = monomial_exponents(d, k_hi)
    lo = monomial_dim(k_lo - 1, d)
    members = []
    degrees = []
    for j in range(lo, len(exps)):
        deg = sum(exps[j])
        for c in range(q):
            m = np.zeros((q, len(exps)))
            m[c, j] = 1.0
            members.append(m)
            degrees.append(deg)
    coeffs = np.array(members)
    degrees = np.array(degrees, dtype=int)
    order = np.argsort(degrees, kind="stable")
    return PolyBasis(d, q, k_hi, coeffs[order], degrees[order])


# -- differential operators --------------------------------------------------


@lru_cache(maxsize=512)
def _derivative_matrix(d: int, k: int, axis: int) -> np.ndarray:
    """d/dxi_axis on monomial coefficients of degree <= k (same size)."""
    exps = monomial_exponents(d, k)
    idx = _exponent_index(d, k)
    mat = np.zeros((len(exps), len(exps)))
    for j, e in enumerate(exps):
        if e[axis] == 0:
            continue
        tgt = list(e)
        tgt[axis] -= 1
        mat[idx[tuple(tgt)], j] = e[axis]
    return mat


@lru_cache(maxsize=512)
def _shift_matrix(d: int, k: int, axis: int) -> np.ndarray:
    """Multiplication by xi_axis on coefficients (degree k -> k + 1)."""
    exps = monomial_exponents(d, k)
    idx_hi = _exponent_index(d, k + 1)
    mat = np.zeros((monomial_dim(k + 1, d), len(exps)))
    for j, e in enumerate(exps):
        tgt = list(e)
        tgt[axis] += 1
        mat[idx_hi[tuple(tgt)], j] = 1.0
    return mat


def diff_op(basis: PolyBasis, op: str, h: float = 1.0) -> PolyBasis:
    """Apply a differential operator member-wise, exactly in coefficients.

    The 1/h factor from the scaled coordinates is applied so the result
    is expressed in the same frame.  Supported operators: grad / grad_F
    (scalar to vector), div (vector to scalar, any d), curl (3D vector),
    curl_F (2D scalar to rotated gradient), rot_F (2D vector to the
    scalar in-plane curl).  Member degrees drop by one.
    """
    d, q, k = basis.d, basis.q, basis.k_hi
    if basis.dim == 0:
        qq = {"grad": d, "grad_F": d, "div": 1, "curl": 3, "curl_F": 2, "rot_F": 1}[op]
        return empty_basis(d, qq)
    D = [_derivative_matrix(d, k, a) / h for a in range(d)]
    c = basis.coeffs
    degs = np.maximum(basis.degrees - 1, 0)
    if op in ("grad", "grad_F"):
        if q != 1:
            raise ValueError("grad expects a scalar basis")
        out = np.stack([c[:, 0, :] @ D[a].T for a in range(d)], axis=1)
        return PolyBasis(d, d, k, out, degs)
    if op == "div":
        if q != d:
            raise ValueError("div expects a d-vector basis")
        out = sum(c[:, a, :] @ D[a].T for a in range(d))
        return PolyBasis(d, 1, k, out[:, None, :], degs)
    if op == "curl":
        if d != 3 or q != 3:
            raise ValueError("curl expects a 3D vector basis")
        comps = [
            c[:, 2, :] @ D[1].T - c[:, 1, :] @ D[2].T,
            c[:, 0, :] @ D[2].T - c[:, 2, :] @ D[0].T,
            c[:, 1, :] @ D[0].T - c[:, 0, :] @ D[1].T,
        ]
        return PolyBasis(d, 3, k, np.stack(comps, axis=1), degs)
    if op == "curl_F":
        if d != 2 or q != 1:
            raise ValueError("curl_F expects a 2D scalar basis")
        out = np.stack([c[:, 0, :] @ D[1].T, -(c[:, 0, :] @ D[0].T)], axis=1)
        return PolyBasis(d, 2, k, out, degs)
    if op == "rot_F":
        if d != 2 or q != 2:
            raise ValueError("rot_F expects a 2D vector basis")
        out = c[:, 1, :] @ D[0].T - c[:, 0, :] @ D[1].T
        return PolyBasis(d, 1, k, out[:, None, :], degs)
    raise ValueError(f"unknown differential operator {op!r}")


def coordinate_multiply(basis: PolyBasis, mode: str) -> PolyBasis:
    """Multiply members by the scaled coordinate field; degrees grow by one.

    Modes: ``x`` maps scalars p to xi p (q = d), ``cross`` maps 3D
    vectors p to xi x p, ``perp`` maps 2D scalars p to (-xi2, xi1) p.
    """
    d, q, k = basis.d, basis.q, basis.k_hi
    if basis.dim == 0:
        qq = {"x": d, "cross": 3, "perp": 2}[mode]
        return empty_basis(d, qq)
    S = [_shift_matrix(d, k, a) for a in range(d)]
    c = basis.coeffs
    degs = basis.degrees + 1
    if mode == "x":
        if q != 1:
            raise ValueError("mode 'x' expects scalars")
        out = np.stack([c[:, 0, :] @ S[a].T for a in range(d)], axis=1)
        return PolyBasis(d, d, k + 1, out, degs)
    if mode == "cross":
        if d != 3 or q != 3:
            raise ValueError("mode 'cross' expects 3D vectors")
        comps = [
            c[:, 2, :] @ S[1].T - c[:, 1, :] @ S[2].T,
            c[:, 0, :] @ S[2].T - c[:, 2, :] @ S[0].T,
            c[:, 1, :] @ S[0].T - c[:, 0, :] @ S[1].T,
        ]
        return PolyBasis(d, 3, k + 1, np.stack(comps, axis=1), degs)
    if mode == "perp":
        if d != 2 or q != 1:
            raise ValueError("mode 'perp' expects 2D scalars")
        out = np.stack([-(c[:, 0, :] @ S[1].T), c[:, 0, :] @ S[0].T], axis=1)
        return PolyBasis(d, 2, k + 1, out, degs)
    raise ValueError(f"unknown coordinate multiplication {mode!r}")


# -- rank-revealing selection ------------------------------------------------


def independent_rows(mat: np.ndarray, tol: float = RANK_TOL, scale: float | None = None) -> np.ndarray:
    """Indices of a full-rank row subset chosen by pivoted QR.

    ``scale`` fixes the reference magnitude for the rank threshold;
    without it the leading R diagonal is used.
    """
    if mat.shape[0] == 0 or mat.shape[1] == 0:
        return np.zeros(0, dtype=int)
    _, r, piv = _scipy_qr(mat.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0:
        return np.zeros(0, dtype=int)
    ref = scale if scale is not None else diag[0]
    if ref == 0.0:
        return np.zeros(0, dtype=int)
    rank = int(np.sum(diag > tol * ref))
    return np.sort(piv[:rank])


def graded_select(basis: PolyBasis, tol: float = RANK_TOL) -> PolyBasis:
    """Full-rank graded subset of a redundant spanning set.

    Degree blocks are processed low to high; members already spanned by
    lower blocks (or by earlier members of the same block) are dropped.
    Selection never evicts a previously accepted member, so the result
    is stable under extending the input to higher degrees.
    """
    flat = basis.flat()
    norms = np.linalg.norm(flat, axis=1)
    nonzero = norms > 0
    unit = np.zeros_like(flat)
    unit[nonzero] = flat[nonzero] / norms[nonzero, None]
    Q = np.zeros((0, flat.shape[1]))
    selected: list[int] = []
    for deg in sorted(set(basis.degrees.tolist())):
        block = np.where((basis.degrees == deg) & nonzero)[0]
        if block.size == 0:
            continue
        res = unit[block] - (unit[block] @ Q.T) @ Q
        res = res - (res @ Q.T) @ Q
        idx = independent_rows(res, tol, scale=1.0)
        if idx.size:
            chosen = block[idx]
            selected.extend(chosen.tolist())
            qn, _ = np.linalg.qr(res[idx].T)
            Q = np.vstack([Q, qn.T])
    return basis.take(np.array(sorted(selected), dtype=int))


# -- structured spaces -------------------------------------------------------


def grad_space(d: int, k_pot: int) -> PolyBasis:
    """Basis of grad P_{k_pot}: gradients of monomials of degree 1..k_pot."""
    if k_pot < 1:
        return empty_basis(d, d)
    out = diff_op(monomial_basis(d, 1, 1, k_pot), "grad")
    return out.resized(k_pot - 1)


def curl_f_space(k_pot: int) -> PolyBasis:
    """Basis of curl_F P_{k_pot} on a face: rotated gradients."""
    if k_pot < 1:
        return empty_basis(2, 2)
    out = diff_op(monomial_basis(2, 1, 1, k_pot), "curl_F")
    return out.resized(k_pot - 1)


def cross_space(k_gen: int) -> PolyBasis:
    """Full-rank graded basis of x cross P^3_{k_gen} (kernel {x p} removed)."""
    if k_gen < 0:
        return empty_basis(3, 3)
    raw = coordinate_multiply(monomial_basis(3, 3, 0, k_gen), "cross")
    return graded_select(raw)


def curl_image_space(k: int) -> PolyBasis:
    """Full-rank graded basis of curl P^3_k."""
    if k < 1:
        return empty_basis(3, 3)
    img = diff_op(monomial_basis(3, 3, 0, k), "curl")
    return graded_select(img).resized(k - 1)


def x_scalar_space(d: int, k_gen: int) -> PolyBasis:
    """Basis of x P_{k_gen} (injective, dimension = dim P_{k_gen})."""
    if k_gen < 0:
        return empty_basis(d, d)
    return coordinate_multiply(monomial_basis(d, 1, 0, k_gen), "x")


def perp_space(k_gen: int) -> PolyBasis:
    """Basis of x^perp P_{k_gen} on a face (injective)."""
    if k_gen < 0:
        return empty_basis(2, 2)
    return coordinate_multiply(monomial_basis(2, 1, 0, k_gen), "perp")


@dataclass(frozen=True)
class DecompositionPair:
    """Two summands realizing a direct-sum split of P^q_k."""

    first: PolyBasis
    second: PolyBasis
    kind: str
    k: int

    @property
    def dims(self) -> tuple[int, int]:
        return self.first.dim, self.second.dim

    def stacked(self) -> np.ndarray:
        return np.vstack([self.first.flat(), self.second.flat()])


def decompose(kind: str, k: int) -> DecompositionPair:
    """Direct-sum decomposition of the full vector polynomial space.

    grad_cross:  P^3_k = grad P_{k+1}   (+)  x cross P^3_{k-1}
    curl_x:      P^3_k = curl P^3_{k+1} (+)  x P_{k-1}
    gradF_perp:  P^2_k = grad_F P_{k+1} (+)  x^perp P_{k-1}
    curlF_x:     P^2_k = curl_F P_{k+1} (+)  x P_{k-1}
    """
    if k < 0:
        raise ValueError("decomposition order must be >= 0")
    if kind == "grad_cross":
        first, second = grad_space(3, k + 1), cross_space(k - 1)
    elif kind == "curl_x":
        first, second = curl_image_space(k + 1), x_scalar_space(3, k - 1)
    elif kind == "gradF_perp":
        first, second = grad_space(2, k + 1), perp_space(k - 1)
    elif kind == "curlF_x":
        first, second = curl_f_space(k + 1), x_scalar_space(2, k - 1)
    else:
        raise ValueError(f"unknown decomposition kind {kind!r}")
    return DecompositionPair(first.resized(k), second.resized(k), kind, k)
