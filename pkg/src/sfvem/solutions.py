"""Manufactured solution catalog with closed-form derivatives.

Every entry provides the callables the study kinds need (value, grad,
div, curl as applicable), so no numerical differentiation enters any
verification path.  Entries are deterministic; the random families are
seeded trigonometric sums with hand-derived derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class ScalarField:
    name: str
    value: Callable
    grad: Callable

    @property
    def kind(self) -> str:
        return "scalar"


@dataclass(frozen=True)
class VectorField:
    name: str
    value: Callable
    curl: Callable
    div: Callable

    @property
    def kind(self) -> str:
        return "vector"


def _pts(x):
    return np.atleast_2d(np.asarray(x, dtype=float))


def polynomial_scalar(degree: int, seed: int = 0) -> ScalarField:
    """Random polynomial of exact degree with coefficients from a seed."""
    from sfvem import polynomials as poly

    rng = np.random.default_rng(seed + 1000 * degree)
    exps = poly.monomial_exponents(3, degree)
    coef = rng.uniform(-1.0, 1.0, len(exps))

    def value(x):
        p = _pts(x)
        vals = poly.monomial_values(exps, p)
        return coef @ vals

    def grad(x):
        p = _pts(x)
        out = np.zeros((len(p), 3))
        for c, e in zip(coef, exps):
            for a in range(3):
                if e[a]:
                    ee = list(e)
                    ee[a] -= 1
                    mono = np.prod(
                        [p[:, b] ** ee[b] for b in range(3)], axis=0
                    )
                    out[:, a] += c * e[a] * mono
        return out

    return ScalarField(f"poly{degree}_s{seed}", value, grad)


def polynomial_vector(degree: int, seed: int = 0) -> VectorField:
    comps = [polynomial_scalar(degree, seed + i) for i in range(3)]

    def value(x):
        p = _pts(x)
        return np.stack([c.value(p) for c in comps], axis=1)

    def div(x):
        p = _pts(x)
        g = [c.grad(p) for c in comps]
        return g[0][:, 0] + g[1][:, 1] + g[2][:, 2]

    def curl(x):
        p = _pts(x)
        g = [c.grad(p) for c in comps]
        return np.stack(
            [
                g[2][:, 1] - g[1][:, 2],
                g[0][:, 2] - g[2][:, 0],
                g[1][:, 0] - g[0][:, 1],
            ],
            axis=1,
        )

    return VectorField(f"polyvec{degree}_s{seed}", value, curl, div)


def trig_vector() -> VectorField:
    """The classic benchmark field (sin pi x, cos pi y, x y z)."""

    def value(x):
        p = _pts(x)
        return np.stack(
            [np.sin(np.pi * p[:, 0]), np.cos(np.pi * p[:, 1]), p[:, 0] * p[:, 1] * p[:, 2]],
            axis=1,
        )

    def div(x):
        p = _pts(x)
        return (
            np.pi * np.cos(np.pi * p[:, 0])
            - np.pi * np.sin(np.pi * p[:, 1])
            + p[:, 0] * p[:, 1]
        )

    def curl(x):
        p = _pts(x)
        return np.stack(
            [p[:, 0] * p[:, 2], -p[:, 1] * p[:, 2], np.zeros(len(p))],
            axis=1,
        )

    return VectorField("trig_xyz", value, curl, div)


def trig_scalar() -> ScalarField:
    def value(x):
        p = _pts(x)
        return np.sin(np.pi * p[:, 0]) * np.cos(np.pi * p[:, 1]) + p[:, 2] ** 2

    def grad(x):
        p = _pts(x)
        return np.stack(
            [
                np.pi * np.cos(np.pi * p[:, 0]) * np.cos(np.pi * p[:, 1]),
                -np.pi * np.sin(np.pi * p[:, 0]) * np.sin(np.pi * p[:, 1]),
                2.0 * p[:, 2],
            ],
            axis=1,
        )

    return ScalarField("trig_scalar", value, grad)


def random_smooth_vector(seed: int, n_modes: int = 3) -> VectorField:
    """Seeded sum of plane-wave modes a sin(b . x + c)."""
    rng = np.random.default_rng(seed)
    amps = rng.uniform(-1.0, 1.0, (n_modes, 3))
    wavevecs = rng.uniform(-2.0, 2.0, (n_modes, 3))
    phases = rng.uniform(0.0, 2 * np.pi, n_modes)

    def value(x):
        p = _pts(x)
        out = np.zeros((len(p), 3))
        for a, b, c in zip(amps, wavevecs, phases):
            out += a[None, :] * np.sin(p @ b + c)[:, None]
        return out

    def div(x):
        p = _pts(x)
        out = np.zeros(len(p))
        for a, b, c in zip(amps, wavevecs, phases):
            out += (a @ b) * np.cos(p @ b + c)
        return out

    def curl(x):
        p = _pts(x)
        out = np.zeros((len(p), 3))
        for a, b, c in zip(amps, wavevecs, phases):
            out += np.cross(b, a)[None, :] * np.cos(p @ b + c)[:, None]
        return out

    return VectorField(f"random_smooth_{seed}", value, curl, div)


def random_smooth_scalar(seed: int, n_modes: int = 3) -> ScalarField:
    rng = np.random.default_rng(seed)
    amps = rng.uniform(-1.0, 1.0, n_modes)
    wavevecs = rng.uniform(-2.0, 2.0, (n_modes, 3))
    phases = rng.uniform(0.0, 2 * np.pi, n_modes)

    def value(x):
        p = _pts(x)
        out = np.zeros(len(p))
        for a, b, c in zip(amps, wavevecs, phases):
            out += a * np.sin(p @ b + c)
        return out

    def grad(x):
        p = _pts(x)
        out = np.zeros((len(p), 3))
        for a, b, c in zip(amps, wavevecs, phases):
            out += a * b[None, :] * np.cos(p @ b + c)[:, None]
        return out

    return ScalarField(f"random_smooth_scalar_{seed}", value, grad)


def gradient_field(seed: int = 0) -> VectorField:
    """Curl-free field: the gradient of a seeded smooth scalar."""
    base = random_smooth_scalar(seed)
    rng = np.random.default_rng(seed)
    amps = rng.uniform(-1.0, 1.0, 3)
    wavevecs = rng.uniform(-2.0, 2.0, (3, 3))
    phases = rng.uniform(0.0, 2 * np.pi, 3)

    def value(x):
        return base.grad(x)

    def div(x):
        p = _pts(x)
        out = np.zeros(len(p))
        for a, b, c in zip(amps, wavevecs, phases):
            out -= a * (b @ b) * np.sin(p @ b + c)
        return out

    def curl(x):
        p = _pts(x)
        return np.zeros((len(p), 3))

    return VectorField(f"gradient_{seed}", value, curl, div)


def divergence_free_field(seed: int = 0) -> VectorField:
    """Divergence-free field: the curl of a seeded smooth vector."""
    base = random_smooth_vector(seed)
    rng = np.random.default_rng(seed)
    amps = rng.uniform(-1.0, 1.0, (3, 3))
    wavevecs = rng.uniform(-2.0, 2.0, (3, 3))
    phases = rng.uniform(0.0, 2 * np.pi, 3)

    def value(x):
        return base.curl(x)

    def div(x):
        p = _pts(x)
        return np.zeros(len(p))

    def curl(x):
        # curl curl = grad div - laplace, computed mode by mode
        p = _pts(x)
        out = np.zeros((len(p), 3))
        for a, b, c in zip(amps, wavevecs, phases):
            n = np.cross(b, np.cross(b, a))
            out -= n[None, :] * np.sin(p @ b + c)[:, None]
        return out

    return VectorField(f"divfree_{seed}", value, curl, div)


def divergence_one_field() -> VectorField:
    """Field with unit divergence and a smooth rotational part."""

    def value(x):
        p = _pts(x)
        return np.stack(
            [p[:, 0] / 3.0 + np.sin(p[:, 2]), p[:, 1] / 3.0, p[:, 2] / 3.0 + np.cos(p[:, 0])],
            axis=1,
        )

    def div(x):
        p = _pts(x)
        return np.ones(len(p))

    def curl(x):
        p = _pts(x)
        return np.stack(
            [np.zeros(len(p)), np.cos(p[:, 2]) + np.sin(p[:, 0]), np.zeros(len(p))],
            axis=1,
        )

    return VectorField("divergence_one", value, curl, div)


def get_solution(name: str, seed: int = 0, degree: int = 1):
    """Catalog lookup used by study configs."""
    catalog = {
        "poly_scalar": lambda: polynomial_scalar(degree, seed),
        "poly_vector": lambda: polynomial_vector(degree, seed),
        "trig_vector": trig_vector,
        "trig_scalar": trig_scalar,
        "random_smooth_vector": lambda: random_smooth_vector(seed),
        "random_smooth_scalar": lambda: random_smooth_scalar(seed),
        "gradient_field": lambda: gradient_field(seed),
        "divergence_free": lambda: divergence_free_field(seed),
        "divergence_one": divergence_one_field,
    }
    if name not in catalog:
        raise KeyError(f"unknown manufactured solution {name!r}")
    return catalog[name]()
