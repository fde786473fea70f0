"""Limiting spectral quantities of the block matricization of a random tensor.

For dimension fractions ``c_1..c_d`` (summing to one) the limiting spectral
measure has Stieltjes transform ``g = sum_l g_l`` where each ``g_l`` solves
``g_l**2 - (g + z) g_l - c_l = 0``.  With equal fractions ``c_l = 1/d`` the
measure is a semicircle of radius ``2 sqrt((d-1)/d)`` and ``g`` has a closed
form.  Everything here works with real ``z`` outside the support, except
:func:`stieltjes_complex` and :func:`limiting_density` which evaluate slightly
above the real axis for the inversion formula.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .tensor import as_tensor, contract_two_holes

__all__ = [
    "SpectralParams",
    "StieltjesEval",
    "AuxValues",
    "OutsideSupportError",
    "g_closed_form",
    "g_general",
    "g_modes",
    "aux_functions",
    "support_edge",
    "phi_d",
    "empirical_resolvent_trace",
    "stieltjes_complex",
    "limiting_density",
    "limiting_cdf",
]


class OutsideSupportError(ValueError):
    """Raised when a point lies inside the support, where ``g`` is not real."""


@dataclass(frozen=True)
class SpectralParams:
    """Order ``d`` and dimension fractions ``c`` (``c_l = n_l / sum_m n_m``)."""

    c: tuple[float, ...]

    def __post_init__(self):
        c = tuple(float(x) for x in self.c)
        if len(c) < 2:
            raise ValueError("need at least two modes")
        if any(not 0.0 < x < 1.0 for x in c):
            raise ValueError(f"fractions must lie in (0, 1), got {c}")
        if abs(sum(c) - 1.0) > 1e-12:
            raise ValueError(f"fractions must sum to 1, got sum {sum(c)!r}")
        object.__setattr__(self, "c", c)

    @property
    def d(self) -> int:
        return len(self.c)

    @classmethod
    def equal(cls, d: int) -> "SpectralParams":
        return cls((1.0 / d,) * d)

    @classmethod
    def from_dims(cls, dims: Sequence[int]) -> "SpectralParams":
        total = float(sum(dims))
        c = [n / total for n in dims]
        # absorb rounding so the sum check is exact
        c[-1] = 1.0 - sum(c[:-1])
        return cls(tuple(c))

    @property
    def is_equal(self) -> bool:
        return all(abs(x - 1.0 / self.d) < 1e-14 for x in self.c)


@dataclass(frozen=True)
class StieltjesEval:
    z: float
    g: float
    g_per_mode: tuple[float, ...]
    residuals: tuple[float, ...]
    iterations: int


@dataclass(frozen=True)
class AuxValues:
    """``f = z + g``, ``h_l = -c_l / g_l``; ``h`` and ``q`` only for equal fractions."""

    z: float
    g: float
    g_per_mode: tuple[float, ...]
    f: float
    h_per_mode: tuple[float, ...]
    h: float | None = None
    q: float | None = None


def _edge_equal(d: int) -> float:
    return 2.0 * math.sqrt((d - 1) / d)


def g_closed_form(z, d: int = 3):
    """Closed-form Stieltjes transform for equal dimension fractions.

    Uses the root of ``((d-1)/d) g**2 + z g + 1 = 0`` that vanishes at
    infinity, written as ``-2 / (z + sign(z) sqrt(z**2 - 4(d-1)/d))`` to
    avoid cancellation for large ``|z|``.  Accepts scalars or arrays.
    """
    if d < 2:
        raise ValueError("order must be >= 2")
    z_arr = np.asarray(z, dtype=np.float64)
    edge = _edge_equal(d)
    if np.any(np.abs(z_arr) <= edge):
        raise OutsideSupportError(f"z inside the support [-{edge}, {edge}]")
    a = 4.0 * (d - 1) / d
    g = -2.0 / (z_arr + np.sign(z_arr) * np.sqrt(z_arr * z_arr - a))
    return float(g) if g.ndim == 0 else g


def _mode_roots(x, c_l, sign):
    # root of y^2 - x y - c_l = 0 on the Stieltjes branch; sign = sign(z)
    # the -/+ form (x -/+ sqrt)/2 cancels badly, so use -2c/(x + sqrt) form
    s = np.sqrt(x * x + 4.0 * c_l)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(sign > 0, -2.0 * c_l / (x + s), 2.0 * c_l / (s - x))


def _fixed_point(z: float, c: np.ndarray, tol: float, max_iters: int, damping: float = 0.5):
    # damped g <- (1 - damping) g + damping * sum_l g_l(g), from g = -1/z, with a short Newton polish
    sign = math.copysign(1.0, z)
    g = -1.0 / z
    it = 0
    for it in range(1, max_iters + 1):
        gl = _mode_roots(np.float64(g + z), c, sign)
        step = damping * (float(gl.sum()) - g)
        g += step
        if not math.isfinite(g) or abs(g) > 1e8:
            raise OutsideSupportError("fixed-point iteration diverged; z is likely inside the support")
        if abs(step) < tol:
            break
    else:
        raise OutsideSupportError(f"fixed-point iteration did not converge in {max_iters} iterations")
    for _ in range(3):
        x = g + z
        gl = _mode_roots(np.float64(x), c, sign)
        deriv = float(np.sum(gl / (2.0 * gl - x))) - 1.0
        if deriv == 0.0:
            break
        g -= (float(gl.sum()) - g) / deriv
    return g, _mode_roots(np.float64(g + z), c, sign), it


def g_modes(z, c: Sequence[float], tol: float = 1e-14, max_iters: int = 200):
    """Vectorised solve of the coupled quadratics; returns ``(g, g_modes, iterations)``.

    ``g_modes`` has a trailing axis of length ``d``.  With ``x = g + |z|``
    the system is the scalar equation ``x + sum_l (sqrt(x^2 + 4 c_l) - x)/2
    = |z|`` whose left side is convex and increasing on the relevant branch,
    so Newton started at ``x = |z|`` decreases monotonically to the root.
    Negative ``z`` uses the symmetry ``g(-z) = -g(z)``.
    """
    z = np.asarray(z, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    az = np.abs(z)
    edge = _numeric_edge(tuple(float(v) for v in c))
    if np.any(az <= edge):
        raise OutsideSupportError(f"|z| <= {edge:.12g} lies inside the support")
    target = az.ravel()
    x = target.copy()
    active = np.ones(x.shape, dtype=bool)
    it = 0
    for it in range(1, max_iters + 1):
        xa = x[active]
        s = np.sqrt(xa[..., None] ** 2 + 4.0 * c)
        val = xa + np.sum(s - xa[..., None], axis=-1) / 2.0 - target[active]
        slope = 1.0 + np.sum(xa[..., None] / s - 1.0, axis=-1) / 2.0
        step = val / slope
        # iterates decrease monotonically; a non-positive step means rounding level was reached
        move = step > 0
        xa[move] -= step[move]
        x[active] = xa
        done = step <= tol * np.maximum(1.0, np.abs(xa))
        active[np.flatnonzero(active)[done]] = False
        if not active.any():
            break
    else:
        raise OutsideSupportError(f"Newton on the Stieltjes equation did not converge in {max_iters} steps")
    x = x.reshape(az.shape)
    gl = _mode_roots(x[..., None], c, 1.0)
    sign = np.sign(z)[..., None]
    gl = gl * sign
    return gl.sum(axis=-1), gl, it


def g_general(z: float, params: SpectralParams, tol: float = 1e-13,
              max_iters: int = 100_000) -> StieltjesEval:
    """Solve the coupled quadratics for arbitrary fractions at a real point ``z``."""
    if z == 0.0:
        raise OutsideSupportError("z = 0 is inside the support")
    _, gl, it = _fixed_point(float(z), np.asarray(params.c), tol, max_iters)
    gl = tuple(float(v) for v in gl)
    g = sum(gl)
    res = tuple(abs(v * v - (g + z) * v - c) for v, c in zip(gl, params.c))
    if max(res) > 1e-10:
        raise OutsideSupportError(f"quadratic residual {max(res):.3e} at z={z}")
    return StieltjesEval(float(z), g, gl, res, it)


def aux_functions(z: float, params: SpectralParams) -> AuxValues:
    """``f``, ``h_l`` and (equal fractions) ``h = -1/g``, ``q = z + g/d`` at ``z``."""
    if params.is_equal:
        g = g_closed_form(z, params.d)
        gl = (g / params.d,) * params.d
    else:
        ev = g_general(z, params)
        g, gl = ev.g, ev.g_per_mode
    if any(v == 0.0 for v in gl):
        raise OutsideSupportError("g_l vanished")
    hl = tuple(-c / v for c, v in zip(params.c, gl))
    out = AuxValues(z=float(z), g=g, g_per_mode=tuple(gl), f=z + g, h_per_mode=hl)
    if params.is_equal:
        h = -1.0 / g
        assert all(abs(v - h) <= 1e-12 * abs(h) for v in hl)
        out = AuxValues(z=out.z, g=g, g_per_mode=out.g_per_mode, f=out.f,
                        h_per_mode=hl, h=h, q=z + g / params.d)
    return out


def support_edge(params: SpectralParams, numeric: bool | None = None) -> tuple[float, float]:
    """Edges ``(left, right)`` of the limiting support.

    Equal fractions use ``2 sqrt((d-1)/d)``.  Otherwise (or with
    ``numeric=True``) the right edge is the smallest ``z > 0`` for which the
    fixed-point equation has a real root on the Stieltjes branch.  Writing
    ``x = g + z`` that is ``z* = min_x [x - sum_l (x - sqrt(x^2 + 4 c_l)) / 2]``,
    a convex one-dimensional problem.
    """
    if numeric is None:
        numeric = not params.is_equal
    if not numeric:
        e = _edge_equal(params.d)
        return -e, e
    return (-_numeric_edge(params.c), _numeric_edge(params.c))


@functools.lru_cache(maxsize=64)
def _numeric_edge(c: tuple[float, ...]) -> float:
    arr = np.asarray(c)

    def excess(x):
        return x - float(np.sum((x - np.sqrt(x * x + 4.0 * arr)) / 2.0))

    res = minimize_scalar(excess, bracket=(-1.0, 0.5, 4.0), method="brent", options={"xtol": 1e-12})
    return float(res.fun)


def phi_d(t, vectors: Sequence) -> np.ndarray:
    """Symmetric ``N x N`` block matrix with zero diagonal blocks.

    Block ``(l, m)`` for ``l < m`` is the contraction of ``t`` on every vector
    except the ``l``-th and ``m``-th; block ``(m, l)`` is its transpose.
    """
    t = as_tensor(t)
    d = t.ndim
    if d < 3:
        raise ValueError("phi_d needs order >= 3")
    if len(vectors) != d:
        raise ValueError(f"expected {d} vectors, got {len(vectors)}")
    offs = np.concatenate([[0], np.cumsum(t.shape)])
    n_total = int(offs[-1])
    m = np.zeros((n_total, n_total))
    for ell in range(d):
        for k in range(ell + 1, d):
            block = contract_two_holes(t, vectors, (ell, k))
            m[offs[ell]:offs[ell + 1], offs[k]:offs[k + 1]] = block
            m[offs[k]:offs[k + 1], offs[ell]:offs[ell + 1]] = block.T
    return m


def empirical_resolvent_trace(m: np.ndarray | None, z: float, eigenvalues: np.ndarray | None = None) -> float:
    """``(1/N) tr (M - z I)^{-1}`` through the eigenvalues of the symmetric ``m``."""
    if eigenvalues is None:
        eigenvalues = np.linalg.eigvalsh(np.asarray(m, dtype=np.float64))
    gap = np.min(np.abs(eigenvalues - z))
    if gap < 1e-8:
        raise ValueError(f"z={z} is within {gap:.2e} of an eigenvalue")
    return float(np.mean(1.0 / (eigenvalues - z)))


def stieltjes_complex(z, c: Sequence[float], steps: int = 80, newton_iters: int = 6) -> np.ndarray:
    """Stieltjes transform at complex ``z`` with ``Im z > 0`` (vectorised).

    Tracks the per-mode values ``g_l = -c_l / (z + g - g_l)`` by continuation
    from ``Re z + 10i`` down to the requested imaginary part, with Newton steps
    on the ``d``-dimensional system at every level, so the branch is followed
    continuously from infinity.
    """
    z = np.asarray(z, dtype=np.complex128)
    c = np.asarray(c, dtype=np.float64)
    if np.any(z.imag <= 0):
        raise ValueError("need Im z > 0")
    d = c.size
    eye = np.eye(d, dtype=bool)
    start = np.maximum(10.0, z.imag)
    zz = z.real + 1j * start
    y = -c / zz[..., None]
    for frac in np.linspace(0.0, 1.0, steps):
        zz = z.real + 1j * np.exp((1.0 - frac) * np.log(start) + frac * np.log(z.imag))
        for _ in range(newton_iters):
            rest = zz[..., None] + y.sum(axis=-1, keepdims=True) - y
            resid = y * rest + c
            jac = np.where(eye, rest[..., :, None], y[..., :, None])
            y = y - np.linalg.solve(jac, resid[..., None])[..., 0]
    return y.sum(axis=-1)


def limiting_density(x, params: SpectralParams, eps: float = 1e-6) -> np.ndarray:
    """Density ``Im g(x + i eps) / pi`` of the limiting measure on the grid ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if params.is_equal:
        d = params.d
        z = x + 1j * eps
        e = _edge_equal(d)
        g = -2.0 / (z + np.sqrt(z - e) * np.sqrt(z + e))
    else:
        g = stieltjes_complex(x + 1j * eps, params.c)
    return np.maximum(g.imag, 0.0) / np.pi


def limiting_cdf(params: SpectralParams, num: int = 2000, eps: float = 1e-6):
    """Grid and CDF of the limiting measure from the trapezoid-integrated density.

    Strongly unequal fractions put an atom at zero (the matricization has a
    kernel); whatever mass the density misses is placed there.
    """
    left, right = support_edge(params)
    grid = np.linspace(left, right, num)
    dens = limiting_density(grid, params, eps)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
    atom = max(0.0, 2.0 * max(params.c) - 1.0)
    cdf = cdf / cdf[-1] * (1.0 - atom) + atom * (grid >= 0.0)
    return grid, cdf
