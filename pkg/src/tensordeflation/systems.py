"""Residuals of the asymptotic equations for deflation outputs.

Notation: ``lam[i]`` is the limit of the ``i``-th deflation singular value,
``rho[k, i, l]`` the limit of ``|<x_{k,l}, u_{i,l}>|`` (spike ``k`` against
estimate ``i``) and ``eta[j, i, l]`` the limit of ``|<u_{j,l}, u_{i,l}>|``
(symmetric, unit diagonal).  Indices are 0-based.

The general residual has three blocks, in this order:

(a) ``i``:            ``f(lam_i) + sum_{k<i} lam_k prod_l eta[k,i,l] - sum_k beta_k prod_l rho[k,i,l]``
(b) ``(l, i, j)``:    ``h_l(lam_i) rho[j,i,l] + sum_{k<i} lam_k rho[j,k,l] prod_{m!=l} eta[k,i,m]
                        - sum_k beta_k alpha[l,k,j] prod_{m!=l} rho[k,i,m]``
(c) ``(l, i, j<i)``:  ``h_l(lam_i) eta[j,i,l] + g_l(lam_j) prod_{m!=l} eta[j,i,m]
                        + sum_{k<i} lam_k eta[k,j,l] prod_{m!=l} eta[k,i,m]
                        - sum_k beta_k rho[k,j,l] prod_{m!=l} rho[k,i,m]``

Block (c) pairs every estimate ``i`` with each *earlier* estimate ``j``; with
that index range the rank-2, order-3 equal-dimension case collapses exactly to
the seven-row system in :func:`psi_residual`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import alpha_tensor
from .rmt import OutsideSupportError, SpectralParams, aux_functions, g_closed_form, g_modes, support_edge

__all__ = [
    "SystemSpec",
    "AsymptoticState",
    "unknown_count",
    "pack_state",
    "unpack_state",
    "mode_functions",
    "general_residual",
    "general_residual_reference",
    "psi_residual",
    "psi_residual_reference",
    "psi_to_state",
    "state_to_psi",
    "PSI_ROWS_FROM_GENERAL",
]


@dataclass
class SystemSpec:
    """Parameters of the forward system.

    ``alphas`` is expanded to shape ``(d, r, r)``.  ``c`` defaults to equal
    fractions.  ``mode`` is ``"forward"`` (unknowns lam, rho, eta) or
    ``"inverse"`` (unknowns beta_1, beta_2, alpha, rho, given lam, eta; only
    for ``r=2, d=3`` with equal dimensions).
    """

    r: int
    d: int
    betas: tuple[float, ...] = ()
    alphas: np.ndarray | float = 0.0
    c: tuple[float, ...] | None = None
    mode: str = "forward"
    measured: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.r < 1 or self.d < 3:
            raise ValueError("need r >= 1 and d >= 3")
        if self.c is None:
            self.c = (1.0 / self.d,) * self.d
        self.spectral = SpectralParams(tuple(self.c))
        if self.spectral.d != self.d:
            raise ValueError("len(c) must equal d")
        self.alphas = alpha_tensor(self.alphas, self.r, self.d)
        if self.mode == "forward":
            self.betas = tuple(float(b) for b in self.betas)
            if len(self.betas) != self.r:
                raise ValueError(f"expected {self.r} betas, got {len(self.betas)}")
            n = unknown_count(self.r, self.d)
            rows = self.r + self.d * self.r ** 2 + self.d * self.r * (self.r - 1) // 2
            assert n == rows, "forward system must be square"
        elif self.mode == "inverse":
            if not (self.r == 2 and self.d == 3 and self.spectral.is_equal):
                raise ValueError("inverse mode is defined for r=2, d=3 with equal dimensions only")
            if self.measured is None or len(self.measured) != 3:
                raise ValueError("inverse mode needs measured (lam1, lam2, eta)")
            self.measured = tuple(float(v) for v in self.measured)
        else:
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def edge(self) -> float:
        return support_edge(self.spectral)[1]

    @property
    def psi_applicable(self) -> bool:
        """True for r=2, d=3, equal dims and one correlation shared by every mode."""
        if not (self.r == 2 and self.d == 3 and self.spectral.is_equal):
            return False
        a = self.alphas[:, 0, 1]
        return bool(np.all(a == a[0]))

    @property
    def alpha(self) -> float:
        return float(self.alphas[0, 0, 1])


@dataclass
class AsymptoticState:
    lambdas: np.ndarray
    rho: np.ndarray
    eta: np.ndarray
    residual_inf: float = float("nan")
    label: int | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"lambda": self.lambdas.tolist(), "rho": self.rho.tolist(),
               "eta": self.eta.tolist(), "residual_inf": self.residual_inf,
               "label": self.label}
        out.update(self.extra)
        return out


def unknown_count(r: int, d: int) -> int:
    return r + d * r * r + d * r * (r - 1) // 2


def _eta_pairs(r: int):
    return [(j, i) for i in range(r) for j in range(i)]


def pack_state(lam, rho, eta) -> np.ndarray:
    """Flatten to ``[lam (r), rho (r, r, d) C-order, eta[j, i, :] for j < i]``."""
    lam = np.asarray(lam, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    r = lam.shape[-1]
    batch = lam.shape[:-1]
    parts = [lam, rho.reshape(batch + (-1,))]
    parts += [eta[..., j, i, :] for j, i in _eta_pairs(r)]
    return np.concatenate(parts, axis=-1)


def unpack_state(x: np.ndarray, r: int, d: int):
    """Inverse of :func:`pack_state`; ``eta`` comes back symmetric with unit diagonal."""
    x = np.asarray(x, dtype=np.float64)
    batch = x.shape[:-1]
    lam = x[..., :r]
    rho = x[..., r:r + r * r * d].reshape(batch + (r, r, d))
    eta = np.ones(batch + (r, r, d))
    pos = r + r * r * d
    for j, i in _eta_pairs(r):
        eta[..., j, i, :] = eta[..., i, j, :] = x[..., pos:pos + d]
        pos += d
    return lam, rho, eta


def mode_functions(lam: np.ndarray, spectral: SpectralParams):
    """``(f, g_l, h_l)`` at every entry of ``lam``; ``g_l``, ``h_l`` get a trailing mode axis."""
    lam = np.asarray(lam, dtype=np.float64)
    c = np.asarray(spectral.c)
    if spectral.is_equal:
        g = g_closed_form(lam, spectral.d)
        gl = np.broadcast_to(np.asarray(g)[..., None] / spectral.d, np.shape(lam) + (spectral.d,))
    else:
        g, gl, _ = g_modes(lam, spectral.c)
    return lam + g, gl, -c / gl


def _prod_except(a: np.ndarray, ell: int) -> np.ndarray:
    return np.prod(np.delete(a, ell, axis=-1), axis=-1)


def general_residual(x: np.ndarray, spec: SystemSpec) -> np.ndarray:
    """Residual of the general forward system at packed unknowns ``x`` (batched on leading axes)."""
    r, d = spec.r, spec.d
    lam, rho, eta = unpack_state(x, r, d)
    edge = spec.edge
    if np.any(lam <= edge):
        raise OutsideSupportError("a singular value lies inside the support")
    f, gl, hl = mode_functions(lam, spec.spectral)
    beta = np.asarray(spec.betas)
    alpha = spec.alphas
    rows = []
    # (a)
    for i in range(r):
        val = f[..., i] - np.tensordot(np.prod(rho[..., :, i, :], axis=-1), beta, axes=([-1], [0]))
        for k in range(i):
            val = val + lam[..., k] * np.prod(eta[..., k, i, :], axis=-1)
        rows.append(val)
    # (b)
    for ell in range(d):
        for i in range(r):
            sig = _prod_except(rho[..., :, i, :], ell)            # (..., k)
            for j in range(r):
                val = hl[..., i, ell] * rho[..., j, i, ell]
                val = val - np.tensordot(sig, beta * alpha[ell, :, j], axes=([-1], [0]))
                for k in range(i):
                    val = val + lam[..., k] * rho[..., j, k, ell] * _prod_except(eta[..., k, i, :], ell)
                rows.append(val)
    # (c)
    for ell in range(d):
        for i in range(r):
            sig = _prod_except(rho[..., :, i, :], ell)
            for j in range(i):
                val = hl[..., i, ell] * eta[..., j, i, ell]
                val = val + gl[..., j, ell] * _prod_except(eta[..., j, i, :], ell)
                for k in range(i):
                    val = val + lam[..., k] * eta[..., k, j, ell] * _prod_except(eta[..., k, i, :], ell)
                val = val - np.sum(beta * rho[..., :, j, ell] * sig, axis=-1)
                rows.append(val)
    return np.stack(rows, axis=-1)


def general_residual_reference(lam: Sequence[float], rho, eta, spec: SystemSpec) -> list[float]:
    """Plain-loop scalar evaluation of the same system (used to re-verify solutions)."""
    r, d = spec.r, spec.d
    aux = [aux_functions(float(z), spec.spectral) for z in lam]
    beta, alpha = spec.betas, spec.alphas

    def prod(vals):
        out = 1.0
        for v in vals:
            out *= v
        return out

    out = []
    for i in range(r):
        s = aux[i].f
        for k in range(i):
            s += lam[k] * prod(eta[k][i][m] for m in range(d))
        for k in range(r):
            s -= beta[k] * prod(rho[k][i][m] for m in range(d))
        out.append(s)
    for ell in range(d):
        for i in range(r):
            for j in range(r):
                s = aux[i].h_per_mode[ell] * rho[j][i][ell]
                for k in range(i):
                    s += lam[k] * rho[j][k][ell] * prod(eta[k][i][m] for m in range(d) if m != ell)
                for k in range(r):
                    s -= beta[k] * alpha[ell][k][j] * prod(rho[k][i][m] for m in range(d) if m != ell)
                out.append(s)
    for ell in range(d):
        for i in range(r):
            for j in range(i):
                s = aux[i].h_per_mode[ell] * eta[j][i][ell]
                s += aux[j].g_per_mode[ell] * prod(eta[j][i][m] for m in range(d) if m != ell)
                for k in range(i):
                    s += lam[k] * eta[k][j][ell] * prod(eta[k][i][m] for m in range(d) if m != ell)
                for k in range(r):
                    s -= beta[k] * rho[k][j][ell] * prod(rho[k][i][m] for m in range(d) if m != ell)
                out.append(s)
    return out


_EDGE3 = 2.0 * np.sqrt(2.0 / 3.0)

# 0-based general-system row indices (r=2, d=3) that equal psi rows 1..7 on l-symmetric states
PSI_ROWS_FROM_GENERAL = {
    0: [0],
    1: [2, 6, 10],
    2: [3, 7, 11],
    3: [1],
    4: [4, 8, 12],
    5: [5, 9, 13],
    6: [14, 15, 16],
}


def psi_residual(lambdas_eta, betas, rhos) -> np.ndarray:
    """Seven-row system for two spikes, order 3, equal dimensions.

    ``lambdas_eta = (lam1, lam2, eta)``, ``betas = (beta1, beta2, alpha)``,
    ``rhos = (rho11, rho12, rho21, rho22)``; each argument may carry leading
    batch axes.
    """
    le = np.asarray(lambdas_eta, dtype=np.float64)
    bt = np.asarray(betas, dtype=np.float64)
    rh = np.asarray(rhos, dtype=np.float64)
    l1, l2, eta = le[..., 0], le[..., 1], le[..., 2]
    b1, b2, a = bt[..., 0], bt[..., 1], bt[..., 2]
    r11, r12, r21, r22 = rh[..., 0], rh[..., 1], rh[..., 2], rh[..., 3]
    if np.any(l1 <= _EDGE3) or np.any(l2 <= _EDGE3):
        raise OutsideSupportError("a singular value lies inside the support")
    g1, g2 = g_closed_form(l1, 3), g_closed_form(l2, 3)
    f1, f2 = l1 + g1, l2 + g2
    h1, h2 = -1.0 / g1, -1.0 / g2
    q1 = l1 + g1 / 3.0
    return np.stack([
        f1 - b1 * r11 ** 3 - b2 * r21 ** 3,
        h1 * r11 - b1 * r11 ** 2 - b2 * a * r21 ** 2,
        h1 * r21 - b1 * a * r11 ** 2 - b2 * r21 ** 2,
        f2 + l1 * eta ** 3 - b1 * r12 ** 3 - b2 * r22 ** 3,
        h2 * r12 + l1 * r11 * eta ** 2 - b1 * r12 ** 2 - b2 * a * r22 ** 2,
        h2 * r22 + l1 * r21 * eta ** 2 - b1 * a * r12 ** 2 - b2 * r22 ** 2,
        h2 * eta + q1 * eta ** 2 - b1 * r11 * r12 ** 2 - b2 * r21 * r22 ** 2,
    ], axis=-1)


def psi_residual_reference(lam1, lam2, eta, beta1, beta2, alpha, r11, r12, r21, r22) -> list[float]:
    """Straight-line scalar re-evaluation of the seven rows, with ``g`` from the quadratic formula."""

    def g(z):
        return (-3.0 * z + 3.0 * math.sqrt(z * z - 8.0 / 3.0)) / 4.0

    ga, gb = g(lam1), g(lam2)
    return [
        lam1 + ga - beta1 * r11 ** 3 - beta2 * r21 ** 3,
        -r11 / ga - beta1 * r11 ** 2 - beta2 * alpha * r21 ** 2,
        -r21 / ga - beta1 * alpha * r11 ** 2 - beta2 * r21 ** 2,
        lam2 + gb + lam1 * eta ** 3 - beta1 * r12 ** 3 - beta2 * r22 ** 3,
        -r12 / gb + lam1 * r11 * eta ** 2 - beta1 * r12 ** 2 - beta2 * alpha * r22 ** 2,
        -r22 / gb + lam1 * r21 * eta ** 2 - beta1 * alpha * r12 ** 2 - beta2 * r22 ** 2,
        -eta / gb + (lam1 + ga / 3.0) * eta ** 2 - beta1 * r11 * r12 ** 2 - beta2 * r21 * r22 ** 2,
    ]


def psi_to_state(lam1, lam2, eta, r11, r12, r21, r22, d: int = 3) -> AsymptoticState:
    rho = np.empty((2, 2, d))
    rho[0, 0], rho[0, 1], rho[1, 0], rho[1, 1] = r11, r12, r21, r22
    e = np.ones((2, 2, d))
    e[0, 1] = e[1, 0] = eta
    return AsymptoticState(np.array([lam1, lam2], dtype=float), rho, e)


def state_to_psi(state: AsymptoticState):
    """``((lam1, lam2, eta), (rho11, rho12, rho21, rho22))`` from mode-averaged values."""
    rho = state.rho.mean(axis=-1)
    eta = float(state.eta[0, 1].mean())
    return ((float(state.lambdas[0]), float(state.lambdas[1]), eta),
            (float(rho[0, 0]), float(rho[0, 1]), float(rho[1, 0]), float(rho[1, 1])))
