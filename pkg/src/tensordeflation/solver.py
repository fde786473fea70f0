"""Newton-Raphson multi-start solves of the asymptotic systems.

Forward: model parameters -> limiting singular values and alignments.
Inverse: measured ``(lam1, lam2, eta)`` -> signal strengths, correlation and
alignments (two spikes, order 3, equal dimensions).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .model import make_rng
from .rmt import SpectralParams, aux_functions, support_edge
from .systems import (
    AsymptoticState,
    SystemSpec,
    pack_state,
    psi_residual,
    psi_residual_reference,
    psi_to_state,
    general_residual,
    general_residual_reference,
    unknown_count,
    unpack_state,
)

logger = logging.getLogger(__name__)

__all__ = [
    "SolverError",
    "BatchResult",
    "SNREstimate",
    "newton_batch",
    "fd_jacobian",
    "forward_problem",
    "newton_solve",
    "multi_start_solve",
    "estimate_snr",
    "rank_one_limits",
    "ACCEPT_TOL",
]

SOLVER_STREAM = 11
ACCEPT_TOL = 1e-10
EDGE_MARGIN = 1e-6
ADMISSIBLE_SLACK = 1e-9
DEDUP_TOL = 1e-6


class SolverError(RuntimeError):
    """Newton failed (singular Jacobian, iteration limit, escape, stall)."""


@dataclass
class BatchResult:
    x: np.ndarray
    residual_inf: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    status: list[str]


def fd_jacobian(fun: Callable, x: np.ndarray, step: float = 1e-7) -> np.ndarray:
    """Central-difference Jacobian for a batch ``x`` of shape ``(B, n)``; returns ``(B, m, n)``."""
    b, n = x.shape
    h = step * np.maximum(1.0, np.abs(x))
    pert = h[:, :, None] * np.eye(n)
    fp = fun((x[:, None, :] + pert).reshape(b * n, n)).reshape(b, n, -1)
    fm = fun((x[:, None, :] - pert).reshape(b * n, n)).reshape(b, n, -1)
    return ((fp - fm) / (2.0 * h[:, :, None])).transpose(0, 2, 1)


def _solve_rows(jac: np.ndarray, rhs: np.ndarray):
    try:
        return np.linalg.solve(jac, rhs[..., None])[..., 0], np.zeros(len(rhs), dtype=bool)
    except np.linalg.LinAlgError:
        out = np.zeros_like(rhs)
        bad = np.zeros(len(rhs), dtype=bool)
        for k in range(len(rhs)):
            try:
                out[k] = np.linalg.solve(jac[k], rhs[k])
            except np.linalg.LinAlgError:
                bad[k] = True
        return out, bad


def newton_batch(fun: Callable, x0: np.ndarray, lower: np.ndarray | None = None, tol: float = 1e-12,
                 max_iters: int = 100, fd_step: float = 1e-7, max_halvings: int = 30,
                 bound: float = 1e3) -> BatchResult:
    """Damped Newton on every row of ``x0`` independently.

    Each step halves the Newton direction (at most ``max_halvings`` times)
    until the residual 2-norm decreases.  Coordinates are clamped from below at
    ``lower``.  A row converges once its residual sup-norm is below ``tol``.
    """
    x = np.array(x0, dtype=np.float64, copy=True)
    b, n = x.shape
    lo = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=np.float64)
    x = np.maximum(x, lo)
    f = fun(x)
    norm2 = np.linalg.norm(f, axis=1)
    status = ["running"] * b
    iters = np.zeros(b, dtype=int)
    converged = np.max(np.abs(f), axis=1) < tol
    active = ~converged
    for k in np.flatnonzero(converged):
        status[k] = "converged"
    for _ in range(max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xa, fa = x[idx], f[idx]
        step, singular = _solve_rows(fd_jacobian(fun, xa, fd_step), -fa)
        singular |= ~np.all(np.isfinite(step), axis=1)
        t = np.ones(idx.size)
        pending = ~singular
        new_x, new_f = xa.copy(), fa.copy()
        for _ in range(max_halvings + 1):
            rows = np.flatnonzero(pending)
            if rows.size == 0:
                break
            trial = np.maximum(xa[rows] + t[rows, None] * step[rows], lo)
            ft = fun(trial)
            ok = np.linalg.norm(ft, axis=1) < norm2[idx[rows]]
            new_x[rows[ok]], new_f[rows[ok]] = trial[ok], ft[ok]
            pending[rows[ok]] = False
            t[rows[~ok]] *= 0.5
        x[idx], f[idx] = new_x, new_f
        norm2[idx] = np.linalg.norm(new_f, axis=1)
        iters[idx] += 1
        for pos, k in enumerate(idx):
            if singular[pos]:
                status[k], active[k] = "singular", False
            elif pending[pos]:
                status[k], active[k] = "stalled", False
            elif np.max(np.abs(x[k])) > bound:
                status[k], active[k] = "escaped", False
            elif np.max(np.abs(f[k])) < tol:
                status[k], active[k], converged[k] = "converged", False, True
    for k in np.flatnonzero(active):
        status[k] = "max_iters"
    return BatchResult(x, np.max(np.abs(f), axis=1), converged, iters, status)


# -- forward problem -------------------------------------------------------------------

@dataclass
class ForwardProblem:
    spec: SystemSpec
    system: str
    fun: Callable
    lower: np.ndarray
    n: int

    def to_state(self, x: np.ndarray) -> AsymptoticState:
        if self.system == "psi":
            l1, l2, eta, r11, r12, r21, r22 = (float(v) for v in x)
            return psi_to_state(l1, l2, eta, r11, r12, r21, r22)
        lam, rho, eta = unpack_state(x, self.spec.r, self.spec.d)
        return AsymptoticState(lam.copy(), rho.copy(), eta.copy())

    def from_state(self, state: AsymptoticState) -> np.ndarray:
        if self.system == "psi":
            rho = state.rho.mean(axis=-1)
            return np.array([state.lambdas[0], state.lambdas[1], state.eta[0, 1].mean(),
                             rho[0, 0], rho[0, 1], rho[1, 0], rho[1, 1]])
        return pack_state(state.lambdas, state.rho, state.eta)

    def reference_residual(self, state: AsymptoticState) -> float:
        """Sup-norm of the residual from the scalar re-implementation."""
        if self.system == "psi":
            x = self.from_state(state)
            b1, b2 = self.spec.betas
            res = psi_residual_reference(x[0], x[1], x[2], b1, b2, self.spec.alpha, *x[3:])
        else:
            res = general_residual_reference(state.lambdas.tolist(), state.rho.tolist(),
                                              state.eta.tolist(), self.spec)
        return max(abs(v) for v in res)


def forward_problem(spec: SystemSpec, system: str = "auto") -> ForwardProblem:
    """Residual function and bounds for the forward solve.

    ``system`` is ``"psi"`` (seven unknowns, mode-symmetric), ``"general"``
    (general) or ``"auto"`` (psi whenever it applies).
    """
    if spec.mode != "forward":
        raise ValueError("forward_problem needs a forward-mode spec")
    if system == "auto":
        system = "psi" if spec.psi_applicable else "general"
    lam_floor = spec.edge + EDGE_MARGIN
    if system == "psi":
        if not spec.psi_applicable:
            raise ValueError("psi system needs r=2, d=3, equal dims and a single alpha")
        params = np.array([spec.betas[0], spec.betas[1], spec.alpha])

        def fun(x):
            return psi_residual(x[..., :3], params, x[..., 3:])

        lower = np.full(7, -np.inf)
        lower[:2] = lam_floor
        return ForwardProblem(spec, "psi", fun, lower, 7)
    if system != "general":
        raise ValueError(f"unknown system {system!r}")
    n = unknown_count(spec.r, spec.d)
    lower = np.full(n, -np.inf)
    lower[:spec.r] = lam_floor
    return ForwardProblem(spec, "general", lambda x: general_residual(x, spec), lower, n)


def newton_solve(spec: SystemSpec, initial: AsymptoticState, tol: float = 1e-12, max_iters: int = 100,
                 system: str = "auto") -> AsymptoticState:
    """Single Newton run from ``initial``; raises :class:`SolverError` on failure."""
    prob = forward_problem(spec, system)
    res = newton_batch(prob.fun, prob.from_state(initial)[None, :], prob.lower, tol=tol, max_iters=max_iters)
    if not res.converged[0]:
        raise SolverError(f"Newton {res.status[0]} after {res.iterations[0]} iterations "
                          f"(residual {res.residual_inf[0]:.3e})")
    state = prob.to_state(res.x[0])
    state.residual_inf = float(res.residual_inf[0])
    state.extra["iterations"] = int(res.iterations[0])
    return state


def _admissible(values: np.ndarray) -> bool:
    return bool(np.all(values >= -ADMISSIBLE_SLACK) and np.all(values <= 1.0 + ADMISSIBLE_SLACK))


def _dedup(items: list, key: Callable[[object], np.ndarray]) -> list:
    kept = []
    for item in items:
        v = key(item)
        if all(np.max(np.abs(v - key(other))) > DEDUP_TOL for other in kept):
            kept.append(item)
    return kept


def multi_start_solve(spec: SystemSpec, num_starts: int = 100, seed: int = 0, system: str = "auto",
                      tol: float = 1e-12, max_iters: int = 100) -> list[AsymptoticState]:
    """All admissible forward solutions found from ``num_starts`` random starts.

    Starts draw ``lam`` uniformly in ``(edge + 0.05, edge + max(beta) + 2)`` and
    every alignment uniformly in ``(0, 1)``.  Kept solutions have residual
    below ``ACCEPT_TOL`` (re-checked by an independent scalar evaluation),
    alignments in ``[0, 1]`` and singular values above the edge.  Duplicates
    (all coordinates within ``1e-6``) are merged.  Labels: for ``r >= 2``,
    label 1 has the highest ``rho_12`` and the rest follow in decreasing
    ``rho_12``; for ``r = 1`` labels follow decreasing ``lam``.
    """
    prob = forward_problem(spec, system)
    rng = make_rng(seed, SOLVER_STREAM)
    edge = spec.edge
    x0 = rng.uniform(0.0, 1.0, size=(num_starts, prob.n))
    r = spec.r
    x0[:, :r] = rng.uniform(edge + 0.05, edge + max(spec.betas) + 2.0, size=(num_starts, r))
    res = newton_batch(prob.fun, x0, prob.lower, tol=tol, max_iters=max_iters)
    found = []
    for k in range(num_starts):
        if res.residual_inf[k] >= ACCEPT_TOL:
            continue
        state = prob.to_state(res.x[k])
        off = state.eta[~np.eye(r, dtype=bool)]
        if not (_admissible(state.rho) and _admissible(off)):
            continue
        if np.any(state.lambdas <= edge):
            continue
        ref = prob.reference_residual(state)
        if ref >= ACCEPT_TOL:
            logger.warning("solution rejected by independent re-evaluation (residual %.3e)", ref)
            continue
        state.rho = np.clip(state.rho, 0.0, 1.0)
        state.eta = np.clip(state.eta, 0.0, 1.0)
        state.residual_inf = float(res.residual_inf[k])
        state.extra["reference_residual_inf"] = ref
        found.append(state)
    found.sort(key=lambda s: (s.lambdas[0], s.rho[0, -1].mean()))
    found = _dedup(found, lambda s: np.concatenate([s.lambdas, s.rho.ravel(), s.eta.ravel()]))
    if r >= 2:
        found.sort(key=lambda s: -s.rho[0, 1].mean())
    else:
        found.sort(key=lambda s: -s.lambdas[0])
    for lab, s in enumerate(found, start=1):
        s.label = lab
    if not found:
        logger.info("no admissible solution for betas=%s", spec.betas)
    return found


# -- inverse problem -------------------------------------------------------------------

@dataclass
class SNREstimate:
    """One admissible solution of the inverse system.

    Spike labels are only identifiable up to exchange, so estimates are
    reported with ``betas[0] >= betas[1]``.
    """

    betas: tuple[float, float]
    alpha: float
    rho: tuple[float, float, float, float]
    residual_inf: float
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"beta": list(self.betas), "alpha": self.alpha,
               "rho": {"11": self.rho[0], "12": self.rho[1], "21": self.rho[2], "22": self.rho[3]},
               "residual_inf": self.residual_inf}
        out.update(self.extra)
        return out


def _canonical(y: np.ndarray) -> np.ndarray:
    b1, b2, a, r11, r12, r21, r22 = y
    if b2 > b1:
        return np.array([b2, b1, a, r21, r22, r11, r12])
    return np.array(y, dtype=float)


def estimate_snr(measured, num_starts: int = 100, seed: int = 0, tol: float = 1e-12,
                 max_iters: int = 100) -> list[SNREstimate]:
    """Solve the seven-row system for ``(beta1, beta2, alpha, rho11, rho12, rho21, rho22)``.

    ``measured = (lam1, lam2, eta)`` from a two-step deflation.  Starts draw
    the betas uniformly in ``(0, max(lam) + 2)`` and alpha and the alignments
    uniformly in ``(0, 1)``.  Returns every admissible solution
    (``beta >= 0``; alpha and alignments in ``[0, 1]``), possibly none.
    """
    spec = SystemSpec(2, 3, mode="inverse", measured=tuple(measured))
    lam1, lam2, eta = spec.measured
    if min(lam1, lam2) <= spec.edge:
        raise ValueError(f"measured singular values must exceed the edge {spec.edge:.6f}")
    fixed = np.array(spec.measured)

    def fun(y):
        return psi_residual(fixed, y[..., :3], y[..., 3:])

    rng = make_rng(seed, SOLVER_STREAM + 1)
    y0 = rng.uniform(0.0, 1.0, size=(num_starts, 7))
    y0[:, :2] = rng.uniform(0.0, max(lam1, lam2) + 2.0, size=(num_starts, 2))
    res = newton_batch(fun, y0, None, tol=tol, max_iters=max_iters)
    found = []
    for k in range(num_starts):
        if res.residual_inf[k] >= ACCEPT_TOL:
            continue
        y = res.x[k]
        if np.any(y[:2] < -ADMISSIBLE_SLACK) or not _admissible(y[2:]):
            continue
        ref = max(abs(v) for v in psi_residual_reference(lam1, lam2, eta, *y))
        if ref >= ACCEPT_TOL:
            logger.warning("inverse solution rejected by independent re-evaluation (residual %.3e)", ref)
            continue
        y = _canonical(y)
        found.append((y, float(res.residual_inf[k]), ref))
    found.sort(key=lambda item: tuple(item[0]))
    found = _dedup(found, lambda item: item[0])
    out = []
    for y, rinf, ref in found:
        y = np.concatenate([np.maximum(y[:2], 0.0), np.clip(y[2:], 0.0, 1.0)])
        out.append(SNREstimate((float(y[0]), float(y[1])), float(y[2]), tuple(float(v) for v in y[3:]),
                               rinf, {"reference_residual_inf": ref}))
    return out


# -- rank-one reference ----------------------------------------------------------------

def rank_one_limits(beta: float, d: int = 3, grid: int = 4000) -> list[tuple[float, float]]:
    """Solutions ``(lam, rho)`` of the single-spike system with equal dimensions.

    ``h(lam) rho = beta rho^(d-1)`` gives ``rho = (h / beta)^(1/(d-2))`` and
    ``f(lam) = beta rho^d`` leaves a scalar equation in ``lam``, bracketed on a
    grid and refined with Brent's method.  Only roots with ``rho <= 1`` are
    returned, largest ``lam`` first.
    """
    params = SpectralParams.equal(d)
    edge = support_edge(params)[1]
    if beta <= 0:
        return []

    def rho_of(z):
        return (aux_functions(z, params).h / beta) ** (1.0 / (d - 2))

    def eq(z):
        return aux_functions(z, params).f - beta * rho_of(z) ** d

    zs = edge + np.geomspace(1e-10, beta + 10.0, grid)
    vals = np.array([eq(z) for z in zs])
    roots = []
    for a, b, fa, fb in zip(zs[:-1], zs[1:], vals[:-1], vals[1:]):
        if fa == 0.0:
            roots.append(a)
        elif fa * fb < 0:
            roots.append(brentq(eq, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps))
    out = [(float(z), float(rho_of(z))) for z in roots if rho_of(z) <= 1.0 + 1e-12]
    return sorted(out, key=lambda p: -p[0])
