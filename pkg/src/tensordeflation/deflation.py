"""Best rank-one approximation by tensor power iteration and Hotelling deflation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .model import SpikeSet, make_rng
from .tensor import as_tensor, contract_full, contract_partial, normalize, outer_product, unfold

logger = logging.getLogger(__name__)

__all__ = [
    "RankOnePair",
    "DeflationRecord",
    "DegenerateIterationError",
    "kkt_residual",
    "svd_init",
    "power_iteration",
    "best_rank_one",
    "deflate",
]

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITERS = 1000


class DegenerateIterationError(ArithmeticError):
    """A partial contraction vanished, so the update direction is undefined."""


@dataclass
class RankOnePair:
    lam: float
    vectors: list[np.ndarray]
    kkt_residual: float
    iterations: int
    converged: bool = True
    history: list[float] = field(default_factory=list, repr=False)

    def tensor(self) -> np.ndarray:
        return outer_product(self.vectors, self.lam)


def kkt_residual(t, vectors, lam: float) -> float:
    """``max_l || T(u_1, .., ., .., u_d) - lam u_l ||``."""
    return max(float(np.linalg.norm(contract_partial(t, vectors, ell) - lam * vectors[ell]))
               for ell in range(len(vectors)))


def svd_init(t) -> list[np.ndarray]:
    """Leading left singular vector of every unfolding, largest-magnitude entry made positive."""
    t = as_tensor(t)
    if not np.any(t):
        raise ValueError("cannot initialize from the zero tensor")
    out = []
    for ell in range(t.ndim):
        mat = unfold(t, ell)
        try:
            u, _, _ = np.linalg.svd(mat, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"SVD of mode-{ell} unfolding failed") from exc
        v = u[:, 0]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        out.append(np.ascontiguousarray(v))
    return out


def power_iteration(t, init, tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS) -> RankOnePair:
    """Cyclic power iteration ``u_l <- normalize(T(u_1, .., ., .., u_d))``, ``l = 1..d``.

    Stops when every factor moved by less than ``tol`` over a sweep (up to
    sign) or after ``max_iters`` sweeps; in the latter case the result is
    returned with ``converged=False``.
    """
    t = as_tensor(t)
    if tol <= 0:
        raise ValueError("tol must be positive")
    u = [normalize(np.asarray(v, dtype=np.float64).copy()) for v in init]
    if len(u) != t.ndim:
        raise ValueError(f"expected {t.ndim} initial vectors, got {len(u)}")
    history = [contract_full(t, u)]
    converged = False
    sweeps = 0
    for sweeps in range(1, max_iters + 1):
        move = 0.0
        for ell in range(t.ndim):
            v = contract_partial(t, u, ell)
            nrm = np.linalg.norm(v)
            if nrm == 0.0:
                raise DegenerateIterationError(f"partial contraction on mode {ell} vanished")
            new = v / nrm
            move = max(move, min(np.linalg.norm(new - u[ell]), np.linalg.norm(new + u[ell])))
            u[ell] = new
        # after the last update T(u) = ||v|| >= previous objective
        history.append(float(nrm))
        if history[-1] < history[-2] - 1e-12 * max(1.0, abs(history[-2])):
            raise AssertionError(f"power iteration objective decreased at sweep {sweeps}")
        if move < tol:
            converged = True
            break
    lam = contract_full(t, u)
    if lam < 0:
        u[0] = -u[0]
        lam = -lam
    res = kkt_residual(t, u, lam)
    if not converged:
        logger.warning("power iteration stopped after %d sweeps without converging", sweeps)
    return RankOnePair(lam, u, res, sweeps, converged, history)


def best_rank_one(t, tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS,
                  restarts: int = 0, seed: int = 0) -> RankOnePair:
    """SVD-initialized power iteration, optionally keeping the best of extra random restarts."""
    t = as_tensor(t)
    best = power_iteration(t, svd_init(t), tol, max_iters)
    if restarts:
        rng = make_rng(seed, 7)
        for _ in range(restarts):
            init = [rng.standard_normal(n) for n in t.shape]
            cand = power_iteration(t, init, tol, max_iters)
            if cand.converged and cand.lam > best.lam + 1e-12:
                best = cand
    return best


@dataclass
class DeflationRecord:
    """Outputs of an ``r``-step deflation.

    ``rho[i, j, l] = |<x_{i,l}, u_{j,l}>|`` (truth ``i``, step ``j``) when the
    spikes are known, ``eta[i, j, l] = |<u_{i,l}, u_{j,l}>|`` (unit diagonal).
    """

    steps: list[RankOnePair]
    rho: np.ndarray | None
    eta: np.ndarray
    seed: int | None = None
    restarts: int = 0
    residual_tensors: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([s.lam for s in self.steps])

    def to_json(self) -> dict:
        return {
            "lambda": [s.lam for s in self.steps],
            "rho": None if self.rho is None else self.rho.tolist(),
            "eta": self.eta.tolist(),
            "kkt_residual": [s.kkt_residual for s in self.steps],
            "iterations": [s.iterations for s in self.steps],
            "converged": [s.converged for s in self.steps],
            "vectors": [[v.tolist() for v in s.vectors] for s in self.steps],
            "restarts": self.restarts,
            "seed": self.seed,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def deflate(t1, num_steps: int, truth: SpikeSet | None = None, tol: float = DEFAULT_TOL,
            max_iters: int = DEFAULT_MAX_ITERS, restarts: int = 0, seed: int | None = None,
            keep_tensors: bool = False) -> DeflationRecord:
    """Run ``num_steps`` steps of ``T_{i+1} = T_i - lam_i u_{i,1} (x) ... (x) u_{i,d}``."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    t = as_tensor(t1).copy()
    kept = [t.copy()] if keep_tensors else None
    steps = []
    for i in range(num_steps):
        try:
            pair = best_rank_one(t, tol, max_iters, restarts, 0 if seed is None else (seed + i) % 2**64)
        except (DegenerateIterationError, ValueError) as exc:
            raise type(exc)(f"deflation step {i + 1}: {exc}") from exc
        if not pair.converged:
            logger.warning("deflation step %d did not converge", i + 1)
        steps.append(pair)
        t -= pair.tensor()
        if keep_tensors:
            kept.append(t.copy())
    d = t.ndim
    eta = np.ones((num_steps, num_steps, d))
    for i in range(num_steps):
        for j in range(i + 1, num_steps):
            for ell in range(d):
                val = min(1.0, abs(float(steps[i].vectors[ell] @ steps[j].vectors[ell])))
                eta[i, j, ell] = eta[j, i, ell] = val
    rho = None
    if truth is not None:
        rho = np.empty((truth.r, num_steps, d))
        for i in range(truth.r):
            for j in range(num_steps):
                for ell in range(d):
                    rho[i, j, ell] = min(1.0, abs(float(truth.components[i][ell] @ steps[j].vectors[ell])))
    return DeflationRecord(steps, rho, eta, seed, restarts, kept)
