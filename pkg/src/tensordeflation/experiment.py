"""Monte-Carlo sweeps comparing simulated deflation with the asymptotic predictions.

Config (JSON)::

    {
      "model": {"dims": [50, 50, 50], "betas": [0, 10], "alpha": 0.7},
      "sweep": {"param": "beta1", "min": 0, "max": 20, "count": 41},
      "trials": 20,
      "power_iter": {"tol": 1e-10, "max_iters": 1000, "restarts": 0},
      "solver": {"num_starts": 100, "tol": 1e-12},
      "outputs": "out",
      "base_seed": 0
    }

``sweep.param`` is ``beta<i>`` (1-based) or ``alpha``.  Trial ``t`` at grid
point ``g`` uses the seed ``base_seed XOR H(g, t)`` where ``H`` is the first
eight bytes (little-endian) of BLAKE2b over the ASCII string ``"g:t"``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import __version__
from .deflation import DegenerateIterationError, deflate
from .model import FormatError, ModelParams, generate_model
from .rmt import SpectralParams
from .solver import multi_start_solve
from .systems import AsymptoticState, SystemSpec

logger = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "SweepPoint",
    "SweepResult",
    "CSV_COLUMNS",
    "SCHEMA_VERSION",
    "trial_seed",
    "run_trial",
    "run_sweep",
    "write_sweep",
    "track_branches",
    "nearest_branch",
]

SCHEMA_VERSION = 1
CSV_COLUMNS = [
    "beta1", "beta2", "alpha", "branch",
    "lambda1_emp", "lambda1_emp_sd", "lambda1_asym",
    "lambda2_emp", "lambda2_emp_sd", "lambda2_asym",
    "rho11_emp", "rho11_asym", "rho12_emp", "rho12_asym",
    "rho21_emp", "rho21_asym", "rho22_emp", "rho22_asym",
    "eta_emp", "eta_asym", "n_fail",
]
CONTINUITY_JUMP = 2.0


@dataclass
class ExperimentConfig:
    model: ModelParams
    param: str = "beta1"
    grid_min: float = 0.0
    grid_max: float = 20.0
    grid_count: int = 41
    trials: int = 20
    tol: float = 1e-10
    max_iters: int = 1000
    restarts: int = 0
    num_starts: int = 100
    solver_tol: float = 1e-12
    outputs: str = "out"
    base_seed: int = 0

    def __post_init__(self):
        if self.grid_count < 1:
            raise FormatError("sweep.count must be >= 1")
        if self.trials < 1:
            raise FormatError("trials must be >= 1")
        if not 0 <= self.base_seed < 2**64:
            raise FormatError("base_seed must be an unsigned 64-bit integer")
        if self.param != "alpha":
            if not self.param.startswith("beta"):
                raise FormatError(f"sweep.param: unknown parameter {self.param!r}")
            try:
                k = int(self.param[4:])
            except ValueError:
                raise FormatError(f"sweep.param: unknown parameter {self.param!r}") from None
            if not 1 <= k <= self.model.r:
                raise FormatError(f"sweep.param: {self.param} out of range for rank {self.model.r}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if "model" not in data:
            raise FormatError("config: missing field 'model'")
        model = ModelParams.from_dict(data["model"])
        sweep = data.get("sweep", {})
        pi = data.get("power_iter", {})
        so = data.get("solver", {})
        try:
            return cls(
                model=model,
                param=str(sweep.get("param", "beta1")),
                grid_min=float(sweep.get("min", 0.0)),
                grid_max=float(sweep.get("max", 20.0)),
                grid_count=int(sweep.get("count", 41)),
                trials=int(data.get("trials", 20)),
                tol=float(pi.get("tol", 1e-10)),
                max_iters=int(pi.get("max_iters", 1000)),
                restarts=int(pi.get("restarts", 0)),
                num_starts=int(so.get("num_starts", 100)),
                solver_tol=float(so.get("tol", 1e-12)),
                outputs=str(data.get("outputs", "out")),
                base_seed=int(data.get("base_seed", 0)),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "sweep": {"param": self.param, "min": self.grid_min, "max": self.grid_max, "count": self.grid_count},
            "trials": self.trials,
            "power_iter": {"tol": self.tol, "max_iters": self.max_iters, "restarts": self.restarts},
            "solver": {"num_starts": self.num_starts, "tol": self.solver_tol},
            "outputs": self.outputs,
            "base_seed": self.base_seed,
        }

    def digest(self) -> str:
        """SHA-256 of the canonical config, excluding the output directory."""
        data = self.to_dict()
        data.pop("outputs")
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()

    def grid(self) -> np.ndarray:
        if self.grid_count == 1:
            return np.array([self.grid_min])
        return np.linspace(self.grid_min, self.grid_max, self.grid_count)

    def params_at(self, value: float, seed: int) -> ModelParams:
        betas = list(self.model.betas)
        alphas = self.model.alphas.copy()
        if self.param == "alpha":
            off = ~np.eye(self.model.r, dtype=bool)
            alphas[:, off] = value
        else:
            betas[int(self.param[4:]) - 1] = value
        return ModelParams(self.model.dims, betas, alphas, seed)


def trial_seed(base_seed: int, grid_index: int, trial_index: int) -> int:
    h = hashlib.blake2b(f"{grid_index}:{trial_index}".encode("ascii"), digest_size=8).digest()
    return int(base_seed) ^ int.from_bytes(h, "little")


def run_trial(params: ModelParams, tol: float, max_iters: int, restarts: int) -> dict:
    """Simulate one model and deflate it ``r`` times; plain-data summary."""
    t, spikes = generate_model(params)
    try:
        rec = deflate(t, params.r, spikes, tol=tol, max_iters=max_iters, restarts=restarts, seed=params.seed)
    except (DegenerateIterationError, ValueError) as exc:
        return {"seed": params.seed, "ok": False, "error": str(exc)}
    return {
        "seed": params.seed,
        "ok": all(s.converged for s in rec.steps),
        "lambda": rec.lambdas.tolist(),
        "rho": rec.rho.tolist(),
        "eta": rec.eta.tolist(),
        "kkt_residual": [s.kkt_residual for s in rec.steps],
        "iterations": [s.iterations for s in rec.steps],
    }


def _trial_task(args):
    return run_trial(*args)


@dataclass
class SweepPoint:
    index: int
    params: ModelParams
    trials: list[dict]
    solutions: list[AsymptoticState]
    continuity_labels: list[int] = field(default_factory=list)

    @property
    def n_fail(self) -> int:
        return sum(not t["ok"] for t in self.trials)

    def empirical(self) -> dict:
        """Means (and standard deviations for the singular values) over successful trials.

        Alignments are averaged over modes first.  When the spikes are
        exchangeable (equal weights, equal pairwise correlations) the truth
        labels carry no information, so each trial's spikes are relabeled to
        maximize ``sum_i rho_ii``.
        """
        good = [t for t in self.trials if t["ok"]]
        out = {"n": len(good)}
        if not good:
            return out
        lam = np.array([t["lambda"] for t in good])
        rho = np.array([t["rho"] for t in good]).mean(axis=-1)
        if _exchangeable(self.params):
            for k in range(len(rho)):
                _, perm = linear_sum_assignment(-rho[k].T)
                rho[k] = rho[k][perm]
        eta = np.array([t["eta"] for t in good]).mean(axis=-1)
        r = lam.shape[1]
        for i in range(r):
            out[f"lambda{i + 1}"] = lam[:, i].mean()
            out[f"lambda{i + 1}_sd"] = lam[:, i].std(ddof=1) if len(good) > 1 else 0.0
            for j in range(r):
                out[f"rho{i + 1}{j + 1}"] = rho[:, i, j].mean()
                out[f"rho{i + 1}{j + 1}_sd"] = rho[:, i, j].std(ddof=1) if len(good) > 1 else 0.0
        if r >= 2:
            out["eta"] = eta[:, 0, 1].mean()
            out["eta_sd"] = eta[:, 0, 1].std(ddof=1) if len(good) > 1 else 0.0
        return out


def _exchangeable(params: ModelParams) -> bool:
    if params.r < 2 or len(set(params.betas)) > 1:
        return False
    off = ~np.eye(params.r, dtype=bool)
    return all(np.ptp(a[off]) == 0 for a in params.alphas)


def _state_vector(s: AsymptoticState) -> np.ndarray:
    return np.concatenate([s.lambdas, s.rho.mean(axis=-1).ravel(), s.eta.mean(axis=-1).ravel()])


def track_branches(points: list[list[AsymptoticState]], jump: float = CONTINUITY_JUMP) -> list[list[int]]:
    """Continuity labels: match each point's solutions to the previous point's.

    Optimal assignment on the Euclidean distance between state vectors; a
    match farther than ``jump`` (or an unmatched solution) opens a new label.
    """
    labels: list[list[int]] = []
    prev: list[tuple[int, np.ndarray]] = []
    next_label = 1
    for sols in points:
        cur = [None] * len(sols)
        vecs = [_state_vector(s) for s in sols]
        if prev and sols:
            cost = np.array([[np.linalg.norm(v - pv) for _, pv in prev] for v in vecs])
            rows, cols = linear_sum_assignment(cost)
            for a, b in zip(rows, cols):
                if cost[a, b] <= jump:
                    cur[a] = prev[b][0]
        for k in sorted(range(len(sols)), key=lambda k: sols[k].label or 0):
            if cur[k] is None:
                cur[k] = next_label
                next_label += 1
        next_label = max([next_label] + [c + 1 for c in cur])
        labels.append(cur)
        if sols:
            prev = list(zip(cur, vecs))
    return labels


def nearest_branch(emp: dict, solutions: list[AsymptoticState]) -> int | None:
    """Index of the solution closest to the empirical means.

    Distance is Euclidean over ``(lambda1, lambda2, rho11, rho22, eta)``
    (the second-step entries only when ``r >= 2``).
    """
    if not solutions or "lambda1" not in emp:
        return None
    two = "lambda2" in emp
    keys = ["lambda1", "rho11"] + (["lambda2", "rho22", "eta"] if two else [])
    target = [emp[k] for k in keys]
    dists = []
    for s in solutions:
        rho = s.rho.mean(axis=-1)
        v = [s.lambdas[0], rho[0, 0]]
        if two:
            v += [s.lambdas[1], rho[1, 1], s.eta[0, 1].mean()]
        dists.append(math.dist(target, v))
    return int(np.argmin(dists))


@dataclass
class SweepResult:
    config: ExperimentConfig
    points: list[SweepPoint]

    @property
    def max_solutions(self) -> int:
        return max((len(p.solutions) for p in self.points), default=0)


def run_sweep(config: ExperimentConfig, jobs: int = 1) -> SweepResult:
    """Solve the asymptotic system and simulate ``trials`` deflations at every grid point."""
    grid = config.grid()
    tasks, params_list = [], []
    for g, value in enumerate(grid):
        params_list.append(config.params_at(float(value), config.base_seed))
        for k in range(config.trials):
            p = config.params_at(float(value), trial_seed(config.base_seed, g, k))
            tasks.append((p, config.tol, config.max_iters, config.restarts))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_trial_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_trial_task(t) for t in tasks]
    c = SpectralParams.from_dims(config.model.dims).c
    points = []
    for g, params in enumerate(params_list):
        trials = results[g * config.trials:(g + 1) * config.trials]
        solutions = []
        if max(params.betas) > 0:
            spec = SystemSpec(params.r, params.d, params.betas, params.alphas, c)
            solutions = multi_start_solve(spec, config.num_starts, seed=(config.base_seed + g) % 2**64,
                                          tol=config.solver_tol)
        points.append(SweepPoint(g, params, trials, solutions))
        logger.info("grid point %d/%d: %d solutions, %d failed trials", g + 1, len(grid),
                    len(solutions), points[-1].n_fail)
    for p, lab in zip(points, track_branches([p.solutions for p in points])):
        p.continuity_labels = lab
    return SweepResult(config, points)


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def _row(point: SweepPoint, branch, sol: AsymptoticState | None) -> list[str]:
    emp = point.empirical()
    betas = list(point.params.betas) + [None, None]
    alpha = point.params.alphas[0, 0, 1] if point.params.r > 1 else None

    def asym_lambda(i):
        return sol.lambdas[i] if sol is not None and i < len(sol.lambdas) else None

    def asym_rho(i, j):
        return sol.rho[i, j].mean() if sol is not None and max(i, j) < sol.rho.shape[0] else None

    eta_asym = sol.eta[0, 1].mean() if sol is not None and sol.eta.shape[0] > 1 else None
    vals = [betas[0], betas[1], alpha, branch,
            emp.get("lambda1"), emp.get("lambda1_sd"), asym_lambda(0),
            emp.get("lambda2"), emp.get("lambda2_sd"), asym_lambda(1),
            emp.get("rho11"), asym_rho(0, 0), emp.get("rho12"), asym_rho(0, 1),
            emp.get("rho21"), asym_rho(1, 0), emp.get("rho22"), asym_rho(1, 1),
            emp.get("eta"), eta_asym, point.n_fail]
    out = []
    for name, v in zip(CSV_COLUMNS, vals):
        if name in ("branch", "n_fail"):
            out.append("" if v is None else str(int(v)))
        else:
            out.append(_fmt(v))
    return out


def _csv_text(result: SweepResult, rows: list[list[str]], labeling: str) -> str:
    buf = io.StringIO()
    buf.write(f"# tensordeflation {__version__} schema={SCHEMA_VERSION} "
              f"config_sha256={result.config.digest()} labeling={labeling}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(rows)
    return buf.getvalue()


def write_sweep(result: SweepResult, out_dir=None) -> list[Path]:
    """Write per-branch CSVs under both labelings, the nearest-branch CSV and per-trial JSON."""
    out = Path(out_dir if out_dir is not None else result.config.outputs)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = []

    def emit(name: str, text: str):
        path = out / name
        with open(path, "w", newline="", encoding="ascii") as fh:
            fh.write(text)
        written.append(path)

    k_max = result.max_solutions
    for lab in range(1, k_max + 1):
        rows = []
        for p in result.points:
            sol = next((s for s in p.solutions if s.label == lab), None)
            rows.append(_row(p, lab, sol))
        emit(f"sweep_rho12_branch{lab}.csv", _csv_text(result, rows, "rho12"))
    cont_labels = sorted({c for p in result.points for c in p.continuity_labels})
    for lab in cont_labels:
        rows = []
        for p in result.points:
            sol = next((s for s, c in zip(p.solutions, p.continuity_labels) if c == lab), None)
            rows.append(_row(p, lab, sol))
        emit(f"sweep_continuity_branch{lab}.csv", _csv_text(result, rows, "continuity"))
    rows = []
    for p in result.points:
        k = nearest_branch(p.empirical(), p.solutions)
        sol = None if k is None else p.solutions[k]
        rows.append(_row(p, None if sol is None else sol.label, sol))
    emit("sweep_nearest.csv", _csv_text(result, rows, "nearest"))
    trials = {
        "tool_version": __version__,
        "config_sha256": result.config.digest(),
        "config": {k: v for k, v in result.config.to_dict().items() if k != "outputs"},
        "points": [
            {"index": p.index, "betas": list(p.params.betas), "alphas": p.params.alphas.tolist(),
             "trials": p.trials, "solutions": [s.to_json() for s in p.solutions],
             "continuity_labels": p.continuity_labels}
            for p in result.points
        ],
    }
    emit("sweep_trials.json", json.dumps(trials, sort_keys=True, indent=1) + "\n")
    return written

