"""Command-line front end.

Subcommands::

    simulate            draw a spiked tensor, write model.spkt + truth.json
    deflate             run the deflation on a model file, write deflation.json
    solve-asymptotics   forward asymptotic solutions, write solutions.json
    estimate-snr        invert (lam1, lam2, eta) from a deflation record, write snr.json
    spectrum            eigenvalues of the block contraction matrix + limiting density
    sweep               Monte-Carlo sweep against the asymptotic branches

Exit status is 2 for malformed input and 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .deflation import DegenerateIterationError, best_rank_one, deflate
from .experiment import ExperimentConfig, run_sweep, write_sweep
from .model import (FormatError, ModelParams, SpikeSet, assemble_model, generate_correlated_spikes,
                    load_model, make_rng, sample_noise, save_model)
from .rmt import SpectralParams, limiting_density, phi_d, support_edge
from .solver import SolverError, estimate_snr, multi_start_solve
from .systems import SystemSpec
from .tensor import normalize, outer_product

logger = logging.getLogger("tensordeflation")

EXIT_INPUT = 2
EXIT_NUMERIC = 3


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _input_error(msg: str) -> CLIError:
    return CLIError(msg, EXIT_INPUT)


def _numeric_error(stage: str, exc: Exception) -> CLIError:
    return CLIError(f"numerical failure in stage '{stage}': {exc}", EXIT_NUMERIC)


# -- flag parsing helpers ---------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _read_json(path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise _input_error(f"{what}: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise _input_error(f"{what}: invalid JSON in {path} ({exc})") from None


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise _input_error(f"--out: cannot write {path}: {exc}") from None


def _dump(path: Path, data) -> None:
    _write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def _config_model(args) -> dict:
    """Model fields from --config (key ``model`` or top level), overridden by flags."""
    data = {}
    if args.config:
        cfg = _read_json(args.config, "--config")
        data = dict(cfg.get("model", cfg))
    if args.dims is not None:
        data["dims"] = args.dims
    betas = list(data.get("betas", []))
    if args.betas is not None:
        betas = list(args.betas)
    for k, val in ((1, args.beta1), (2, args.beta2)):
        if val is None:
            continue
        while len(betas) < k:
            betas.append(0.0)
        betas[k - 1] = val
    if betas:
        data["betas"] = betas
    if args.rank is not None and "betas" in data and len(data["betas"]) != args.rank:
        raise _input_error(f"--rank: {args.rank} does not match {len(data['betas'])} betas")
    if args.order is not None and "dims" in data and len(data["dims"]) != args.order:
        raise _input_error(f"--order: {args.order} does not match dims {data['dims']}")
    if args.alpha is not None:
        data["alphas"] = args.alpha
    if args.seed is not None:
        data["seed"] = args.seed
    return data


def _model_params(args) -> ModelParams:
    data = _config_model(args)
    try:
        return ModelParams.from_dict(data)
    except FormatError as exc:
        raise _input_error(str(exc)) from None


def _load_tensor(path) -> np.ndarray:
    try:
        return load_model(path)
    except FileNotFoundError:
        raise _input_error(f"--model: file not found: {path}") from None
    except FormatError as exc:
        raise _input_error(f"--model: {exc}") from None


# -- subcommands ------------------------------------------------------------------

def cmd_simulate(args) -> int:
    params = _model_params(args)
    try:
        spikes = generate_correlated_spikes(params)
    except ValueError as exc:
        raise _input_error(f"model: {exc}") from None
    t = assemble_model(spikes, sample_noise(params.dims, params.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "model.spkt", t)
    truth = {
        "tool_version": __version__,
        "model": params.to_dict(),
        "realized_gram": spikes.realized_gram.tolist(),
        "spikes": [[v.tolist() for v in comp] for comp in spikes.components],
    }
    _dump(out / "truth.json", truth)
    logger.info("wrote %s", out / "model.spkt")
    return 0


def _truth_vectors(path) -> tuple[list[list[np.ndarray]], tuple[float, ...]]:
    data = _read_json(path, "--truth")
    if "spikes" not in data:
        raise _input_error("--truth: missing field 'spikes'")
    try:
        comps = [[np.asarray(v, dtype=float) for v in comp] for comp in data["spikes"]]
    except (TypeError, ValueError):
        raise _input_error("--truth: field 'spikes' is not a nested list of numbers") from None
    betas = tuple(data.get("model", {}).get("betas", [1.0] * len(comps)))
    return comps, betas


def cmd_deflate(args) -> int:
    t = _load_tensor(args.model)
    truth = None
    if args.truth:
        comps, betas = _truth_vectors(args.truth)
        if any(len(comp) != t.ndim or any(len(v) != n for v, n in zip(comp, t.shape)) for comp in comps):
            raise _input_error("--truth: field 'spikes' does not match the model dimensions")
        gram = np.array([[[comps[i][ell] @ comps[j][ell] for j in range(len(comps))]
                          for i in range(len(comps))] for ell in range(t.ndim)])
        truth = SpikeSet(betas, comps, gram)
    steps = args.rank if args.rank is not None else (truth.r if truth is not None else 2)
    seed = 0 if args.seed is None else args.seed
    try:
        rec = deflate(t, steps, truth, tol=args.tol, max_iters=args.max_iters,
                      restarts=args.restarts, seed=seed)
    except (DegenerateIterationError, ValueError, np.linalg.LinAlgError) as exc:
        raise _numeric_error("deflate", exc) from None
    data = rec.to_json()
    data["tool_version"] = __version__
    _dump(Path(args.out) / "deflation.json", data)
    if not all(s.converged for s in rec.steps):
        logger.warning("some deflation steps did not converge (see 'converged')")
    return 0


def _solver_spec(args) -> SystemSpec:
    data = _config_model(args)
    cfg = {}
    if args.config:
        cfg = _read_json(args.config, "--config")
    betas = data.get("betas")
    if not betas:
        raise _input_error("betas: missing (use --beta1/--beta2, --betas or a config file)")
    r = args.rank if args.rank is not None else len(betas)
    d = args.order
    c = args.c if args.c is not None else cfg.get("c")
    if d is None:
        if c is not None:
            d = len(c)
        elif "dims" in data:
            d = len(data["dims"])
        else:
            d = 3
    if c is None and "dims" in data:
        c = list(SpectralParams.from_dims(data["dims"]).c)
    try:
        return SystemSpec(r, d, tuple(betas), data.get("alphas", 0.0), None if c is None else tuple(c))
    except (TypeError, ValueError) as exc:
        raise _input_error(f"system: {exc}") from None


def cmd_solve(args) -> int:
    spec = _solver_spec(args)
    seed = 0 if args.seed is None else args.seed
    try:
        sols = multi_start_solve(spec, num_starts=args.num_starts, seed=seed)
    except (SolverError, np.linalg.LinAlgError, FloatingPointError) as exc:
        raise _numeric_error("solve-asymptotics", exc) from None
    data = {
        "tool_version": __version__,
        "r": spec.r, "d": spec.d, "betas": list(spec.betas), "c": list(spec.c),
        "alphas": spec.alphas.tolist(), "edge": spec.edge,
        "solutions": [s.to_json() for s in sols],
        "no_admissible_solution": not sols,
    }
    _dump(Path(args.out) / "solutions.json", data)
    if not sols:
        logger.info("no admissible solution")
    return 0


def cmd_estimate(args) -> int:
    rec = _read_json(args.record, "--record")
    for key in ("lambda", "eta"):
        if key not in rec:
            raise _input_error(f"--record: missing field '{key}'")
    try:
        lam = [float(v) for v in rec["lambda"]]
        eta = np.asarray(rec["eta"], dtype=float)
    except (TypeError, ValueError):
        raise _input_error("--record: fields 'lambda'/'eta' must be numeric") from None
    if len(lam) < 2 or eta.ndim != 3 or eta.shape[0] < 2:
        raise _input_error("--record: field 'lambda' needs two steps and 'eta' shape (steps, steps, d)")
    measured = (lam[0], lam[1], float(eta[0, 1].mean()))
    seed = 0 if args.seed is None else args.seed
    try:
        est = estimate_snr(measured, num_starts=args.num_starts, seed=seed)
    except (ValueError, SolverError, np.linalg.LinAlgError) as exc:
        raise _numeric_error("estimate-snr", exc) from None
    data = {
        "tool_version": __version__,
        "measured": {"lambda1": measured[0], "lambda2": measured[1], "eta": measured[2]},
        "estimates": [e.to_json() for e in est],
        "no_admissible_solution": not est,
    }
    _dump(Path(args.out) / "snr.json", data)
    return 0


def _spectrum_point(args, t: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], str]:
    """Tensor and contraction vectors for ``--point``."""
    point = args.point
    if point == "random":
        rng = make_rng(0 if args.seed is None else args.seed, 5)
        return t, [normalize(rng.standard_normal(n)) for n in t.shape], "random"
    if point == "power":
        try:
            pair = best_rank_one(t)
        except (DegenerateIterationError, ValueError) as exc:
            raise _numeric_error("spectrum/power-iteration", exc) from None
        return t, pair.vectors, "power"
    rec = _read_json(point, "--point")
    if "vectors" not in rec or "lambda" not in rec:
        raise _input_error("--point: record needs fields 'vectors' and 'lambda'")
    k = args.step
    if not 1 <= k <= len(rec["vectors"]):
        raise _input_error(f"--step: {k} outside 1..{len(rec['vectors'])}")
    try:
        vecs = [[np.asarray(v, dtype=float) for v in step] for step in rec["vectors"]]
        lams = [float(v) for v in rec["lambda"]]
    except (TypeError, ValueError):
        raise _input_error("--point: field 'vectors' is not numeric") from None
    if any(v.shape != (n,) for v, n in zip(vecs[k - 1], t.shape)) or len(vecs[k - 1]) != t.ndim:
        raise _input_error("--point: field 'vectors' does not match the model dimensions")
    cur = t.copy()
    for i in range(k - 1):
        cur -= outer_product(vecs[i], lams[i])
    return cur, vecs[k - 1], f"record step {k}"


def cmd_spectrum(args) -> int:
    t = _load_tensor(args.model)
    if t.ndim < 3:
        raise _input_error("--model: order must be >= 3")
    cur, vecs, label = _spectrum_point(args, t)
    try:
        eig = np.linalg.eigvalsh(phi_d(cur, vecs))
    except np.linalg.LinAlgError as exc:
        raise _numeric_error("spectrum/eigendecomposition", exc) from None
    params = SpectralParams.from_dims(t.shape)
    left, right = support_edge(params)
    xs = np.linspace(1.2 * left, 1.2 * right, args.grid)
    dens = limiting_density(xs, params)
    head = f"# tensordeflation {__version__} point={label} dims={','.join(map(str, t.shape))} edge={right!r}\n"
    buf = io.StringIO()
    buf.write(head)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "eigenvalue"])
    for i, v in enumerate(eig):
        w.writerow([i, repr(float(v))])
    out = Path(args.out)
    _write_text(out / "eigenvalues.csv", buf.getvalue())
    buf = io.StringIO()
    buf.write(head)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "density"])
    for x, v in zip(xs, dens):
        w.writerow([repr(float(x)), repr(float(v))])
    _write_text(out / "density.csv", buf.getvalue())
    n_out = int(np.sum(np.abs(eig) > right + 0.15))
    logger.info("%d eigenvalues outside the support (+0.15)", n_out)
    return 0


def cmd_sweep(args) -> int:
    if not args.config:
        raise _input_error("--config: required for sweep")
    data = _read_json(args.config, "--config")
    if "model" not in data:
        raise _input_error("config: missing field 'model'")
    data = dict(data)
    model = dict(data["model"])
    if args.dims is not None:
        model["dims"] = args.dims
    if args.alpha is not None:
        model["alphas"] = args.alpha
    betas = list(model.get("betas", []))
    for k, val in ((1, args.beta1), (2, args.beta2)):
        if val is not None and len(betas) >= k:
            betas[k - 1] = val
    model["betas"] = betas
    data["model"] = model
    if args.trials is not None:
        data["trials"] = args.trials
    if args.seed is not None:
        data["base_seed"] = args.seed
    if args.out is not None:
        data["outputs"] = args.out
    try:
        cfg = ExperimentConfig.from_dict(data)
    except FormatError as exc:
        raise _input_error(str(exc)) from None
    try:
        res = run_sweep(cfg, jobs=args.jobs)
    except (SolverError, np.linalg.LinAlgError) as exc:
        raise _numeric_error("sweep", exc) from None
    try:
        written = write_sweep(res, cfg.outputs)
    except OSError as exc:
        raise _input_error(f"outputs: cannot write to {cfg.outputs}: {exc}") from None
    for p in written:
        logger.info("wrote %s", p)
    return 0


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (sweep)")
    common.add_argument("--seed", type=_u64, help="unsigned 64-bit seed")
    common.add_argument("--beta1", type=float)
    common.add_argument("--beta2", type=float)
    common.add_argument("--betas", type=_float_list, help="comma-separated signal strengths")
    common.add_argument("--alpha", type=float, help="spike correlation (all pairs, all modes)")
    common.add_argument("--dims", type=_int_list, help="n1,n2,...,nd")
    common.add_argument("--rank", type=int)
    common.add_argument("--order", type=int)
    common.add_argument("--trials", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tensordeflation", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="draw a spiked tensor")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("deflate", parents=[common], help="deflate a model file")
    s.add_argument("--model", required=True)
    s.add_argument("--truth", help="truth.json from simulate, to report alignments")
    s.add_argument("--tol", type=float, default=1e-10)
    s.add_argument("--max-iters", type=int, default=1000)
    s.add_argument("--restarts", type=int, default=0)
    s.set_defaults(func=cmd_deflate)

    s = sub.add_parser("solve-asymptotics", parents=[common], help="forward asymptotic solutions")
    s.add_argument("--c", type=_float_list, help="dimension fractions c1,..,cd")
    s.add_argument("--num-starts", type=int, default=100)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("estimate-snr", parents=[common], help="invert a two-step deflation record")
    s.add_argument("--record", required=True)
    s.add_argument("--num-starts", type=int, default=100)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("spectrum", parents=[common], help="contraction-matrix eigenvalues and density")
    s.add_argument("--model", required=True)
    s.add_argument("--point", default="power", help="'power', 'random' or a deflation.json path")
    s.add_argument("--step", type=int, default=1, help="deflation step to use with a record")
    s.add_argument("--grid", type=int, default=400, help="density grid size")
    s.set_defaults(func=cmd_spectrum)

    s = sub.add_parser("sweep", parents=[common], help="Monte-Carlo sweep (needs --config)")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad flags, which is our malformed-input code as well
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.out is None and args.command != "sweep":
        args.out = "."
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
