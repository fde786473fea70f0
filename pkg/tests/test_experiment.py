import csv
import hashlib
import json

import numpy as np
import pytest

from tensordeflation.experiment import (CSV_COLUMNS, ExperimentConfig, nearest_branch, run_sweep, run_trial,
                                       track_branches, trial_seed, write_sweep)
from tensordeflation.model import FormatError, ModelParams
from tensordeflation.systems import psi_to_state


def small_config(**kw):
    base = dict(model=ModelParams((15, 15, 15), (4.0, 10.0), 0.7), grid_min=6.0, grid_max=14.0,
                grid_count=3, trials=2, num_starts=40, base_seed=77)
    base.update(kw)
    return ExperimentConfig(**base)


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# tensordeflation ")
    return list(csv.DictReader(lines[1:]))


def test_trial_seed_definition():
    h = hashlib.blake2b(b"3:5", digest_size=8).digest()
    assert trial_seed(0, 3, 5) == int.from_bytes(h, "little")
    assert trial_seed(2**64 - 1, 3, 5) == (2**64 - 1) ^ int.from_bytes(h, "little")
    seeds = {trial_seed(1, g, t) for g in range(20) for t in range(20)}
    assert len(seeds) == 400


def test_config_roundtrip_and_digest(tmp_path):
    cfg = small_config()
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    moved = ExperimentConfig.from_dict({**cfg.to_dict(), "outputs": "elsewhere"})
    assert moved.digest() == cfg.digest()
    assert small_config(trials=3).digest() != cfg.digest()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.load(path).digest() == cfg.digest()


@pytest.mark.parametrize("data, field", [
    ({}, "model"),
    ({"model": {"dims": [5, 5, 5], "betas": [1, 2]}, "sweep": {"count": 0}}, "count"),
    ({"model": {"dims": [5, 5, 5], "betas": [1, 2]}, "trials": 0}, "trials"),
    ({"model": {"dims": [5, 5, 5], "betas": [1, 2]}, "sweep": {"param": "beta3"}}, "param"),
    ({"model": {"dims": [5, 5, 5], "betas": [1, 2]}, "sweep": {"param": "gamma"}}, "param"),
    ({"model": {"dims": [5, 5, 5]}}, "betas"),
    ({"model": {"dims": [5, 5, 5], "betas": [1, 2]}, "trials": "many"}, "config"),
])
def test_config_errors(data, field):
    with pytest.raises(FormatError, match=field):
        ExperimentConfig.from_dict(data)


def test_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(FormatError, match="invalid JSON"):
        ExperimentConfig.load(p)


def test_params_at():
    cfg = small_config(param="alpha")
    p = cfg.params_at(0.3, 5)
    assert p.alphas[1, 0, 1] == 0.3 and p.seed == 5 and p.betas == (4.0, 10.0)
    assert small_config().params_at(2.5, 0).betas == (2.5, 10.0)


def test_run_trial_fields():
    out = run_trial(ModelParams((10, 10, 10), (6.0, 9.0), 0.5, seed=3), 1e-10, 1000, 0)
    assert out["ok"]
    assert np.array(out["rho"]).shape == (2, 2, 3)
    assert max(out["kkt_residual"]) < 1e-8


def test_track_branches_continuity():
    a = psi_to_state(10.0, 3.0, 0.5, 0.9, 0.8, 0.7, 0.2)
    b = psi_to_state(10.0, 2.0, 0.4, 0.9, 0.2, 0.7, 0.8)
    a2 = psi_to_state(10.2, 3.1, 0.5, 0.9, 0.8, 0.7, 0.2)
    b2 = psi_to_state(10.2, 2.1, 0.4, 0.9, 0.2, 0.7, 0.8)
    far = psi_to_state(40.0, 9.0, 0.1, 0.1, 0.1, 0.1, 0.1)
    labels = track_branches([[a, b], [b2, a2], [far]])
    assert labels[0] == [1, 2]
    assert labels[1] == [2, 1]
    assert labels[2] == [3]


def test_nearest_branch_uses_alignments():
    a = psi_to_state(15.7, 3.35, 0.57, 0.92, 0.83, 0.92, 0.21)
    b = psi_to_state(15.7, 3.35, 0.57, 0.92, 0.21, 0.92, 0.83)
    emp = {"lambda1": 15.6, "lambda2": 3.4, "eta": 0.56, "rho11": 0.92, "rho22": 0.82}
    assert nearest_branch(emp, [a, b]) == 1
    assert nearest_branch(emp, []) is None


@pytest.fixture(scope="module")
def sweep_dirs(tmp_path_factory):
    cfg = small_config()
    out = []
    for name in ("a", "b"):
        d = tmp_path_factory.mktemp(name)
        write_sweep(run_sweep(cfg), d)
        out.append(d)
    return cfg, out


def test_sweep_files_and_schema(sweep_dirs):
    cfg, (a, _) = sweep_dirs
    names = sorted(p.name for p in a.iterdir())
    assert "sweep_nearest.csv" in names and "sweep_rho12_branch1.csv" in names
    assert "sweep_trials.json" in names and "sweep_continuity_branch1.csv" in names
    for name in names:
        if name.endswith(".csv"):
            head = (a / name).read_text().splitlines()[:2]
            assert f"config_sha256={cfg.digest()}" in head[0]
            assert "schema=1" in head[0]
            assert head[1].split(",") == CSV_COLUMNS
    rows = read_csv(a / "sweep_nearest.csv")
    assert [float(r["beta1"]) for r in rows] == [6.0, 10.0, 14.0]
    assert all(r["n_fail"] == "0" for r in rows)
    for r in rows:
        assert abs(float(r["lambda1_emp"]) - float(r["lambda1_asym"])) < 1.0


def test_sweep_byte_identical(sweep_dirs):
    _, (a, b) = sweep_dirs
    for p in a.iterdir():
        assert p.read_bytes() == (b / p.name).read_bytes(), p.name


def test_sweep_single_trial_repeat(tmp_path):
    cfg = small_config(trials=1, grid_count=1)
    write_sweep(run_sweep(cfg), tmp_path / "x")
    write_sweep(run_sweep(cfg), tmp_path / "y")
    for p in (tmp_path / "x").iterdir():
        assert p.read_bytes() == (tmp_path / "y" / p.name).read_bytes()


def test_parallel_matches_serial(tmp_path):
    cfg = small_config(grid_count=2, trials=2)
    write_sweep(run_sweep(cfg, jobs=1), tmp_path / "s")
    write_sweep(run_sweep(cfg, jobs=2), tmp_path / "p")
    for p in (tmp_path / "s").iterdir():
        assert p.read_bytes() == (tmp_path / "p" / p.name).read_bytes()


def test_orthogonal_sweep_cross_alignment_small(tmp_path):
    cfg = ExperimentConfig(ModelParams((20, 20, 20), (4.0, 10.0), 0.0), grid_min=4.0, grid_max=16.0,
                           grid_count=4, trials=3, num_starts=40)
    write_sweep(run_sweep(cfg), tmp_path)
    for r in read_csv(tmp_path / "sweep_nearest.csv"):
        b1 = float(r["beta1"])
        if b1 > 10.0:
            assert float(r["rho21_emp"]) < 0.15
        else:
            # the stronger spike 2 is found first, so the roles swap
            assert float(r["rho11_emp"]) < 0.15


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    res = run_sweep(small_config(grid_count=1, trials=1))
    with pytest.raises(OSError):
        write_sweep(res, blocker / "sub")
