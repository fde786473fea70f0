import json

import numpy as np
import pytest

from tensordeflation.deflation import (DegenerateIterationError, best_rank_one, deflate, kkt_residual,
                                       power_iteration, svd_init)
from tensordeflation.model import ModelParams, generate_correlated_spikes, generate_model
from tensordeflation.tensor import contract_full, normalize, outer_product


def test_rank_one_exact_recovery(rng):
    vecs = [normalize(rng.standard_normal(n)) for n in (6, 7, 8)]
    t = outer_product(vecs, 3.0)
    pair = best_rank_one(t)
    assert pair.converged
    assert pair.lam == pytest.approx(3.0, abs=1e-12)
    for u, x in zip(pair.vectors, vecs):
        assert abs(u @ x) == pytest.approx(1.0, abs=1e-12)


def test_kkt_and_lambda_identity():
    t, _ = generate_model(ModelParams((30, 30, 30), (6.0, 9.0), 0.5, seed=3))
    pair = best_rank_one(t)
    assert pair.kkt_residual < 1e-8
    assert pair.kkt_residual == kkt_residual(t, pair.vectors, pair.lam)
    assert pair.lam == contract_full(t, pair.vectors)
    assert pair.lam > 0


def test_objective_non_decreasing(rng):
    t = rng.standard_normal((8, 9, 10))
    pair = power_iteration(t, [rng.standard_normal(n) for n in t.shape], max_iters=200)
    h = np.array(pair.history)
    assert np.all(np.diff(h[1:]) >= -1e-12 * np.abs(h[1:-1]).max())


def test_negative_lambda_flipped():
    vecs = [np.eye(3)[0]] * 3
    t = outer_product(vecs, -2.0)
    pair = power_iteration(t, [np.ones(3)] * 3)
    assert pair.lam == pytest.approx(2.0)
    assert contract_full(t, pair.vectors) == pytest.approx(2.0)


def test_max_iters_flags_non_convergence(rng):
    t = rng.standard_normal((10, 10, 10))
    pair = power_iteration(t, [rng.standard_normal(10) for _ in range(3)], tol=1e-15, max_iters=2)
    assert not pair.converged
    assert pair.iterations == 2


def test_degenerate_contraction():
    t = np.zeros((3, 3, 3))
    t[0, 0, 0] = 1.0
    with pytest.raises(DegenerateIterationError):
        power_iteration(t, [np.eye(3)[1]] * 3)


def test_svd_init_rejects_zero():
    with pytest.raises(ValueError):
        svd_init(np.zeros((2, 3, 4)))


def test_svd_init_sign_convention(rng):
    for u in svd_init(rng.standard_normal((4, 5, 6))):
        assert u[np.argmax(np.abs(u))] > 0
        assert np.linalg.norm(u) == pytest.approx(1.0)


def test_deflation_reconstruction():
    t, spikes = generate_model(ModelParams((20, 20, 20), (5.0, 8.0), 0.6, seed=7))
    rec = deflate(t, 2, spikes, keep_tensors=True)
    ts = rec.residual_tensors
    for i, step in enumerate(rec.steps):
        np.testing.assert_allclose(ts[i + 1] + step.tensor(), ts[i], rtol=0, atol=1e-14)
    assert rec.rho.shape == (2, 2, 3) and rec.eta.shape == (2, 2, 3)
    assert np.all((rec.rho >= 0) & (rec.rho <= 1))
    assert np.all((rec.eta >= 0) & (rec.eta <= 1))
    np.testing.assert_array_equal(rec.eta[0, 0], 1.0)


def test_noiseless_orthogonal_is_exact():
    p = ModelParams((10, 10, 10), (4.0, 7.0), 0.0, seed=1)
    s = generate_correlated_spikes(p)
    rec = deflate(s.tensor(), 2, s, keep_tensors=True)
    np.testing.assert_allclose(sorted(rec.lambdas), [4.0, 7.0], atol=1e-10)
    assert np.linalg.norm(rec.residual_tensors[-1]) < 1e-9


def test_noiseless_correlated_leaves_residual():
    p = ModelParams((10, 10, 10), (4.0, 7.0), 0.7, seed=1)
    s = generate_correlated_spikes(p)
    rec = deflate(s.tensor(), 2, s, keep_tensors=True)
    assert np.linalg.norm(rec.residual_tensors[-1]) > 1e-3


def test_restarts_never_worse():
    t, _ = generate_model(ModelParams((15, 15, 15), (1.5,), seed=5))
    a = best_rank_one(t)
    b = best_rank_one(t, restarts=4, seed=2)
    assert b.lam >= a.lam - 1e-12


def test_record_json(tmp_path):
    t, spikes = generate_model(ModelParams((10, 10, 10), (5.0, 8.0), 0.3, seed=1))
    rec = deflate(t, 2, spikes, seed=2**64 - 1, restarts=1)
    data = json.loads(rec.dumps())
    assert set(data) >= {"lambda", "rho", "eta", "kkt_residual", "iterations", "converged", "vectors", "seed"}
    assert len(data["vectors"]) == 2 and len(data["vectors"][0][2]) == 10


def test_num_steps_validation(rng):
    with pytest.raises(ValueError):
        deflate(rng.standard_normal((3, 3, 3)), 0)


def test_noiseless_orthogonal_steps_in_order():
    p = ModelParams((12, 12, 12), (10.0, 5.0), 0.0, seed=4)
    s = generate_correlated_spikes(p)
    rec = deflate(s.tensor(), 2, s)
    np.testing.assert_allclose(rec.rho[0, 0], 1.0, atol=1e-8)
    np.testing.assert_allclose(rec.rho[1, 1], 1.0, atol=1e-8)


def test_svd_init_alignment_at_scale():
    vals = []
    for seed in range(20):
        t, s = generate_model(ModelParams((50, 50, 50), (10.0,), seed=seed))
        u = svd_init(t)
        vals.append(min(abs(a @ x) for a, x in zip(u, s.components[0])))
    assert min(vals) > 0.9


def test_pure_noise_lambda_range():
    t, _ = generate_model(ModelParams((30, 30, 30), (0.0,), seed=6))
    pair = best_rank_one(t)
    proxy = best_rank_one(t, restarts=50, seed=1)
    assert pair.lam <= proxy.lam + 1e-12
    assert pair.lam >= 2 * np.sqrt(2 / 3) * 0.9
    assert proxy.lam <= np.linalg.norm(t)
