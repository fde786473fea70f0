import numpy as np
import pytest

from tensordeflation.model import (FormatError, ModelParams, alpha_tensor, generate_correlated_spikes,
                                   generate_model, load_model, sample_noise, save_model)
from tensordeflation.tensor import outer_product


def test_spikes_have_exact_gram():
    p = ModelParams((20, 25, 30), (3.0, 5.0, 7.0), 0.4, seed=9)
    s = generate_correlated_spikes(p)
    np.testing.assert_allclose(s.realized_gram, p.alphas, atol=1e-12)
    for comp in s.components:
        for v, n in zip(comp, p.dims):
            assert v.shape == (n,)
            assert np.linalg.norm(v) == pytest.approx(1.0)


def test_semidefinite_gram_uses_fallback():
    # alpha = 1 makes the two spikes identical: Gram matrix is singular
    p = ModelParams((10, 10, 10), (1.0, 2.0), 1.0, seed=1)
    s = generate_correlated_spikes(p)
    for ell in range(3):
        assert abs(s.components[0][ell] @ s.components[1][ell]) == pytest.approx(1.0)


def test_indefinite_gram_rejected():
    a = np.array([[1.0, 0.9, 0.0], [0.9, 1.0, 0.9], [0.0, 0.9, 1.0]])
    with pytest.raises(ValueError, match="positive semidefinite"):
        generate_correlated_spikes(ModelParams((8, 8, 8), (1, 1, 1), a))


def test_noise_independent_of_betas():
    a, sa = generate_model(ModelParams((6, 7, 8), (2.0, 3.0), 0.5, seed=4))
    b, sb = generate_model(ModelParams((6, 7, 8), (5.0, 1.0), 0.5, seed=4))
    wa = a - sa.tensor()
    wb = b - sb.tensor()
    np.testing.assert_allclose(wa, wb, atol=1e-13)
    np.testing.assert_allclose(wa * np.sqrt(21), sample_noise((6, 7, 8), 4), atol=1e-12)


def test_zero_beta_is_pure_noise():
    t, spikes = generate_model(ModelParams((5, 5, 5), (0.0,), seed=2))
    np.testing.assert_allclose(t, sample_noise((5, 5, 5), 2) / np.sqrt(15))


def test_signal_tensor():
    p = ModelParams((4, 5, 6), (2.0, 3.0), 0.3, seed=0)
    s = generate_correlated_spikes(p)
    want = outer_product(s.components[0], 2.0) + outer_product(s.components[1], 3.0)
    np.testing.assert_allclose(s.tensor(), want)


def test_same_seed_same_model():
    p = ModelParams((5, 6, 7), (1.0, 2.0), 0.2, seed=2**64 - 1)
    a, _ = generate_model(p)
    b, _ = generate_model(p)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("kwargs, msg", [
    (dict(dims=(3, 3), betas=(1,)), "order"),
    (dict(dims=(3, 0, 3), betas=(1,)), "positive"),
    (dict(dims=(3, 3, 3), betas=()), "rank"),
    (dict(dims=(3, 3, 3), betas=(-1,)), "non-negative"),
    (dict(dims=(3, 3, 3), betas=(1, 1), alphas=1.5), r"\[0, 1\]"),
])
def test_param_validation(kwargs, msg):
    with pytest.raises(ValueError, match=msg):
        ModelParams(**kwargs)


def test_rank_exceeds_dimension():
    with pytest.raises(ValueError, match="rank"):
        generate_correlated_spikes(ModelParams((2, 5, 5), (1, 1, 1)))


def test_alpha_tensor_shapes():
    assert alpha_tensor(0.5, 2, 3).shape == (3, 2, 2)
    m = alpha_tensor([[9.0, 0.2], [0.2, 9.0]], 2, 4)
    np.testing.assert_array_equal(m[:, 0, 0], 1.0)
    np.testing.assert_array_equal(m[:, 0, 1], 0.2)
    with pytest.raises(ValueError):
        alpha_tensor(np.zeros((3, 3)), 2, 3)


def test_params_dict_roundtrip():
    p = ModelParams((4, 5, 6), (1.0, 2.0), 0.3, seed=11)
    q = ModelParams.from_dict(p.to_dict())
    assert q.dims == p.dims and q.betas == p.betas and q.seed == 11
    np.testing.assert_array_equal(q.alphas, p.alphas)
    with pytest.raises(FormatError, match="dims"):
        ModelParams.from_dict({"betas": [1]})


def test_binary_roundtrip(tmp_path, rng):
    t = rng.standard_normal((3, 4, 5))
    path = tmp_path / "m.spkt"
    save_model(path, t)
    raw = path.read_bytes()
    assert raw[:4] == b"SPKT"
    assert len(raw) == 4 + 8 + 3 * 8 + t.size * 8
    np.testing.assert_array_equal(load_model(path), t)


@pytest.mark.parametrize("mutate, field", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + b"\x02" + b[5:], "version"),
    (lambda b: b[:-8], "data length"),
    (lambda b: b[:6], "header"),
])
def test_binary_malformed(tmp_path, rng, mutate, field):
    path = tmp_path / "m.spkt"
    save_model(path, rng.standard_normal((2, 2, 2)))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError, match=field):
        load_model(path)


def test_noise_moments():
    w = sample_noise((50, 50, 50), 123)
    assert abs(w.mean()) < 0.01
    assert w.var() == pytest.approx(1.0, rel=0.02)
    assert not np.array_equal(w[:2, :2, :2], sample_noise((2, 2, 2), 124))


def test_norm_concentration():
    dims = (50, 50, 50)
    want = 25 + 100 + 2 * 50 * 0.7 ** 3 + 50 ** 3 / 150
    vals = [np.sum(generate_model(ModelParams(dims, (5.0, 10.0), 0.7, seed=s))[0] ** 2) for s in range(20)]
    assert np.mean(vals) == pytest.approx(want, rel=0.01)


def test_assemble_linear_in_beta():
    from tensordeflation.model import assemble_model
    a = generate_correlated_spikes(ModelParams((4, 5, 6), (2.0, 3.0), 0.4, seed=8))
    b = generate_correlated_spikes(ModelParams((4, 5, 6), (2.5, 3.0), 0.4, seed=8))
    w = sample_noise((4, 5, 6), 8)
    diff = assemble_model(b, w) - assemble_model(a, w)
    np.testing.assert_allclose(diff / 0.5, outer_product(a.components[0]), atol=1e-13)


def test_noiseless_contract_gives_beta():
    s = generate_correlated_spikes(ModelParams((7, 8, 9), (3.5,), seed=1))
    from tensordeflation.model import assemble_model
    from tensordeflation.tensor import contract_full
    t = assemble_model(s, np.zeros((7, 8, 9)))
    assert contract_full(t, s.components[0]) == pytest.approx(3.5)
