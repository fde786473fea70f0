import math

import numpy as np
import pytest

from tensordeflation.rmt import OutsideSupportError, g_closed_form
from tensordeflation.systems import (PSI_ROWS_FROM_GENERAL, SystemSpec, pack_state, psi_residual,
                                     psi_residual_reference, psi_to_state, state_to_psi, general_residual,
                                     general_residual_reference, unknown_count, unpack_state)


def hand_r2d3(lam, rho, eta, betas, alpha):
    """Rows for r=2, d=3, equal dimensions, typed out one by one.

    rho[k][i][l]: spike k vs estimate i; eta[l] = |<u_1l, u_2l>|.
    """
    b1, b2 = betas
    g = [g_closed_form(z) for z in lam]
    gl = [v / 3 for v in g]
    hl = [-1 / v for v in g]          # -(1/3)/(g/3)
    f = [z + v for z, v in zip(lam, g)]
    a = alpha
    p = rho
    rows = [f[0] - b1 * p[0][0][0] * p[0][0][1] * p[0][0][2] - b2 * p[1][0][0] * p[1][0][1] * p[1][0][2],
            f[1] + lam[0] * eta[0] * eta[1] * eta[2]
            - b1 * p[0][1][0] * p[0][1][1] * p[0][1][2] - b2 * p[1][1][0] * p[1][1][1] * p[1][1][2]]
    for l in range(3):
        m1, m2 = [m for m in range(3) if m != l]
        for i in range(2):
            for j in range(2):
                aj = [1.0 if j == 0 else a, a if j == 0 else 1.0]   # alpha_{kj}
                v = hl[i] * p[j][i][l]
                if i == 1:
                    v += lam[0] * p[j][0][l] * eta[m1] * eta[m2]
                v -= b1 * aj[0] * p[0][i][m1] * p[0][i][m2] + b2 * aj[1] * p[1][i][m1] * p[1][i][m2]
                rows.append(v)
    for l in range(3):
        m1, m2 = [m for m in range(3) if m != l]
        v = hl[1] * eta[l] + gl[0] * eta[m1] * eta[m2] + lam[0] * 1.0 * eta[m1] * eta[m2]
        v -= b1 * p[0][0][l] * p[0][1][m1] * p[0][1][m2] + b2 * p[1][0][l] * p[1][1][m1] * p[1][1][m2]
        rows.append(v)
    return rows


def random_state(g, r, d, edge=1.64):
    lam = g.uniform(edge + 0.1, 12, r)
    rho = g.uniform(0, 1, (r, r, d))
    eta = np.ones((r, r, d))
    for i in range(r):
        for j in range(i + 1, r):
            eta[i, j] = eta[j, i] = g.uniform(0, 1, d)
    return lam, rho, eta


def test_square_system_sizes():
    for r in range(1, 5):
        for d in range(3, 6):
            spec = SystemSpec(r, d, (1.0,) * r)
            x = pack_state(*random_state(np.random.default_rng(r * d), r, d, spec.edge))
            assert x.size == unknown_count(r, d) == general_residual(x, spec).size


def test_pack_roundtrip(rng):
    lam, rho, eta = random_state(rng, 3, 4)
    l2, r2, e2 = unpack_state(pack_state(lam, rho, eta), 3, 4)
    np.testing.assert_array_equal(l2, lam)
    np.testing.assert_array_equal(r2, rho)
    np.testing.assert_array_equal(e2, eta)


def test_rank_one_specialization(rng):
    spec = SystemSpec(1, 3, (4.0,))
    lam, rho, eta = random_state(rng, 1, 3)
    res = general_residual(pack_state(lam, rho, eta), spec)
    assert res.size == 1 + 3
    g = g_closed_form(lam[0])
    p = rho[0, 0]
    assert res[0] == pytest.approx(lam[0] + g - 4 * p.prod())
    for l in range(3):
        assert res[1 + l] == pytest.approx(-p[l] / g - 4 * np.prod(np.delete(p, l)))


def test_against_hand_coded(rng):
    for _ in range(50):
        b = rng.uniform(0, 15, 2)
        a = rng.uniform(0, 1)
        spec = SystemSpec(2, 3, tuple(b), a)
        lam, rho, eta = random_state(rng, 2, 3)
        got = general_residual(pack_state(lam, rho, eta), spec)
        want = hand_r2d3(lam, rho, eta[0, 1], b, a)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_batched_matches_reference(rng):
    spec = SystemSpec(3, 4, (3.0, 6.0, 9.0), 0.3, c=(0.1, 0.2, 0.3, 0.4))
    states = [random_state(rng, 3, 4, spec.edge) for _ in range(8)]
    x = np.stack([pack_state(*s) for s in states])
    got = general_residual(x, spec)
    for k, s in enumerate(states):
        np.testing.assert_allclose(got[k], general_residual_reference(*s, spec), rtol=1e-11, atol=1e-11)


def test_specialization_to_psi(rng):
    for _ in range(200):
        b1, b2, a = rng.uniform(0, 15), rng.uniform(0, 15), rng.uniform(0, 1)
        l1, l2 = rng.uniform(1.7, 20, 2)
        r = rng.uniform(0, 1, 4)
        e = rng.uniform(0, 1)
        st = psi_to_state(l1, l2, e, *r)
        t2 = general_residual(pack_state(st.lambdas, st.rho, st.eta), SystemSpec(2, 3, (b1, b2), a))
        psi = psi_residual((l1, l2, e), (b1, b2, a), r)
        for row, idx in PSI_ROWS_FROM_GENERAL.items():
            for k in idx:
                assert abs(t2[k] - psi[row]) < 1e-12


def test_psi_reference_agrees(rng):
    for _ in range(100):
        le = (rng.uniform(1.7, 20), rng.uniform(1.7, 20), rng.uniform(0, 1))
        bt = (rng.uniform(0, 15), rng.uniform(0, 15), rng.uniform(0, 1))
        rh = rng.uniform(0, 1, 4)
        np.testing.assert_allclose(psi_residual(le, bt, rh), psi_residual_reference(*le, *bt, *rh),
                                   rtol=1e-12, atol=1e-12)


def test_psi_rank_one_embedding():
    # beta2 = 0, alpha = 0, rho21 = rho22 = eta = 0: rows 4-7 become the rank-one system in (lam2, rho12)
    l1, l2, r11, r12 = 6.0, 4.0, 0.9, 0.8
    res = psi_residual((l1, l2, 0.0), (5.0, 0.0, 0.0), (r11, r12, 0.0, 0.0))
    g2 = g_closed_form(l2)
    assert res[3] == pytest.approx(l2 + g2 - 5 * r12 ** 3)
    assert res[4] == pytest.approx(-r12 / g2 - 5 * r12 ** 2)
    assert res[2] == 0.0 and res[5] == 0.0
    # only the spike-1 coupling survives in the last row
    assert res[6] == pytest.approx(-5 * r11 * r12 ** 2)


def test_psi_state_roundtrip():
    st = psi_to_state(5.0, 3.0, 0.4, 0.9, 0.8, 0.7, 0.6)
    le, rh = state_to_psi(st)
    assert le == pytest.approx((5.0, 3.0, 0.4)) and rh == pytest.approx((0.9, 0.8, 0.7, 0.6))


def test_inside_support_rejected():
    with pytest.raises(OutsideSupportError):
        psi_residual((1.0, 3.0, 0.5), (1, 1, 0.5), (0.5,) * 4)
    spec = SystemSpec(2, 3, (1.0, 1.0))
    x = pack_state(np.array([1.0, 3.0]), np.full((2, 2, 3), 0.5), np.ones((2, 2, 3)))
    with pytest.raises(OutsideSupportError):
        general_residual(x, spec)


def test_spec_validation():
    with pytest.raises(ValueError):
        SystemSpec(2, 3, (1.0,))
    with pytest.raises(ValueError):
        SystemSpec(2, 3, c=(0.5, 0.3, 0.2), mode="inverse", measured=(3, 2, 0.5))
    with pytest.raises(ValueError):
        SystemSpec(2, 2, (1.0, 1.0))
    assert SystemSpec(2, 3, (1, 1)).edge == pytest.approx(2 * math.sqrt(2 / 3))
