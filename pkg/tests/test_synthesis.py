import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatcascade import synthesis as syn
from heatcascade.funcalg import ScalarFn
from heatcascade.modal import assemble

from conftest import ONE_PLUS_X, SCENARIOS, certified, make_cfg


def test_scalar_gain():
    a, b, delta = 0.7, 2.0, 0.5
    K = syn.design_state_gain(np.array([[a]]), np.array([b]), delta)
    assert K[0] == pytest.approx((a + delta + 1.0) / b, rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_pole_placement_hits_targets(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    b = rng.normal(size=n)
    W = np.column_stack([np.linalg.matrix_power(A, j) @ b for j in range(n)])
    if np.linalg.cond(W) > 1e6:
        return
    poles = syn.target_poles(n, 0.5)
    K = syn.place_siso(A, b, poles)
    got = np.sort(np.linalg.eigvals(A - np.outer(b, K)).real)
    assert np.allclose(got, np.sort(poles), atol=1e-6 * (1 + np.abs(poles).max()))


def test_uncontrollable_pair_is_refused():
    with pytest.raises(syn.SynthesisError, match="condition number"):
        syn.place_siso(np.diag([1.0, 2.0]), np.array([1.0, 0.0]), [-1.0, -2.0])


def test_lyapunov_scalar_and_random():
    assert syn.solve_lyapunov(np.array([[-2.0]]), 1.0)[0, 0] == pytest.approx(0.5, abs=1e-15)
    rng = np.random.default_rng(3)
    for n in (5, 60):  # Kronecker and Bartels-Stewart branches
        F = rng.normal(size=(n, n)) - (np.sqrt(n) + 3.0) * np.eye(n)
        P = syn.solve_lyapunov(F, 0.5)
        res = F.T @ P + P @ F + P + np.eye(n)
        assert np.linalg.norm(res) < 1e-9 * np.linalg.norm(P)
        assert np.linalg.eigvalsh(P)[0] > 0
    with pytest.raises(syn.SynthesisError):
        syn.solve_lyapunov(np.array([[-0.2]]), 0.5)


def test_designed_loops_beat_the_decay_rate():
    m = assemble(make_cfg((1.0, 0.2), "distinct", ("dirichlet", 0.3)), n0={1: 3, 2: 2})
    ctrl = syn.design(m)
    a1, a2 = ctrl.abscissae()
    assert a1 < -0.5 and a2 < -0.5


def test_certificate_fails_at_tiny_orders():
    s = SCENARIOS["distinct-distributed"]
    m = assemble(make_cfg(s["a"], s["regime"], s["meas"]), n={1: 2, 2: 2})
    cert = syn.certify(syn.design(m))
    assert not cert.passed and cert.theta_max > 0


def test_unit_scale_does_not_certify():
    res = certified("distinct-distributed")
    assert res.passed
    assert not syn.certify(res.controller, scale="unit").passed


def test_zero_residue_weight_uses_order():
    # a constant weight sees no residual mode of the first chain
    m = assemble(make_cfg((1.0, 0.2), "distinct", ("distributed", ScalarFn.constant(1.0))), n={1: 4, 2: 4})
    cert = syn.certify(syn.design(m))
    assert cert.sums[1]["S_zeta"] == 0.0 and cert.eta[1] == 4.0
    assert cert.eta[2] == pytest.approx(cert.sums[2]["S_zeta"] ** -0.5)


def test_gamma_improves_with_order():
    s = SCENARIOS["distinct-dirichlet"]
    cfg = make_cfg(s["a"], s["regime"], s["meas"])
    ctrl = syn.design(assemble(cfg))
    g_small = syn.certify(ctrl.with_model(assemble(cfg, n={1: 10, 2: 10}))).gammas
    g_big = syn.certify(ctrl.with_model(assemble(cfg, n={1: 40, 2: 40}))).gammas
    assert all(g_big[ch] < g_small[ch] for ch in g_big)


@pytest.mark.parametrize("name", sorted(SCENARIOS))
def test_search_certifies_with_monotone_recheck(name):
    res = certified(name)
    assert res.passed and res.monotone
    assert res.certificate.theta_max <= 0
    assert all(g <= 0 for g in res.certificate.gammas.values())
    ds = sorted(p["d"] for p in res.path if not p["passed"])
    assert all(d < res.increment for d in ds)


def test_mode_block_deviation_decays():
    m = assemble(make_cfg((0.5, 0.5), "identical", ("distributed", ONE_PLUS_X)))
    dev = syn.mode_block_bounds(m, 8, 64)["deviation"]
    ks = np.array([k for k, _ in dev], float)
    vs = np.array([v for _, v in dev])
    slope = np.polyfit(np.log(ks), np.log(vs), 1)[0]
    assert slope <= -1.8
