import math

import numpy as np
import pytest
from scipy.linalg import expm

from heatcascade import simulate as sim
from heatcascade import synthesis as syn
from heatcascade.funcalg import ScalarFn
from heatcascade.modal import assemble

from conftest import ONE_PLUS_X, closed_loop, certified, initial_conditions, make_cfg


def open_model(a=(1.0, 0.2), meas=("distributed", ONE_PLUS_X), regime="distinct", n=None):
    return assemble(make_cfg(a, regime, meas), n=n)


def test_projection_of_a_basis_mode():
    m = open_model()
    loop = sim.ClosedLoop(m, None, K=12)
    g = m.low[0]
    coeffs, frac = sim.project_initial(loop.basis, sim.InitialCondition(tuple(g.phis[0].components), 0.0))
    want = np.zeros_like(coeffs)
    want[0] = 1.0
    assert np.allclose(coeffs, want, atol=1e-10)
    assert frac < 1e-16


def test_projection_of_the_lift_gives_input_column():
    m = open_model()
    loop = sim.ClosedLoop(m, None, K=12)
    zero = tuple(ScalarFn.zero() for _ in range(2))
    coeffs, _ = sim.project_initial(loop.basis, sim.InitialCondition(zero, 1.0))
    betas = np.concatenate([g.beta for g in loop.groups])
    assert np.allclose(coeffs, betas, atol=1e-12)


def test_zero_state_stays_zero():
    m = open_model()
    zero = sim.InitialCondition(tuple(ScalarFn.zero() for _ in range(2)), 0.0)
    tr = sim.run(m, None, zero, 1.0, dt=0.1, K=12)
    assert np.all(tr.states == 0.0) and np.all(tr.h0 == 0.0)


def test_pure_mode_decays_exactly_without_feedback():
    m = open_model()
    loop = sim.ClosedLoop(m, None, K=12)
    g = loop.residual[0]
    tr = sim.run(m, None, sim.InitialCondition(tuple(g.phis[0].components), 0.0), 0.5, dt=0.05, loop=loop)
    col = loop.offsets[loop.groups.index(g)]
    assert np.allclose(tr.states[:, col], np.exp(g.lam * tr.t), rtol=1e-10, atol=1e-300)
    assert tr.discarded < 1e-20


@pytest.mark.parametrize("N", [1, 3, 4])
def test_block_exponential(N):
    rng = np.random.default_rng(N)
    M = -2.0 * np.eye(N) + np.triu(rng.normal(size=(N, N)), 1)
    for tau in (0.0, 0.01, 0.7):
        assert np.allclose(sim.block_exponential(M, tau), expm(M * tau), rtol=1e-10, atol=1e-14)


def test_reconstruction_round_trip_and_boundary_law():
    m = open_model()
    loop = sim.ClosedLoop(m, None, K=16)
    rng = np.random.default_rng(0)
    coeffs = rng.normal(size=loop.Dp) / (1.0 + np.arange(loop.Dp)) ** 2
    u = 0.7
    grid = np.linspace(0, 1, 201)
    prof = sim.reconstruct(loop.basis, coeffs, u, grid)
    back, _ = sim.project_initial(loop.basis, sim.InitialCondition(tuple(prof), u))
    assert np.allclose(back, coeffs, atol=1e-6)
    d = loop.basis.profile_matrix(np.array([0.0]), derivative=True)
    q = np.concatenate([coeffs, [u]])
    assert abs((d @ q)[-1, 0] - u) < 1e-6


def test_reconstruction_zero_pattern():
    m = open_model()
    loop = sim.ClosedLoop(m, None, K=8)
    Pm = loop.basis.profile_matrix(np.linspace(0, 1, 11))
    # chain 1 modes live on the first component only
    for g, o in zip(loop.groups, loop.offsets[:-1]):
        if g.chain == 1:
            assert np.all(Pm[1, :, o] == 0.0)


def test_linearity():
    res = certified("distinct-distributed")
    loop = closed_loop("distinct-distributed")
    ics = initial_conditions(res.controller.model)
    a, b = ics["mixed"], ics["input"]
    combo = sim.InitialCondition(tuple(2.0 * f for f in a.profiles), 2.0 * a.u0 - 3.0 * b.u0)
    t1 = sim.run(loop.model, res.controller, a, 2.0, dt=0.1, loop=loop)
    t2 = sim.run(loop.model, res.controller, b, 2.0, dt=0.1, loop=loop)
    t3 = sim.run(loop.model, res.controller, combo, 2.0, dt=0.1, loop=loop)
    assert np.allclose(t3.states, 2.0 * t1.states - 3.0 * t2.states, atol=1e-10 * np.abs(t1.states).max())


def test_split_method_matches_expm():
    s = make_cfg((1.0, 0.2), "distinct", ("dirichlet", 0.3))
    m = assemble(s, n={1: 6, 2: 6})
    ctrl = syn.design(m)
    ic = initial_conditions(m)["mixed"]
    loop = sim.ClosedLoop(m, ctrl, K=32)
    a = sim.run(m, ctrl, ic, 2.0, dt=0.05, loop=loop)
    b = sim.run(m, ctrl, ic, 2.0, dt=0.05, loop=loop, method="split")
    assert np.max(np.abs(a.states - b.states)) < 1e-6 * np.max(np.abs(a.states))


def test_observer_error_decays_faster_than_target():
    res = certified("distinct-distributed")
    loop = closed_loop("distinct-distributed")
    tr = sim.run(loop.model, res.controller, initial_conditions(loop.model)["mixed"], 20.0, loop=loop,
                 certificate=res.certificate)
    assert tr.rate_e1 >= 0.5
    assert tr.monotone_violation(0.5) <= 1e-6


def test_fit_rate():
    t = np.linspace(0, 10, 101)
    assert sim.fit_rate(t, 3.0 * np.exp(-0.8 * t)) == pytest.approx(0.8, rel=1e-12)
    assert sim.fit_rate(t, np.zeros_like(t)) == math.inf


def test_finite_difference_heat_decay():
    m = open_model(a=(0.0,), meas=("dirichlet", 0.3))
    ic = sim.InitialCondition((ScalarFn.cos(1),), 0.0)
    fd = sim.run_fd_oracle(m, None, ic, 0.2, dt=0.01)
    exact = np.exp(-math.pi ** 2 * fd.t) / math.sqrt(2)
    assert np.max(np.abs(fd.h0 / exact - 1.0)) < 5e-3


def test_finite_difference_agrees_with_modal_open_loop():
    m = open_model(a=(-1.0, -2.0))
    one = ScalarFn.constant(1.0)
    ic = sim.InitialCondition((one + ScalarFn.cos(1), 0.5 * (one + ScalarFn.cos(1))), 0.0)
    spec = sim.run(m, None, ic, 2.0, dt=0.02)
    fd = sim.run_fd_oracle(m, None, ic, 2.0, dt=0.02)
    cmp = sim.compare(spec, fd)
    assert cmp["z_sup_rel"] < 0.01 and max(cmp["h0_rel"].values()) < 0.01


def test_sampled_profiles_are_interpolated():
    ic = sim.InitialCondition((np.cos(np.pi * np.linspace(0, 1, 201)),), 0.0)
    f = ic.callables()[0]
    assert f(0.3) == pytest.approx(math.cos(0.3 * math.pi), abs=1e-6)
    with pytest.raises(ValueError):
        sim.InitialCondition((np.array([1.0]),)).callables()
