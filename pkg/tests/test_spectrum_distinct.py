import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatcascade.funcalg import ScalarFn, gram_matrix
from heatcascade.spectrum_distinct import (CascadeConfig, ConfigError, Measurement, build_phi, build_psi,
                                           eigenvalue, psi_trace_at_zero, spectral_gap, sqrt_branch,
                                           verify_riesz_frame)

X = np.linspace(0, 1, 101)
MEAS = Measurement("dirichlet", xi=0.3)


def cfg(a, **kw):
    return CascadeConfig(tuple(a), "distinct", 0.5, MEAS, **kw)


def residuals(vec, lam, a, adjoint=False):
    """Interior and boundary residuals of the (adjoint) eigenproblem."""
    N = len(a)
    comps = vec.components
    out = []
    for j in range(N):
        f = comps[j]
        d1, d2 = f.derivative(), f.derivative().derivative()
        out.append(np.max(np.abs(d2(X) + a[j] * f(X) - lam * f(X))))
        if not adjoint:
            # y^j_x(1) = 0, y^j_x(0) = y^{j+1}(1), y^N_x(0) = 0
            out.append(abs(d1(1.0)))
            nxt = comps[j + 1](1.0) if j + 1 < N else 0.0
            out.append(abs(d1(0.0) - nxt))
        else:
            # psi^j_x(0) = 0, psi^j_x(1) = -psi^{j-1}(0), psi^1_x(1) = 0
            out.append(abs(d1(0.0)))
            prv = comps[j - 1](0.0) if j > 0 else 0.0
            out.append(abs(d1(1.0) + prv))
    return max(out)


def test_eigenvalue_examples():
    c = cfg((1.0, 0.3, -0.7))
    assert eigenvalue(c, 1, 0) == 1.0
    assert eigenvalue(c, 3, 2) == pytest.approx(-0.7 - 4 * math.pi ** 2)
    with pytest.raises(ValueError):
        eigenvalue(c, 4, 0)


def test_sqrt_branch():
    assert sqrt_branch(5.0, 1.0) == (2.0, False)
    assert sqrt_branch(-3.0, 1.0) == (2.0, True)
    with pytest.raises(ConfigError):
        sqrt_branch(1.0 + 1e-9, 1.0)


def test_equal_coefficients_are_rejected():
    with pytest.raises(ConfigError, match="not disjoint"):
        cfg((0.5, 0.5))
    # a_1 - a_2 = pi^2 puts k = 1 of chain 1 on top of k = 0 of chain 2
    with pytest.raises(ConfigError):
        cfg((math.pi ** 2, 0.0))
    assert spectral_gap([1.0]) == math.inf


@pytest.mark.parametrize("a", [(1.0, 0.2), (1.0, 0.3, -0.7), (-1.0, 0.2, 2.5, 0.1)])
def test_eigenfunctions_satisfy_the_boundary_value_problem(a):
    c = cfg(a)
    for i in range(1, c.N + 1):
        for k in (0, 1, 2, 5):
            lam = eigenvalue(c, i, k)
            scale = 1 + abs(lam)
            assert residuals(build_phi(c, i, k), lam, a) < 1e-9 * scale
            assert residuals(build_psi(c, i, k), lam, a, adjoint=True) < 1e-9 * scale


def test_zero_pattern():
    c = cfg((1.0, 0.3, -0.7))
    phi, psi = build_phi(c, 2, 3), build_psi(c, 2, 3)
    assert phi.components[2].is_zero() and not phi.components[0].is_zero()
    assert psi.components[0].is_zero() and not psi.components[2].is_zero()


def test_psi_trace_matches_evaluation():
    c = cfg((1.0, 0.3, -0.7))
    for i in (1, 2, 3):
        for k in (0, 1, 4):
            assert psi_trace_at_zero(c, i, k) == pytest.approx(build_psi(c, i, k).components[-1](0.0), rel=1e-12)


def test_biorthogonality():
    c = cfg((1.0, 0.3, -0.7))
    modes = [(i, k) for i in (1, 2, 3) for k in range(6)]
    B = gram_matrix([build_phi(c, *m) for m in modes], [build_psi(c, *m) for m in modes])
    assert np.max(np.abs(B - np.eye(len(modes)))) < 1e-10


def test_single_equation_basis_is_orthonormal():
    rep = verify_riesz_frame(cfg((0.4,)), 8)
    assert rep.gram_eigs == pytest.approx((1.0, 1.0), abs=1e-12)
    assert rep.biorth_residual < 1e-12


def test_root_choice_does_not_matter():
    c = cfg((1.0, 0.3, -0.7))
    for i, k in ((3, 0), (3, 2), (2, 1)):
        a, b = build_phi(c, i, k), build_phi(c, i, k, root_sign=-1.0)
        for fa, fb in zip(a.components, b.components):
            assert np.allclose(fa(X), fb(X), atol=1e-14)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=3, unique=True))
def test_random_cascades_are_biorthogonal(a):
    try:
        c = cfg(a)
    except ConfigError:
        return
    rep = verify_riesz_frame(c, 3)
    assert rep.biorth_residual < 1e-8
    assert rep.gram_eigs[0] > 0
