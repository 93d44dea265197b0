"""Generalized eigenstructure of a cascade of N identical heat equations.

Every eigenvalue ``lambda_k = a - k^2 pi^2`` has algebraic multiplicity N.
The Jordan chain is generated by the functions ``sigma_k^n`` and the dual
chain by ``tau_k^n``; both are poly-trig, so the recursions run entirely
in closed-form coefficient arithmetic.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from .funcalg import BasisVector, ScalarFn, inner_product

__all__ = [
    "SigmaChain",
    "TauChain",
    "ModeBlock",
    "mu",
    "build_sigma_chain",
    "build_tau_chain",
    "build_generalized_phi",
    "build_generalized_psi",
    "build_mode_block",
    "chains",
    "asymptotic_report",
    "ConsistencyError",
]


class ConsistencyError(RuntimeError):
    """Two independent computations of the same quantity disagree."""


def mu(k: int) -> float:
    return 1.0 if k == 0 else math.sqrt(2.0)


@dataclass(frozen=True)
class SigmaChain:
    k: int
    sigma: tuple  # sigma[n-1] is sigma_k^n
    nu: tuple  # nu[n-1] is nu_k^n, n = 1..N-1


@dataclass(frozen=True)
class TauChain:
    k: int
    tau: tuple
    nu_tilde: tuple
    c: tuple  # c[n-1] is c_k^n; c_k^1 = 0 by convention (tau_k^1 carries no constant)


@dataclass(frozen=True)
class ModeBlock:
    k: int
    lam: float
    M: np.ndarray
    Nvec: np.ndarray


def _conv_ramp(g: ScalarFn) -> ScalarFn:
    """``x -> integral_0^x (x - s) g(s) ds``."""
    return g.antiderivative().antiderivative()


def _conv_sine(g: ScalarFn, k: int) -> ScalarFn:
    """``x -> integral_0^x sin(k pi (x - s)) g(s) ds`` for k >= 1."""
    c, s = ScalarFn.cos(k), ScalarFn.sin(k)
    return s * (c * g).antiderivative() - c * (s * g).antiderivative()


def _cos_moment(g: ScalarFn, k: int) -> float:
    return inner_product(ScalarFn.cos(k), g)


def build_sigma_chain(k: int, N: int) -> SigmaChain:
    """Primal chain ``sigma_k^1 .. sigma_k^N`` and ``nu_k^1 .. nu_k^{N-1}``."""
    if k < 0 or N < 1:
        raise ValueError("need k >= 0 and N >= 1")
    sigma = [ScalarFn.cos(k, mu(k))]
    nu: list[float] = []
    kp = k * math.pi
    for n in range(2, N + 1):
        gamma = float(sigma[n - 2](1.0))
        if k == 0:
            nu_new = -gamma - sum(nu[i - 1] * sigma[n - i - 1].integral() for i in range(1, n - 1))
        else:
            nu_new = -math.sqrt(2.0) * (
                gamma + sum(nu[i - 1] * _cos_moment(sigma[n - i - 1], k) for i in range(1, n - 1)))
        nu.append(nu_new)
        source = ScalarFn.zero()
        for i in range(1, n):
            source = source + nu[i - 1] * sigma[n - i - 1]
        if k == 0:
            f = ScalarFn.poly([0.0, gamma]) + _conv_ramp(source)
        else:
            f = ScalarFn.sin(k, gamma / kp) + (1.0 / kp) * _conv_sine(source, k)
        sigma.append(f)
    return SigmaChain(k, tuple(sigma), tuple(nu))


def build_tau_chain(k: int, N: int, sigma: SigmaChain) -> TauChain:
    """Dual chain with the constants fixed by biorthogonality."""
    if sigma.k != k or len(sigma.sigma) < N:
        raise ValueError("sigma chain does not match (k, N)")
    tau = [ScalarFn.cos(k, mu(k))]
    nu_t: list[float] = []
    consts = [0.0]
    kp = k * math.pi
    sg = sigma.sigma
    for n in range(2, N + 1):
        t0 = float(tau[n - 2](0.0))
        if k == 0:
            nu_new = -t0 - sum(nu_t[i - 1] * tau[n - i - 1].integral() for i in range(1, n - 1))
        else:
            nu_new = -math.sqrt(2.0) * (
                (-1) ** k * t0 + sum(nu_t[i - 1] * _cos_moment(tau[n - i - 1], k) for i in range(1, n - 1)))
        nu_t.append(nu_new)
        source = ScalarFn.zero()
        for i in range(1, n):
            source = source + nu_t[i - 1] * tau[n - i - 1]
        if k == 0:
            particular = _conv_ramp(source)
        else:
            particular = (1.0 / kp) * _conv_sine(source, k)
        c_n = -sum(inner_product(sg[n - i], tau[i - 1]) for i in range(1, n)) - inner_product(sg[0], particular)
        consts.append(c_n)
        tau.append(ScalarFn.cos(k, c_n * mu(k)) + particular)
    return TauChain(k, tuple(tau), tuple(nu_t), tuple(consts))


def build_generalized_phi(k: int, i: int, sigma: SigmaChain, N: int | None = None) -> BasisVector:
    """``phi_{i,k} = (sigma_k^i, ..., sigma_k^1, 0, ..., 0)``."""
    N = len(sigma.sigma) if N is None else N
    if not 1 <= i <= N:
        raise ValueError("chain index out of range")
    comps = [sigma.sigma[i - j] for j in range(1, i + 1)] + [ScalarFn.zero()] * (N - i)
    return BasisVector(tuple(comps), (i, k), "phi", mu(k))


def build_generalized_psi(k: int, i: int, tau: TauChain, N: int | None = None) -> BasisVector:
    """``psi_{i,k} = (0, ..., 0, tau_k^1, ..., tau_k^{N-i+1})``."""
    N = len(tau.tau) if N is None else N
    if not 1 <= i <= N:
        raise ValueError("chain index out of range")
    comps = [ScalarFn.zero()] * (i - 1) + [tau.tau[j] for j in range(N - i + 1)]
    return BasisVector(tuple(comps), (i, k), "psi", mu(k))


def jordan_matrix(lam: float, nu, N: int) -> np.ndarray:
    M = lam * np.eye(N)
    for d in range(1, N):
        M += nu[d - 1] * np.eye(N, k=d)
    return M


def build_mode_block(k: int, N: int, sigma: SigmaChain, tau: TauChain, a: float,
                     projected: tuple[np.ndarray, np.ndarray] | None = None,
                     tol: float = 1e-8) -> ModeBlock:
    """``M_k`` and ``N_k = -mu_k [c_k^N, ..., c_k^2, 1]``.

    When ``projected = (alpha_k, beta_k)`` is supplied the boundary-trace
    ``N_k`` is checked against ``alpha_k + M_k beta_k``.
    """
    lam = a - (k * math.pi) ** 2
    M = jordan_matrix(lam, sigma.nu, N)
    Nvec = -mu(k) * np.array([tau.c[n - 1] for n in range(N, 1, -1)] + [1.0])
    if projected is not None:
        alpha, beta = projected
        other = np.asarray(alpha) + M @ np.asarray(beta)
        err = float(np.max(np.abs(other - Nvec)))
        if err > tol * max(1.0, float(np.max(np.abs(Nvec)))):
            raise ConsistencyError(f"N_k mismatch at k={k}: {err:.3e}")
    return ModeBlock(k, lam, M, Nvec)


_CACHE: dict[tuple[int, int], tuple[SigmaChain, TauChain]] = {}
_LOCK = threading.Lock()


def chains(k: int, N: int) -> tuple[SigmaChain, TauChain]:
    """Memoized ``(sigma, tau)`` chains for ``(k, N)``."""
    key = (k, N)
    hit = _CACHE.get(key)
    if hit is not None:
        return hit
    sigma = build_sigma_chain(k, N)
    value = (sigma, build_tau_chain(k, N, sigma))
    with _LOCK:
        _CACHE[key] = value
    return value


def _slope(ks, vals) -> float:
    ks, vals = np.asarray(ks, float), np.asarray(vals, float)
    return float(np.polyfit(np.log(ks), np.log(vals), 1)[0])


def asymptotic_report(k_range, N: int) -> dict:
    """Sup-norm decay of the chains over ``k_range`` with log-log slopes."""
    ks = list(k_range)
    rows = []
    for k in ks:
        sg, ta = chains(k, N)
        rows.append({
            "k": k,
            "sigma_sup": [f.sup_norm() for f in sg.sigma],
            "tau_sup": [f.sup_norm() for f in ta.tau],
            "nu_abs": [abs(v) for v in sg.nu],
        })
    slopes = {"sigma": [], "tau": [], "nu": []}
    for n in range(N):
        slopes["sigma"].append(_slope(ks, [r["sigma_sup"][n] for r in rows]))
        slopes["tau"].append(_slope(ks, [r["tau_sup"][n] for r in rows]))
    for n in range(N - 1):
        slopes["nu"].append(_slope(ks, [r["nu_abs"][n] for r in rows]))
    checks = {
        "sigma_decay": all(s <= -0.9 for s in slopes["sigma"][1:]),
        "sigma1_bounded": max(r["sigma_sup"][0] for r in rows) <= math.sqrt(2.0) + 1e-12,
    }
    return {"rows": rows, "slopes": slopes, "checks": checks}
