"""Gain design and the truncation-order certificate.

The closed loop of the finite-dimensional controller is written as

    X' = F X + Lc * sum_i zeta_i,   X = col(X1a_hat, E1, X2_hat, E2)

where ``zeta_i`` are the measurement residues of the modes the observer does
not see. Decay at rate ``delta`` is certified by ``Theta1 <= 0`` and
``Gamma_{i, n_i + 1} <= 0``; see :func:`certify`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize_scalar

from .modal import ModalModel, SynthesisRefusal, assemble, hautus_check

__all__ = [
    "SynthesisError",
    "COND_MAX",
    "KRON_MAX_DIM",
    "ORDER_CAP",
    "Controller",
    "Certificate",
    "SearchResult",
    "target_poles",
    "place_siso",
    "design_state_gain",
    "design_observer_gain",
    "solve_lyapunov",
    "closed_loop_F",
    "tail_sums",
    "mode_block_bounds",
    "design",
    "best_scale",
    "certify",
    "search_orders",
]

COND_MAX = 1e12
KRON_MAX_DIM = 40
ORDER_CAP = 512
THETA_TOL = 1e-10
TAIL_FACTOR = 10
# decay exponents p of the squared tail terms (term ~ k^-p)
TAIL_EXPONENT = {"alpha": 4.0, "beta": 4.0, "distributed": 2.0, "dirichlet": 2.0, "neumann": 1.5}


class SynthesisError(RuntimeError):
    """Gain design failed numerically."""


def abscissa(A: np.ndarray) -> float:
    if A.size == 0:
        return -math.inf
    return float(np.max(np.linalg.eigvals(A).real))


def target_poles(n: int, delta: float) -> np.ndarray:
    """Real targets ``-delta - 1 - j``, ``j = 0..n-1``.

    Unit spacing keeps the placed loops close to normal; tightly clustered
    targets inflate ``||P L||`` by orders of magnitude and with it the
    truncation order needed for the certificate.
    """
    return np.array([-delta - 1.0 - 1.0 * j for j in range(n)])


def place_siso(A: np.ndarray, b: np.ndarray, poles) -> np.ndarray:
    """Single-input pole placement through the controllable canonical form.

    Returns the row ``K`` with ``eig(A - b K) = poles``.
    """
    A = np.atleast_2d(np.asarray(A, float))
    b = np.asarray(b, float).reshape(-1)
    n = A.shape[0]
    if n == 0:
        return np.zeros(0)
    W = np.empty((n, n))
    W[:, 0] = b
    for j in range(1, n):
        W[:, j] = A @ W[:, j - 1]
    cond = np.linalg.cond(W)
    if not np.isfinite(cond) or cond > COND_MAX:
        raise SynthesisError(f"controllability matrix condition number {cond:.3e} exceeds {COND_MAX:.0e}; "
                             "use a smaller n0 or larger spectral gaps")
    c = np.poly(A)
    want = np.real(np.poly(np.asarray(poles)))
    # T = W H maps canonical coordinates (companion form, input on the last
    # state) to the original ones; H is the Hankel matrix of the open-loop
    # characteristic coefficients
    H = np.zeros((n, n))
    for i in range(n):
        for j in range(n - i):
            H[i, j] = c[n - 1 - i - j]
    T = W @ H
    Kc = np.array([want[n - j] - c[n - j] for j in range(n)])
    return np.real(np.linalg.solve(T.T, Kc))


def design_state_gain(A1a: np.ndarray, B1a: np.ndarray, delta: float) -> np.ndarray:
    """``K`` with ``eig(A1a - B1a K)`` on :func:`target_poles`."""
    n = A1a.shape[0]
    K = place_siso(A1a, B1a, target_poles(n, delta))
    ab = abscissa(A1a - np.outer(B1a, K))
    if not ab < -delta - 0.25:
        raise SynthesisError(f"state-feedback abscissa {ab:.4f} not below -delta - 0.25")
    return K


def design_observer_gain(A1: np.ndarray, C1: np.ndarray, delta: float) -> np.ndarray:
    """``L`` with ``eig(A1 - L C1)`` on :func:`target_poles` (by duality)."""
    n = A1.shape[0]
    if n == 0:
        return np.zeros(0)
    L = place_siso(A1.T, C1.reshape(-1), target_poles(n, delta))
    ab = abscissa(A1 - np.outer(L, C1.reshape(-1)))
    if not ab < -delta - 0.25:
        raise SynthesisError(f"observer abscissa {ab:.4f} not below -delta - 0.25")
    return L


def solve_lyapunov(F: np.ndarray, delta: float, Q: np.ndarray | None = None) -> np.ndarray:
    """``P`` with ``F^T P + P F + 2 delta P = -Q`` (``Q = I`` by default).

    Small problems are solved through the vectorised (Kronecker) system,
    larger ones with Bartels-Stewart.
    """
    F = np.atleast_2d(np.asarray(F, float))
    n = F.shape[0]
    Q = np.eye(n) if Q is None else np.asarray(Q, float)
    Fd = F + delta * np.eye(n)
    if abscissa(Fd) >= 0:
        raise SynthesisError("F + delta I is not Hurwitz")
    if n <= KRON_MAX_DIM:
        I = np.eye(n)
        big = np.kron(I, Fd.T) + np.kron(Fd.T, I)
        P = np.linalg.solve(big, -Q.reshape(-1, order="F")).reshape(n, n, order="F")
    else:
        P = sla.solve_continuous_lyapunov(Fd.T, -Q)
    P = 0.5 * (P + P.T)
    res = np.linalg.norm(Fd.T @ P + P @ Fd + Q)
    if res > 1e-8 * max(1.0, np.linalg.norm(Fd) * np.linalg.norm(P)):
        raise SynthesisError(f"Lyapunov residual {res:.3e} too large")
    return P


@dataclass
class Controller:
    """Gains ``K = [K_x k_u]`` and ``L`` for a modal model."""

    model: ModalModel
    K: np.ndarray
    L: np.ndarray

    @property
    def Kx(self) -> np.ndarray:
        return self.K[:-1]

    @property
    def ku(self) -> float:
        return float(self.K[-1])

    @property
    def kappa(self) -> float:
        return self.model.kappa

    def abscissae(self) -> tuple[float, float]:
        m = self.model
        a1 = abscissa(m.A1a - np.outer(m.B1a, self.K))
        a2 = abscissa(m.A1 - np.outer(self.L, m.C1.reshape(-1))) if m.n_low else -math.inf
        return a1, a2

    def with_model(self, model: ModalModel) -> "Controller":
        """Same gains on a model with different observer orders."""
        return Controller(model, self.K, self.L)


def closed_loop_F(ctrl: Controller) -> tuple[np.ndarray, np.ndarray, dict]:
    """``F``, ``Lc`` and the block slices of ``X``."""
    m = ctrl.model
    d1, d2 = m.n_low, m.n_ext
    da = d1 + 1
    K, L = ctrl.K, ctrl.L
    La = np.concatenate([L, [0.0]])
    C1, C2 = m.C1.reshape(1, -1), m.C2.reshape(1, -1)
    n = da + d1 + 2 * d2
    s = {"x1a": slice(0, da), "e1": slice(da, da + d1), "x2": slice(da + d1, da + d1 + d2),
         "e2": slice(da + d1 + d2, n)}
    F = np.zeros((n, n))
    F[s["x1a"], s["x1a"]] = m.A1a - np.outer(m.B1a, K)
    F[s["x1a"], s["e1"]] = np.outer(La, C1)
    F[s["x1a"], s["e2"]] = np.outer(La, C2)
    F[s["e1"], s["e1"]] = m.A1 - np.outer(L, C1)
    F[s["e1"], s["e2"]] = -np.outer(L, C2)
    B2u0 = np.zeros((d2, da))
    B2u0[:, -1] = m.B2u
    F[s["x2"], s["x1a"]] = B2u0 - np.outer(m.B2v, K)
    F[s["x2"], s["x2"]] = m.A2
    F[s["e2"], s["e2"]] = m.A2
    Lc = np.zeros(n)
    Lc[s["x1a"]] = La
    Lc[s["e1"]] = -L
    return F, Lc, s


def _tail(values: np.ndarray, ks: np.ndarray, p: float, blocks: int = 8) -> tuple[float, float]:
    """Finite sum plus a bound on the remainder past ``ks[-1]``.

    The ``C k^-p`` envelope is fitted to block maxima over the upper half of
    the range (isolated zeros of oscillating coefficients would wreck a
    plain log-log fit). If the envelope decays slower than ``k^-p`` its own
    slope is used; slower than ``k^-1.05`` gives an infinite bound.
    """
    total = float(np.sum(values))
    K = float(ks[-1])
    half = ks >= ks[0] + 0.5 * (ks[-1] - ks[0])
    kk, vv = ks[half].astype(float), values[half]
    if not np.any(vv > 0):
        return total, 0.0
    env_k, env_v = [], []
    for part_k, part_v in zip(np.array_split(kk, min(blocks, kk.size)), np.array_split(vv, min(blocks, kk.size))):
        j = int(np.argmax(part_v))
        if part_v[j] > 0:
            env_k.append(part_k[j])
            env_v.append(part_v[j])
    env_k, env_v = np.array(env_k), np.array(env_v)
    p_eff = p
    if env_k.size >= 3:
        slope = -np.polyfit(np.log(env_k), np.log(env_v), 1)[0]
        if slope <= 1.05:
            return total, math.inf
        p_eff = min(p, slope)
    C = float(np.max(vv * kk ** p_eff))
    return total, C / ((p_eff - 1.0) * K ** (p_eff - 1.0))


def tail_sums(model: ModalModel, n: dict, k_tail: dict | None = None) -> dict:
    """``S_alpha``, ``S_beta``, ``S_zeta`` per channel (finite part plus bound)."""
    kind = model.cfg.measurement.kind
    out = {}
    for ch in model.channels:
        lo = n[ch] + 1
        hi = TAIL_FACTOR * (n[ch] + 1) if k_tail is None else k_tail[ch]
        groups = model.factory.groups(ch, lo, hi)
        ks = np.array([g.k for g in groups])
        a2 = np.array([float(g.alpha @ g.alpha) for g in groups])
        b2 = np.array([float(g.beta @ g.beta) for g in groups])
        c2 = np.array([float(g.c @ g.c) / (1.0 + g.k ** 2) ** model.kappa for g in groups])
        sa, ra = _tail(a2, ks, TAIL_EXPONENT["alpha"])
        sb, rb = _tail(b2, ks, TAIL_EXPONENT["beta"])
        sz, rz = _tail(c2, ks, TAIL_EXPONENT[kind])
        out[ch] = {"S_alpha": sa + ra, "S_beta": sb + rb, "S_zeta": sz + rz,
                   "remainder": (ra, rb, rz), "k_tail": hi}
    return out


def mode_block_bounds(model: ModalModel, k_lo: int, k_hi: int, inflate: float = 0.1) -> dict:
    """``gamma_m``, ``gamma_M`` from the mode-block Lyapunov solutions ``P_k``.

    ``P_k`` solves ``M_k^T P + P M_k + 2 delta P = -|lambda_k| I``.
    """
    delta = model.cfg.delta
    lo, hi = math.inf, 0.0
    devs = []
    for g in model.factory.groups(1, k_lo, k_hi):
        Pk = solve_lyapunov(g.M, delta, abs(g.lam) * np.eye(g.dim))
        ev = np.linalg.eigvalsh(Pk)
        lo, hi = min(lo, ev[0]), max(hi, ev[-1])
        devs.append((g.k, float(np.linalg.norm(Pk - 0.5 * np.eye(g.dim), 2))))
    return {"gamma_m": lo / (1.0 + inflate), "gamma_M": hi * (1.0 + inflate), "deviation": devs}


@dataclass
class Certificate:
    passed: bool
    theta_max: float
    gammas: dict
    eta: dict
    epsilon: float
    sums: dict
    P: np.ndarray = field(repr=False, default=None)
    P_norm: float = 0.0
    gamma_m: float | None = None
    gamma_M: float | None = None
    orders: dict = field(default_factory=dict)
    scale: float = 1.0

    def summary(self) -> dict:
        return {"passed": self.passed, "theta_max": self.theta_max, "gammas": self.gammas,
                "eta": self.eta, "epsilon": self.epsilon, "P_norm": self.P_norm,
                "orders": self.orders, "gamma_m": self.gamma_m, "gamma_M": self.gamma_M,
                "scale": self.scale,
                "S": {ch: {k: v for k, v in d.items() if k.startswith("S_")} for ch, d in self.sums.items()}}


def design(model: ModalModel) -> Controller:
    """Hautus gate then both gains."""
    rep = hautus_check(model)
    if not rep.observable:
        raise SynthesisRefusal("output does not observe the low modes", rep.unobservable)
    if not rep.controllable:
        raise SynthesisRefusal("input does not control the low modes", rep.uncontrollable)
    K = design_state_gain(model.A1a, model.B1a, model.cfg.delta)
    L = design_observer_gain(model.A1, model.C1, model.cfg.delta)
    return Controller(model, K, L)


def _theta(P: np.ndarray, F: np.ndarray, Lc: np.ndarray, G: np.ndarray, delta: float, eta: list) -> np.ndarray:
    nX, nc = F.shape[0], len(eta)
    Theta = np.zeros((nX + nc, nX + nc))
    Theta[:nX, :nX] = F.T @ P + P @ F + 2.0 * delta * P + G
    PL = P @ Lc
    for j, e in enumerate(eta):
        Theta[:nX, nX + j] = PL
        Theta[nX + j, :nX] = PL
        Theta[nX + j, nX + j] = -e
    return 0.5 * (Theta + Theta.T)


def best_scale(G: np.ndarray, h: np.ndarray, sigma: float, basis: list) -> tuple[float, float]:
    """Scale ``s`` for ``P = s P0`` minimising the Schur-complement ratio.

    With ``P0`` solving the Lyapunov equation with right side ``-I``,
    ``Theta1 <= 0`` is equivalent to ``lambda_max(G / s + s sigma h h^T) <= 1``
    on the span of ``basis + [h]``; the left side is convex in ``s``.
    Returns ``(s, ratio)``.
    """
    Q, _ = np.linalg.qr(np.column_stack(basis + [h]))
    Gr = Q.T @ G @ Q
    hr = Q.T @ h

    def ratio(t):
        sc = math.exp(t)
        return float(np.linalg.eigvalsh(Gr / sc + sc * sigma * np.outer(hr, hr))[-1])

    res = minimize_scalar(ratio, bounds=(-60.0, 60.0), method="bounded", options={"xatol": 1e-10})
    return math.exp(res.x), float(res.fun)


def certify(ctrl: Controller, scale: str = "optimal") -> Certificate:
    """Evaluate ``Theta1`` and ``Gamma`` for the controller's observer orders.

    ``P`` is ``s P0`` where ``P0`` solves ``F^T P + P F + 2 delta P = -I``.
    ``scale="optimal"`` picks ``s`` by :func:`best_scale`; ``scale="unit"``
    keeps ``s = 1``.
    """
    m = ctrl.model
    cfg = m.cfg
    delta = cfg.delta
    F, Lc, s = closed_loop_F(ctrl)
    P0 = solve_lyapunov(F, delta)
    sums = tail_sums(m, m.n)
    chans = m.channels
    gm = gM = None
    if cfg.regime == "identical":
        k_hi = max(d["k_tail"] for d in sums.values())
        bounds = mode_block_bounds(m, m.n0[1] + 1, k_hi)
        gm, gM = bounds["gamma_m"], bounds["gamma_M"]
        eps = 2.0 * gM ** 2 / math.pi ** 2
        assert eps > gM ** 2 / math.pi ** 2
    else:
        eps = 2.0 / math.pi ** 2
        assert eps > 1.0 / math.pi ** 2
    nX = F.shape[0]
    Et = np.zeros(nX)
    Et[s["x1a"].stop - 1] = 1.0
    Kt = np.zeros(nX)
    Kt[s["x1a"]] = ctrl.K
    Sa = sum(sums[ch]["S_alpha"] for ch in chans)
    Sb = sum(sums[ch]["S_beta"] for ch in chans)
    G = eps * (Sa * np.outer(Et, Et) + Sb * np.outer(Kt, Kt))
    eta = {}
    for ch in chans:
        Sz = sums[ch]["S_zeta"]
        eta[ch] = 1.0 / math.sqrt(Sz) if Sz > 0 else float(m.n[ch])
    sigma = sum(1.0 / eta[ch] if eta[ch] > 0 else math.inf for ch in chans)
    if not math.isfinite(sigma):
        # a residue that cannot be bounded: nothing to certify
        return Certificate(False, math.inf, {ch: math.inf for ch in chans}, eta, eps, sums, P0,
                           float(np.linalg.norm(P0, 2)), gm, gM, dict(m.n), 1.0)
    if scale == "optimal":
        sc, _ = best_scale(G, P0 @ Lc, sigma, [Et, Kt])
    else:
        sc = 1.0
    P = sc * P0
    theta_max = float(np.linalg.eigvalsh(_theta(P, F, Lc, G, delta, [eta[ch] for ch in chans]))[-1])
    gammas = {}
    for ch in chans:
        k = m.n[ch] + 1
        lam = m.factory.lam(ch, k)
        w = 1.0 + k ** 2
        zeta_term = eta[ch] * sums[ch]["S_zeta"] * w ** (m.kappa - 1.0)
        if cfg.regime == "identical":
            gammas[ch] = 2.0 * (lam + gM ** 2 * w / eps) + zeta_term
        else:
            gammas[ch] = 2.0 * (lam + w / eps + delta) + zeta_term
    passed = theta_max <= THETA_TOL and all(g <= 0 for g in gammas.values())
    return Certificate(passed, theta_max, gammas, eta, eps, sums, P, float(np.linalg.norm(P, 2)),
                       gm, gM, dict(m.n), sc)


@dataclass
class SearchResult:
    passed: bool
    controller: Controller
    certificate: Certificate
    increment: int
    path: list
    monotone: bool | None


def search_orders(model: ModalModel, ctrl: Controller | None = None, cap: int = ORDER_CAP) -> SearchResult:
    """Least uniform increment ``d`` with ``n_i = n0_i + d`` that certifies.

    Doubling from ``d = 1`` then bisection. The gains are designed once on
    the low modes and do not depend on ``d``.
    """
    cfg = model.cfg
    ctrl = ctrl or design(model)
    path = []
    cache = {}

    def attempt(d):
        if d in cache:
            return cache[d]
        n = {ch: model.n0[ch] + d for ch in model.channels}
        mm = assemble(cfg, model.n0, n, factory=model.factory)
        c = ctrl.with_model(mm)
        cert = certify(c)
        path.append({"d": d, "orders": dict(n), "passed": cert.passed, "theta_max": cert.theta_max,
                     "gammas": dict(cert.gammas)})
        cache[d] = (c, cert)
        return cache[d]

    d_cap = cap - max(model.n0.values())
    if d_cap < 1:
        raise SynthesisError("order cap below n0 + 1")
    d, last_fail = 1, 0
    while True:
        c, cert = attempt(d)
        if cert.passed:
            break
        last_fail = d
        if d >= d_cap:
            return SearchResult(False, c, cert, d, path, None)
        d = min(2 * d, d_cap)
    lo, hi = last_fail, d
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if attempt(mid)[1].passed:
            hi = mid
        else:
            lo = mid
    c, cert = attempt(hi)
    monotone = None
    if hi + 1 <= d_cap:
        monotone = attempt(hi + 1)[1].passed
    return SearchResult(True, c, cert, hi, path, monotone)
