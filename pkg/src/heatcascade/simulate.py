"""Closed-loop time integration, reconstruction, norms and a finite-difference oracle.

The spectral simulator keeps every modal coordinate up to ``K_sim`` per
chain together with ``u`` and the observer state. Two integrators share
that state layout:

* ``"expm"`` (default) propagates the linear closed loop exactly between
  samples with one matrix exponential;
* ``"split"`` advances the finite block by classical RK4 and the residual
  modes by exact exponentials with a linear hold on ``(u, v)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import CubicSpline
from scipy.special import exprel

from .funcalg import ScalarFn, composite_nodes
from .modal import ModalModel
from .synthesis import Certificate, Controller, solve_lyapunov

__all__ = [
    "K_SIM_MIN",
    "IntegrationError",
    "InitialCondition",
    "ModalBasis",
    "ClosedLoop",
    "Trajectory",
    "FDTrajectory",
    "k_sim",
    "project_initial",
    "reconstruct",
    "fit_rate",
    "run",
    "run_fd_oracle",
    "compare",
    "block_exponential",
]

K_SIM_MIN = 32
DISCARD_WARN = 1e-4
FIT_START = 0.25
STEP_RTOL = 1e-8
FD_GRID_START = 201
FD_GRID_MAX = 1601
FD_GRID_RTOL = 0.01
QUAD_ORDER = 12


class IntegrationError(RuntimeError):
    """Time integration produced non-finite values or could not meet tolerance."""


def k_sim(model: ModalModel) -> int:
    """Simulation truncation: ``max(2 (n_max + 1), 32)`` modes per chain."""
    return max(2 * (max(model.n.values()) + 1), K_SIM_MIN)


@dataclass
class InitialCondition:
    """Initial profiles (one per component) and initial input ``u0``.

    Each profile is a :class:`ScalarFn`, a plain callable, or an array of
    samples on a uniform grid over [0, 1].
    """

    profiles: tuple
    u0: float = 0.0

    def callables(self) -> list[Callable]:
        out = []
        for p in self.profiles:
            if isinstance(p, ScalarFn) or callable(p):
                out.append(p)
            else:
                arr = np.asarray(p, float)
                if arr.ndim != 1 or arr.size < 2:
                    raise ValueError("sampled profile must be a 1-D array with at least 2 samples")
                out.append(CubicSpline(np.linspace(0.0, 1.0, arr.size), arr))
        return out


class ModalBasis:
    """Basis values on a quadrature grid plus the lift column.

    Columns are the modal coordinates in group order followed by ``u``
    (whose profile is the lift on the last component).
    """

    def __init__(self, model: ModalModel, groups: list, order: int = QUAD_ORDER):
        self.model = model
        self.groups = groups
        self.N = model.cfg.N
        K = max(g.k for g in groups) if groups else 0
        self.x, self.w = composite_nodes(K + 16, order)
        phis = [p for g in groups for p in g.phis]
        self.n_modes = len(phis)
        lift = model.factory.lift.phi_lift
        self.values = []
        G0 = np.zeros((self.n_modes + 1, self.n_modes + 1))
        G1 = np.zeros_like(G0)
        for j in range(self.N):
            V = np.empty((self.x.size, self.n_modes + 1))
            D = np.empty_like(V)
            for col, p in enumerate(phis):
                f = p.components[j]
                V[:, col] = f(self.x)
                D[:, col] = f.derivative()(self.x)
            if j == self.N - 1:
                V[:, -1] = lift(self.x)
                D[:, -1] = lift.derivative()(self.x)
            else:
                V[:, -1] = 0.0
                D[:, -1] = 0.0
            WV = self.w[:, None] * V
            G0 += V.T @ WV
            G1 += D.T @ (self.w[:, None] * D)
            self.values.append(V)
        self.G0 = 0.5 * (G0 + G0.T)
        self.G1 = self.G0 + 0.5 * (G1 + G1.T)
        self._psis = [p for g in groups for p in g.psis]

    def norms(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``H0`` and ``H1`` norms for coefficient rows ``q = [x~, u]``."""
        q = np.atleast_2d(q)
        h0 = np.einsum("ti,ij,tj->t", q, self.G0, q)
        h1 = np.einsum("ti,ij,tj->t", q, self.G1, q)
        return np.sqrt(np.maximum(h0, 0.0)), np.sqrt(np.maximum(h1, 0.0))

    def profile_matrix(self, grid: np.ndarray, derivative: bool = False) -> np.ndarray:
        """``(N, len(grid), n_modes + 1)`` basis values on an arbitrary grid."""
        grid = np.asarray(grid, float)
        out = np.zeros((self.N, grid.size, self.n_modes + 1))
        phis = [p for g in self.groups for p in g.phis]
        lift = self.model.factory.lift.phi_lift
        for j in range(self.N):
            for col, p in enumerate(phis):
                f = p.components[j]
                out[j, :, col] = (f.derivative() if derivative else f)(grid)
            if j == self.N - 1:
                out[j, :, -1] = (lift.derivative() if derivative else lift)(grid)
        return out


def project_initial(basis: ModalBasis, ic: InitialCondition) -> tuple[np.ndarray, float]:
    """Coefficients ``x~ = <y~0, psi>`` for every basis mode.

    ``y~0`` subtracts the lift times ``u0`` from the last component. Returns
    the coefficients and the fraction of ``||y~0||^2`` the truncated series
    fails to reproduce; above 1e-4 a warning suggests a larger ``K_sim``.
    """
    fs = ic.callables()
    if len(fs) != basis.N:
        raise ValueError(f"expected {basis.N} initial profiles, got {len(fs)}")
    x, w = basis.x, basis.w
    lift = basis.model.factory.lift.phi_lift
    yt = [np.asarray(f(x), float) * np.ones_like(x) for f in fs]
    yt[-1] = yt[-1] - ic.u0 * lift(x)
    coeffs = np.zeros(basis.n_modes)
    for col, psi in enumerate(basis._psis):
        coeffs[col] = sum(float(np.dot(w * yt[j], psi.components[j](x)))
                          for j in range(basis.N) if not psi.components[j].is_zero())
    total = sum(float(np.dot(w, y * y)) for y in yt)
    resid = sum(float(np.dot(w, (yt[j] - basis.values[j][:, :-1] @ coeffs) ** 2)) for j in range(basis.N))
    frac = resid / total if total > 0 else 0.0
    if frac > DISCARD_WARN:
        warnings.warn(f"projection discards {frac:.2e} of the initial energy; increase K_sim",
                      RuntimeWarning, stacklevel=2)
    return coeffs, frac


def reconstruct(basis: ModalBasis, coeffs: np.ndarray, u: float, grid: np.ndarray) -> np.ndarray:
    """Profiles ``y^j`` on ``grid`` from modal coefficients and ``u``."""
    Pm = basis.profile_matrix(grid)
    q = np.concatenate([coeffs, [u]])
    return Pm @ q


def fit_rate(t: np.ndarray, y: np.ndarray, start: float = FIT_START) -> float:
    """Least-squares decay rate of ``log y`` over ``[start T, T]``."""
    t, y = np.asarray(t, float), np.asarray(y, float)
    mask = (t >= start * t[-1]) & (y > 0)
    if mask.sum() < 2:
        return math.inf
    slope = np.polyfit(t[mask], np.log(y[mask]), 1)[0]
    return float(-slope)


def block_exponential(M: np.ndarray, tau: float) -> np.ndarray:
    """``exp(M tau)`` for ``M = lam I + nilpotent`` in closed form."""
    d = M.shape[0]
    lam = M[0, 0]
    J = (M - lam * np.eye(d)) * tau
    out = np.eye(d)
    term = np.eye(d)
    for p in range(1, d):
        term = term @ J / p
        out = out + term
    return math.exp(lam * tau) * out


def _phi2(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, float)
    small = np.abs(z) < 1e-3
    safe = np.where(small, 1.0, z)
    big = (exprel(safe) - 1.0) / safe
    series = 0.5 + z / 6.0 + z * z / 24.0
    return np.where(small, series, big)


@dataclass
class Trajectory:
    t: np.ndarray
    u: np.ndarray
    v: np.ndarray
    z: np.ndarray
    h0: np.ndarray
    h1: np.ndarray
    V: np.ndarray | None
    composite: np.ndarray
    e1: np.ndarray
    grid: np.ndarray
    profiles: np.ndarray
    states: np.ndarray = field(repr=False)
    rate: float = math.nan
    rate_h1: float = math.nan
    rate_e1: float = math.nan
    discarded: float = 0.0
    k_sim: int = 0
    method: str = "expm"

    def weighted_V(self, delta: float) -> np.ndarray | None:
        return None if self.V is None else np.exp(2.0 * delta * self.t) * self.V

    def monotone_violation(self, delta: float) -> float:
        """Largest relative increase of ``exp(2 delta t) V`` between samples."""
        wv = self.weighted_V(delta)
        if wv is None:
            return math.nan
        inc = (wv[1:] - wv[:-1]) / np.maximum(wv[:-1], np.finfo(float).tiny)
        return float(max(0.0, inc.max())) if inc.size else 0.0


class ClosedLoop:
    """Linear closed loop over ``[x~ (all groups), u, x^1, x^2]``.

    ``ctrl=None`` runs the plant with zero gains (``u`` held at ``u0``).
    """

    def __init__(self, model: ModalModel, ctrl: Controller | None = None,
                 certificate: Certificate | None = None, K: int | None = None):
        self.model = model
        self.cfg = model.cfg
        self.K = k_sim(model) if K is None else int(K)
        d1, d2 = model.n_low, model.n_ext
        if ctrl is None:
            Kg, L = np.zeros(d1 + 1), np.zeros(d1)
        else:
            Kg, L = np.asarray(ctrl.K, float), np.asarray(ctrl.L, float)
        self.gains = (Kg, L)
        self.residual = model.residual_groups(self.K)
        self.groups = list(model.low) + list(model.ext) + self.residual
        self.offsets = np.cumsum([0] + [g.dim for g in self.groups])
        Dp = int(self.offsets[-1])
        self.Dp, self.d1, self.d2 = Dp, d1, d2
        self.iu = Dp
        self.s1 = slice(Dp + 1, Dp + 1 + d1)
        self.s2 = slice(Dp + 1 + d1, Dp + 1 + d1 + d2)
        D = Dp + 1 + d1 + d2
        self.D = D

        vrow = np.zeros(D)
        vrow[self.s1] = -Kg[:-1]
        vrow[self.iu] = -Kg[-1]
        crow = np.zeros(D)
        crow[self.iu] = model.c_lift
        G = np.zeros((D, D))
        for g, o in zip(self.groups, self.offsets[:-1]):
            sl = slice(o, o + g.dim)
            G[sl, sl] = g.M
            G[sl, self.iu] += g.alpha
            G[sl] += np.outer(g.beta, vrow)
            crow[sl] = g.c
        G[self.iu] = vrow
        zhat = np.zeros(D)
        zhat[self.s1] = model.C1.reshape(-1)
        zhat[self.s2] = model.C2_raw.reshape(-1)
        zhat[self.iu] = model.c_lift
        if d1:
            G[self.s1, self.s1] += model.A1
            G[self.s1, self.iu] += model.B1u
            G[self.s1] += np.outer(model.B1v, vrow)
            G[self.s1] -= np.outer(L, zhat - crow)
        if d2:
            G[self.s2, self.s2] += model.A2
            G[self.s2, self.iu] += model.B2u
            G[self.s2] += np.outer(model.B2v, vrow)
        self.G, self.vrow, self.crow = G, vrow, crow

        # X = col(X^1a, E1, X^2, E2) as a linear map of the state
        nX = 2 * d1 + 1 + 2 * d2
        T = np.zeros((nX, D))
        T[:d1, self.s1] = np.eye(d1)
        T[d1, self.iu] = 1.0
        T[d1 + 1:2 * d1 + 1, :d1] = np.eye(d1)
        T[d1 + 1:2 * d1 + 1, self.s1] = -np.eye(d1)
        r = 2 * d1 + 1
        T[r:r + d2, self.s2] = np.eye(d2)
        W = np.diag(model.x2_weight) if d2 else np.zeros((0, 0))
        T[r + d2:r + 2 * d2, d1:d1 + d2] = W
        T[r + d2:r + 2 * d2, self.s2] = -W
        self.TX = T

        self.P = None
        self.R = None
        if certificate is not None and certificate.P is not None:
            self.P = certificate.P
            R = np.zeros((Dp, Dp))
            lo = d1 + d2
            for g, o in zip(self.residual, self.offsets[len(model.low) + len(model.ext):-1]):
                w = 1.0 + g.k ** 2
                sl = slice(o, o + g.dim)
                if self.cfg.regime == "identical":
                    R[sl, sl] = w * solve_lyapunov(g.M, self.cfg.delta, abs(g.lam) * np.eye(g.dim))
                else:
                    R[sl, sl] = w * np.eye(g.dim)
            self.R = R[lo:, lo:]
            self._res_slice = slice(lo, Dp)
        self._basis = None

    @property
    def basis(self) -> ModalBasis:
        if self._basis is None:
            self._basis = ModalBasis(self.model, self.groups)
        return self._basis

    def initial_state(self, ic: InitialCondition) -> tuple[np.ndarray, float]:
        coeffs, frac = project_initial(self.basis, ic)
        s0 = np.zeros(self.D)
        s0[:self.Dp] = coeffs
        s0[self.iu] = ic.u0
        return s0, frac

    def lyapunov(self, S: np.ndarray) -> np.ndarray | None:
        if self.P is None:
            return None
        X = S @ self.TX.T
        r = S[:, self._res_slice]
        return np.einsum("ti,ij,tj->t", X, self.P, X) + np.einsum("ti,ij,tj->t", r, self.R, r)

    # --- split integrator -------------------------------------------------
    def _split_parts(self):
        if getattr(self, "_parts", None) is not None:
            return self._parts
        lo = self.d1 + self.d2
        fin = np.r_[np.arange(lo), np.arange(self.Dp, self.D)]
        res = np.arange(lo, self.Dp)
        G = self.G
        Gff = G[np.ix_(fin, fin)]
        Gfr = G[np.ix_(fin, res)]
        # residual inputs w = (u, v) from the finite state
        Wf = np.zeros((2, fin.size))
        Wf[0, np.searchsorted(fin, self.iu)] = 1.0
        Wf[1] = self.vrow[fin]
        groups = self.residual
        d = groups[0].dim if groups else 1
        Ms = np.array([g.M for g in groups]).reshape(-1, d, d)
        Bs = np.array([np.column_stack([g.alpha, g.beta]) for g in groups]).reshape(-1, d, 2)
        self._parts = (fin, res, Gff, Gfr, Wf, Ms, Bs, d)
        self._expcache = {}
        return self._parts

    def _residual_ops(self, tau: float):
        hit = self._expcache.get(tau)
        if hit is not None:
            return hit
        _, _, _, _, _, Ms, _, d = self._parts
        if d == 1:
            z = Ms[:, 0, 0] * tau
            E = np.exp(z)[:, None, None]
            P1 = (tau * exprel(z))[:, None, None]
            P2 = (tau * _phi2(z))[:, None, None]
        else:
            E = np.array([block_exponential(M, tau) for M in Ms])
            P1 = np.empty_like(E)
            P2 = np.empty_like(E)
            I = np.eye(d)
            for n, M in enumerate(Ms):
                big = np.zeros((3 * d, 3 * d))
                big[:d, :d] = M * tau
                big[:d, d:2 * d] = I * tau
                big[d:2 * d, 2 * d:] = I
                ex = sla.expm(big)
                P1[n] = ex[:d, d:2 * d]
                P2[n] = ex[:d, 2 * d:]
        self._expcache[tau] = (E, P1, P2)
        return E, P1, P2

    def _advance_residual(self, r0, w0, w1, tau):
        _, _, _, _, _, Ms, Bs, d = self._parts
        if r0.size == 0:
            return r0
        E, P1, P2 = self._residual_ops(tau)
        rr = r0.reshape(-1, d)
        b0 = Bs @ w0
        db = Bs @ (w1 - w0)
        out = np.einsum("nij,nj->ni", E, rr) + np.einsum("nij,nj->ni", P1, b0) + np.einsum("nij,nj->ni", P2, db)
        return out.reshape(-1)

    def step(self, state: np.ndarray, h: float) -> np.ndarray:
        """One split step of length ``h``: RK4 on the finite block, exact
        exponentials with a linear ``(u, v)`` hold on the residual modes.

        The finite block is an invertible linear image of ``X``, so RK4 on
        it is the same scheme as RK4 on ``X``.
        """
        fin, res, Gff, Gfr, Wf, _, _, _ = self._split_parts()
        sf, r0 = state[fin], state[res]
        w0 = Wf @ sf

        def f(s, r):
            return Gff @ s + Gfr @ r

        k1 = f(sf, r0)
        s2 = sf + 0.5 * h * k1
        k2 = f(s2, self._advance_residual(r0, w0, Wf @ s2, 0.5 * h))
        s3 = sf + 0.5 * h * k2
        k3 = f(s3, self._advance_residual(r0, w0, Wf @ s3, 0.5 * h))
        s4 = sf + h * k3
        k4 = f(s4, self._advance_residual(r0, w0, Wf @ s4, h))
        sf_new = sf + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        r_new = self._advance_residual(r0, w0, Wf @ sf_new, h)
        out = np.empty_like(state)
        out[fin] = sf_new
        out[res] = r_new
        return out

    def _integrate_split(self, s0: np.ndarray, times: np.ndarray) -> np.ndarray:
        out = np.empty((times.size, self.D))
        out[0] = s0
        s = s0.copy()
        h = times[1] - times[0] if times.size > 1 else 0.0
        for n in range(1, times.size):
            t, t_end = times[n - 1], times[n]
            while t < t_end - 1e-14 * max(1.0, abs(t_end)):
                h = min(h, t_end - t)
                while True:
                    big = self.step(s, h)
                    half = self.step(self.step(s, 0.5 * h), 0.5 * h)
                    scale = max(np.linalg.norm(half), np.finfo(float).tiny)
                    err = np.linalg.norm(big - half) / scale
                    if not np.isfinite(err):
                        raise IntegrationError("split step produced non-finite values")
                    if err <= STEP_RTOL:
                        break
                    h *= 0.5
                    if h < 1e-12:
                        raise IntegrationError("step size underflow in split integrator")
                s, t = half, t + h
                if err < STEP_RTOL / 64:
                    h *= 2.0
            out[n] = s
        return out

    def integrate(self, s0: np.ndarray, times: np.ndarray, method: str = "expm") -> np.ndarray:
        times = np.asarray(times, float)
        if method == "split":
            S = self._integrate_split(s0, times)
        elif method == "expm":
            S = np.empty((times.size, self.D))
            S[0] = s0
            steps = np.diff(times)
            if steps.size and np.allclose(steps, steps[0], rtol=1e-12, atol=0.0):
                Phi = sla.expm(self.G * steps[0])
                for n in range(1, times.size):
                    S[n] = Phi @ S[n - 1]
            else:
                for n in range(1, times.size):
                    S[n] = sla.expm(self.G * steps[n - 1]) @ S[n - 1]
        else:
            raise ValueError(f"unknown method {method!r}")
        if not np.all(np.isfinite(S)):
            raise IntegrationError("trajectory overflowed or produced NaN")
        return S


def run(model: ModalModel, ctrl: Controller | None, ic: InitialCondition, T: float,
        dt: float | None = None, certificate: Certificate | None = None,
        method: str = "expm", K: int | None = None, grid_points: int = 101,
        loop: ClosedLoop | None = None) -> Trajectory:
    """Simulate the closed loop on ``[0, T]`` sampled every ``dt``.

    ``V`` is evaluated with the certificate's ``P`` when one is supplied.
    The decay fit uses ``||y||_H0 + |u| + ||x^1|| + ||x^2||``.
    """
    if T <= 0:
        raise ValueError("horizon T must be positive")
    loop = loop or ClosedLoop(model, ctrl, certificate, K)
    dt = min(0.05, T / 200.0) if dt is None else dt
    n = max(int(round(T / dt)), 1)
    times = np.linspace(0.0, T, n + 1)
    s0, frac = loop.initial_state(ic)
    S = loop.integrate(s0, times, method)
    q = np.column_stack([S[:, :loop.Dp], S[:, loop.iu]])
    h0, h1 = loop.basis.norms(q)
    u = S[:, loop.iu]
    x1, x2 = S[:, loop.s1], S[:, loop.s2]
    comp = h0 + np.abs(u) + np.linalg.norm(x1, axis=1) + np.linalg.norm(x2, axis=1)
    e1 = np.linalg.norm(S[:, :loop.d1] - x1, axis=1)
    grid = np.linspace(0.0, 1.0, grid_points)
    Pm = loop.basis.profile_matrix(grid)
    profiles = np.einsum("jgm,tm->tjg", Pm, q)
    V = loop.lyapunov(S)
    return Trajectory(times, u, S @ loop.vrow, S @ loop.crow, h0, h1, V, comp, e1, grid, profiles, S,
                      fit_rate(times, comp), fit_rate(times, h1), fit_rate(times, e1) if loop.d1 else math.inf,
                      frac, loop.K, method)


# --- finite-difference oracle ---------------------------------------------

@dataclass
class FDTrajectory:
    t: np.ndarray
    u: np.ndarray
    z: np.ndarray
    h0: np.ndarray
    h1: np.ndarray
    grid: np.ndarray
    final: np.ndarray = field(repr=False)
    M: int = 0
    dt: float = 0.0
    refinements: list = field(default_factory=list)
    converged: bool = True
    rate: float = math.nan


def _fd_system(model: ModalModel, ctrl: Controller | None, M: int):
    cfg = model.cfg
    N = cfg.N
    dx = 1.0 / (M - 1)
    d1, d2 = model.n_low, model.n_ext
    ny = N * M
    iu = ny
    s1 = slice(ny + 1, ny + 1 + d1)
    s2 = slice(ny + 1 + d1, ny + 1 + d1 + d2)
    n = ny + 1 + d1 + d2
    if ctrl is None:
        Kg, L = np.zeros(d1 + 1), np.zeros(d1)
    else:
        Kg, L = np.asarray(ctrl.K, float), np.asarray(ctrl.L, float)

    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    inv = 1.0 / dx ** 2
    for j in range(N):
        base = j * M
        for m in range(M):
            r = base + m
            add(r, r, -2.0 * inv + cfg.a[j])
            if m == 0:
                add(r, r + 1, 2.0 * inv)
                g0 = (j + 1) * M + M - 1 if j < N - 1 else iu
                add(r, g0, -2.0 / dx)
            elif m == M - 1:
                add(r, r - 1, 2.0 * inv)
            else:
                add(r, r - 1, inv)
                add(r, r + 1, inv)

    x = np.linspace(0.0, 1.0, M)
    zrow = np.zeros(n)
    meas = cfg.measurement
    if meas.kind == "distributed":
        wts = np.full(M, dx)
        wts[[0, -1]] = 0.5 * dx
        zrow[:M] = wts * meas.c(x)
    else:
        m0 = min(int(meas.xi / dx), M - 2)
        th = (meas.xi - x[m0]) / dx
        if meas.kind == "dirichlet":
            zrow[m0] += 1.0 - th
            zrow[m0 + 1] += th
        else:
            # nodal centred derivatives, boundary values from the couplings
            g0 = M + M - 1 if N > 1 else iu
            for node, wt in ((m0, 1.0 - th), (m0 + 1, th)):
                if node == 0:
                    zrow[g0] += wt
                elif node == M - 1:
                    pass
                else:
                    zrow[node + 1] += wt / (2.0 * dx)
                    zrow[node - 1] -= wt / (2.0 * dx)

    vrow = np.zeros(n)
    vrow[s1] = -Kg[:-1]
    vrow[iu] = -Kg[-1]
    for c in np.nonzero(vrow)[0]:
        add(iu, c, vrow[c])
    zhat = np.zeros(n)
    zhat[s1] = model.C1.reshape(-1)
    zhat[s2] = model.C2_raw.reshape(-1)
    zhat[iu] = model.c_lift
    if d1:
        dense = np.zeros((d1, n))
        dense[:, s1] += model.A1
        dense[:, iu] += model.B1u
        dense += np.outer(model.B1v, vrow)
        dense -= np.outer(L, zhat - zrow)
        for a in range(d1):
            for c in np.nonzero(dense[a])[0]:
                add(ny + 1 + a, c, dense[a, c])
    if d2:
        dense = np.zeros((d2, n))
        dense[:, s2] += model.A2
        dense[:, iu] += model.B2u
        dense += np.outer(model.B2v, vrow)
        for a in range(d2):
            for c in np.nonzero(dense[a])[0]:
                add(ny + 1 + d1 + a, c, dense[a, c])
    A = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
    return A, zrow, x, iu


def _fd_norms(Y: np.ndarray, g0: np.ndarray, dx: float) -> tuple[float, float]:
    """Trapezoid ``H0`` / ``H1`` norms from nodal values ``Y`` (N x M)."""
    M = Y.shape[1]
    w = np.full(M, dx)
    w[[0, -1]] = 0.5 * dx
    dY = np.empty_like(Y)
    dY[:, 1:-1] = (Y[:, 2:] - Y[:, :-2]) / (2.0 * dx)
    dY[:, 0] = g0
    dY[:, -1] = 0.0
    h0 = float(np.sum(Y * Y * w))
    return math.sqrt(h0), math.sqrt(h0 + float(np.sum(dY * dY * w)))


def _fd_single(model, ctrl, ic, T, times, M, substeps):
    N = model.cfg.N
    A, zrow, x, iu = _fd_system(model, ctrl, M)
    dx = 1.0 / (M - 1)
    n = A.shape[0]
    w = np.zeros(n)
    for j, f in enumerate(ic.callables()):
        w[j * M:(j + 1) * M] = np.asarray(f(x), float) * np.ones_like(x)
    w[iu] = ic.u0
    dt = (times[1] - times[0]) / substeps
    I = sp.identity(n, format="csc")
    lhs = spla.splu((I - 0.5 * dt * A).tocsc())
    rhs = (I + 0.5 * dt * A).tocsr()
    # Rannacher start: implicit Euler half steps share the CN left-hand side
    be_left = 4
    out_u, out_z, out_h0, out_h1 = [], [], [], []

    def record(state):
        Y = state[:N * M].reshape(N, M)
        g0 = np.array([Y[j + 1, -1] if j < N - 1 else state[iu] for j in range(N)])
        h0, h1 = _fd_norms(Y, g0, dx)
        out_u.append(state[iu])
        out_z.append(float(zrow @ state))
        out_h0.append(h0)
        out_h1.append(h1)

    record(w)
    for _ in range(1, times.size):
        for _ in range(substeps):
            if be_left:
                w = lhs.solve(w)
                w = lhs.solve(w)
                be_left -= 2
            else:
                w = lhs.solve(rhs @ w)
        if not np.all(np.isfinite(w)):
            raise IntegrationError("finite-difference run produced non-finite values")
        record(w)
    return FDTrajectory(times, np.array(out_u), np.array(out_z), np.array(out_h0), np.array(out_h1),
                        x, w, M, dt)


def run_fd_oracle(model: ModalModel, ctrl: Controller | None, ic: InitialCondition, T: float,
                  dt: float | None = None, substeps: int = 10, M: int | None = None,
                  grid_check: bool = True) -> FDTrajectory:
    """Method-of-lines cross-check with ghost-point couplings and Crank-Nicolson.

    The grid is refined (``M -> 2M - 1``) until halving ``dx`` changes the
    final ``H0`` norm by at most 1%, up to ``M = 1601``. Four implicit Euler
    half steps start the run to damp incompatible initial data.
    """
    dt = min(0.05, T / 200.0) if dt is None else dt
    n = max(int(round(T / dt)), 1)
    times = np.linspace(0.0, T, n + 1)
    M = FD_GRID_START if M is None else M
    prev = _fd_single(model, ctrl, ic, T, times, M, substeps)
    if not grid_check:
        prev.rate = fit_rate(times, prev.h0 + np.abs(prev.u))
        return prev
    history = []
    while True:
        M2 = 2 * M - 1
        if M2 > FD_GRID_MAX:
            prev.converged = False
            break
        cur = _fd_single(model, ctrl, ic, T, times, M2, substeps)
        change = abs(cur.h0[-1] - prev.h0[-1]) / max(cur.h0[-1], np.finfo(float).tiny)
        history.append((M, M2, change))
        prev, M = cur, M2
        if change <= FD_GRID_RTOL:
            break
    prev.refinements = history
    prev.rate = fit_rate(times, prev.h0 + np.abs(prev.u))
    return prev


def compare(spec: Trajectory, fd: FDTrajectory, fractions: Sequence[float] = (0.1, 0.5, 1.0)) -> dict:
    """Sup-norm ``z`` discrepancy and ``H0`` discrepancies at fractions of ``T``."""
    if spec.t.size != fd.t.size or not np.allclose(spec.t, fd.t):
        raise ValueError("trajectories must share sample times")
    zscale = max(float(np.max(np.abs(fd.z))), np.finfo(float).tiny)
    z_err = float(np.max(np.abs(spec.z - fd.z))) / zscale
    T = spec.t[-1]
    h0 = {}
    for f in fractions:
        i = int(np.argmin(np.abs(spec.t - f * T)))
        h0[f] = abs(spec.h0[i] - fd.h0[i]) / max(fd.h0[i], np.finfo(float).tiny)
    return {"z_sup_rel": z_err, "h0_rel": h0}
