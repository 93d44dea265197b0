"""Eigenvectors and adjoint eigenvectors when the spectra are pairwise disjoint.

Each eigenvalue ``lambda_{i,k} = a_i - k^2 pi^2`` is simple. The eigenvector
has the cosine mode on component ``i`` and cascaded ``cosh`` profiles on
the components it feeds; the adjoint eigenvector mirrors that structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .funcalg import BasisVector, HyperAtom, ScalarFn, gram_matrix, r_sinh_r

__all__ = [
    "GAP_TOL",
    "K_CHECK",
    "ConfigError",
    "Measurement",
    "CascadeConfig",
    "mu",
    "eigenvalue",
    "sqrt_branch",
    "spectral_gap",
    "build_phi",
    "build_psi",
    "verify_riesz_frame",
    "psi_trace_at_zero",
    "FrameReport",
]

GAP_TOL = 1e-6
K_CHECK = 200


class ConfigError(ValueError):
    """The cascade configuration violates a standing assumption."""


@dataclass(frozen=True)
class Measurement:
    """Output taken on ``y^1``.

    ``kind`` is ``"distributed"`` (weight ``c``), ``"dirichlet"`` or
    ``"neumann"`` (point ``xi``).
    """

    kind: str
    c: ScalarFn | None = None
    xi: float | None = None

    def __post_init__(self):
        if self.kind not in ("distributed", "dirichlet", "neumann"):
            raise ConfigError(f"unknown measurement kind {self.kind!r}")
        if self.kind == "distributed" and self.c is None:
            raise ConfigError("distributed measurement needs a weight function c")
        if self.kind != "distributed":
            if self.xi is None or not 0.0 <= self.xi <= 1.0:
                raise ConfigError("pointwise measurement needs xi in [0, 1]")


def mu(k: int) -> float:
    return 1.0 if k == 0 else math.sqrt(2.0)


def spectral_gap(a: Sequence[float], k_check: int = K_CHECK) -> float:
    """``min |(a_i - a_j) - (k^2 - k'^2) pi^2|`` over ``i != j``, ``k, k' <= k_check``."""
    a = list(a)
    if len(a) < 2:
        return math.inf
    sq = (np.arange(k_check + 1) * math.pi) ** 2
    diff = (sq[:, None] - sq[None, :]).ravel()
    best = math.inf
    for i in range(len(a)):
        for j in range(i + 1, len(a)):
            best = min(best, float(np.min(np.abs((a[i] - a[j]) - diff))))
    return best


@dataclass(frozen=True)
class CascadeConfig:
    """Cascade parameters: reaction coefficients, regime, decay target, output."""

    a: tuple
    regime: str
    delta: float
    measurement: Measurement
    gap_tol: float = GAP_TOL
    k_check: int = K_CHECK

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(float(v) for v in self.a))
        if len(self.a) < 1:
            raise ConfigError("need at least one equation")
        if self.delta <= 0:
            raise ConfigError("decay rate delta must be positive")
        if self.regime == "distinct":
            gap = spectral_gap(self.a, self.k_check)
            if gap < self.gap_tol:
                raise ConfigError(f"spectra not disjoint (min gap {gap:.3e} < {self.gap_tol:.1e}); "
                                  "perturb the reaction coefficients")
        elif self.regime == "identical":
            if max(self.a) != min(self.a):
                raise ConfigError("identical regime requires all a_j equal")
        else:
            raise ConfigError(f"unknown regime {self.regime!r}")
        # the neumann conditions a_1 < 0 and delta < -a_1 are enforced by the
        # observability gate in ``modal`` so they surface as synthesis refusals

    @property
    def N(self) -> int:
        return len(self.a)


def eigenvalue(cfg: CascadeConfig, i: int, k: int) -> float:
    if not 1 <= i <= cfg.N:
        raise ValueError("chain index out of range")
    return cfg.a[i - 1] - (k * math.pi) ** 2


def sqrt_branch(lam: float, a_j: float, gap_tol: float = GAP_TOL) -> tuple[float, bool]:
    """Principal ``rho = sqrt|lam - a_j|`` and whether the root is imaginary."""
    d = lam - a_j
    if abs(d) < gap_tol:
        raise ConfigError(f"spectra not disjoint: |lambda - a_j| = {abs(d):.3e}")
    return math.sqrt(abs(d)), d < 0


def _rsr(cfg, lam, j):
    sqrt_branch(lam, cfg.a[j - 1], cfg.gap_tol)
    return r_sinh_r(lam - cfg.a[j - 1])


def build_phi(cfg: CascadeConfig, i: int, k: int, root_sign: float = 1.0) -> BasisVector:
    """Eigenvector ``phi_{i,k}``.

    ``root_sign`` selects the square root used for every ``r``; it only
    exists so the branch invariance can be exercised.
    """
    lam = eigenvalue(cfg, i, k)
    m = mu(k)
    comps = []
    for j in range(1, cfg.N + 1):
        if j < i:
            denom = 1.0
            for jp in range(j, i):
                denom *= _rsr(cfg, lam, jp)
            amp = (-1) ** (k + i - j) * m / denom
            comps.append(ScalarFn((HyperAtom.from_square(amp, lam - cfg.a[j - 1], reflected=True,
                                                         root_sign=root_sign),)))
        elif j == i:
            comps.append(ScalarFn.cos(k, m))
        else:
            comps.append(ScalarFn.zero())
    return BasisVector(tuple(comps), (i, k), "phi", m)


def build_psi(cfg: CascadeConfig, i: int, k: int, root_sign: float = 1.0) -> BasisVector:
    """Adjoint eigenvector ``psi_{i,k}``; biorthogonal to the ``phi`` family."""
    lam = eigenvalue(cfg, i, k)
    m = mu(k)
    comps = []
    for j in range(1, cfg.N + 1):
        if j < i:
            comps.append(ScalarFn.zero())
        elif j == i:
            comps.append(ScalarFn.cos(k, m))
        else:
            denom = 1.0
            for jp in range(i + 1, j + 1):
                denom *= _rsr(cfg, lam, jp)
            amp = (-1) ** (j - i) * m / denom
            comps.append(ScalarFn((HyperAtom.from_square(amp, lam - cfg.a[j - 1], reflected=False,
                                                         root_sign=root_sign),)))
    return BasisVector(tuple(comps), (i, k), "psi", m)


def psi_trace_at_zero(cfg: CascadeConfig, i: int, k: int) -> float:
    """``psi_{i,k}^N(0)`` from the closed-form amplitude."""
    lam = eigenvalue(cfg, i, k)
    if i == cfg.N:
        return mu(k)
    denom = 1.0
    for jp in range(i + 1, cfg.N + 1):
        denom *= _rsr(cfg, lam, jp)
    return (-1) ** (cfg.N - i) * mu(k) / denom


@dataclass
class FrameReport:
    K_max: int
    gram_eigs: tuple
    biorth_residual: float
    h1_gram_eigs: tuple
    modes: list = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.gram_eigs[1] / self.gram_eigs[0]

    @property
    def h1_ratio(self) -> float:
        return self.h1_gram_eigs[1] / self.h1_gram_eigs[0]


def verify_riesz_frame(cfg: CascadeConfig, K_max: int, phis=None, psis=None) -> FrameReport:
    """Gram-matrix frame bounds and biorthogonality residual up to ``K_max``.

    ``phis``/``psis`` may be given to reuse bases from either regime.
    """
    modes = [(i, k) for i in range(1, cfg.N + 1) for k in range(K_max + 1)]
    if phis is None:
        phis = [build_phi(cfg, i, k) for i, k in modes]
    if psis is None:
        psis = [build_psi(cfg, i, k) for i, k in modes]
    G = gram_matrix(phis, phis)
    B = gram_matrix(phis, psis)
    resid = float(np.max(np.abs(B - np.eye(len(modes)))))
    eg = np.linalg.eigvalsh(0.5 * (G + G.T))
    scaled = [p.scaled(1.0 / math.sqrt(1.0 + (p.mode[1] * math.pi) ** 2)) for p in phis]
    H = gram_matrix(scaled, scaled, h1=True)
    eh = np.linalg.eigvalsh(0.5 * (H + H.T))
    return FrameReport(K_max, (float(eg[0]), float(eg[-1])), resid, (float(eh[0]), float(eh[-1])), modes)
