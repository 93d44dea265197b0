"""Modal reduction: projections of the input and output onto the basis.

The lifted state ``y~^N = y^N - phi(x) u`` obeys homogeneous boundary
conditions, so each modal coordinate satisfies

    x~' = M x~ + alpha u + beta v,   u' = v,

where ``M`` is the scalar ``lambda_{i,k}`` (distinct spectra) or the Jordan
block ``M_k`` (identical equations). Modes are handled in *groups*: one
group per ``(i, k)`` for distinct spectra, one group of size N per ``k``
for identical equations. Everything downstream (assembly, synthesis,
simulation) works group-wise and is agnostic to the regime.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from . import spectrum_distinct as sd
from . import spectrum_identical as si
from .funcalg import BasisVector, ScalarFn, inner_product
from .spectrum_distinct import CascadeConfig, ConfigError, Measurement

__all__ = [
    "KAPPA",
    "HAUTUS_RTOL",
    "SynthesisRefusal",
    "LiftProfile",
    "ModeGroup",
    "ModeFactory",
    "HautusReport",
    "ModalModel",
    "project_control",
    "control_coefficient",
    "output_coefficient",
    "lift_output",
    "minimal_orders",
    "hautus_check",
    "assemble",
]

KAPPA = {"distributed": 0.0, "dirichlet": 1.0, "neumann": 1.75}
HAUTUS_RTOL = 1e-9


class SynthesisRefusal(RuntimeError):
    """The configuration cannot be stabilised with the requested output.

    ``offending`` lists ``((i, k), value)`` pairs of the failing modes.
    """

    def __init__(self, message, offending=()):
        super().__init__(message)
        self.offending = list(offending)


@dataclass(frozen=True)
class LiftProfile:
    """``phi(x) = -(1 - x)^2 / 2`` together with the source terms it creates."""

    a_N: float

    @property
    def phi_lift(self) -> ScalarFn:
        return ScalarFn.poly([-0.5, 1.0, -0.5])

    @property
    def alpha_fn(self) -> ScalarFn:
        # phi'' + a_N phi
        return ScalarFn.constant(-1.0) + self.a_N * self.phi_lift

    @property
    def beta_fn(self) -> ScalarFn:
        return -self.phi_lift

    def check(self, tol: float = 1e-14) -> None:
        f, d = self.phi_lift, self.phi_lift.derivative()
        for name, val, want in (("phi(1)", f(1.0), 0.0), ("phi'(1)", d(1.0), 0.0), ("phi'(0)", d(0.0), 1.0)):
            if abs(float(val) - want) > tol:
                raise AssertionError(f"lift profile violates {name} = {want}")


def project_control(psi: BasisVector, lift: LiftProfile) -> tuple[float, float]:
    """``(alpha, beta) = (<alpha_fn, psi^N>, <beta_fn, psi^N>)``."""
    last = psi.components[-1]
    if last.is_zero():
        return 0.0, 0.0
    return inner_product(lift.alpha_fn, last), inner_product(lift.beta_fn, last)


def output_coefficient(measurement: Measurement, phi: BasisVector) -> float:
    """Output weight of one basis vector: ``<c, phi^1>``, ``phi^1(xi)`` or ``(phi^1)'(xi)``."""
    first = phi.components[0]
    if first.is_zero():
        return 0.0
    if measurement.kind == "distributed":
        return inner_product(measurement.c, first)
    if measurement.kind == "dirichlet":
        return float(first(measurement.xi))
    return float(first.derivative()(measurement.xi))


def lift_output(cfg: CascadeConfig) -> float:
    """Direct feedthrough of ``u`` into the output.

    Only nonzero for a single equation, where the measured component is the
    lifted one: ``z = sum c x~ + c_lift u``.
    """
    if cfg.N > 1:
        return 0.0
    lift = LiftProfile(cfg.a[-1]).phi_lift
    return output_coefficient(cfg.measurement, BasisVector((lift,)))


def control_coefficient(cfg: CascadeConfig, i: int, k: int):
    """Boundary-trace control coefficient.

    Distinct spectra: ``m_{i,k} = -psi_{i,k}^N(0)``. Identical equations:
    the vector ``N_k`` (``i`` is ignored).
    """
    if cfg.regime == "distinct":
        return -sd.psi_trace_at_zero(cfg, i, k)
    sigma, tau = si.chains(k, cfg.N)
    return si.build_mode_block(k, cfg.N, sigma, tau, cfg.a[0]).Nvec


@dataclass(frozen=True)
class ModeGroup:
    """Coordinates sharing one dynamics block.

    ``chain`` is the residue channel (the chain index for distinct spectra,
    always 1 for identical equations); ``labels`` names the ``(i, k)`` of
    each coordinate.
    """

    chain: int
    k: int
    labels: tuple
    M: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    m: np.ndarray
    c: np.ndarray
    phis: tuple
    psis: tuple

    @property
    def dim(self) -> int:
        return len(self.labels)

    @property
    def lam(self) -> float:
        return float(self.M[0, 0])


class ModeFactory:
    """Lazily builds and caches :class:`ModeGroup` objects for one config."""

    def __init__(self, cfg: CascadeConfig):
        self.cfg = cfg
        self.lift = LiftProfile(cfg.a[-1])
        self._cache: dict[tuple[int, int], ModeGroup] = {}
        self._lock = threading.Lock()

    @property
    def channels(self) -> list[int]:
        return list(range(1, self.cfg.N + 1)) if self.cfg.regime == "distinct" else [1]

    def lam(self, chain: int, k: int) -> float:
        a = self.cfg.a[chain - 1] if self.cfg.regime == "distinct" else self.cfg.a[0]
        return a - (k * math.pi) ** 2

    def group(self, chain: int, k: int) -> ModeGroup:
        key = (chain, k)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        g = self._build(chain, k)
        with self._lock:
            self._cache[key] = g
        return g

    def groups(self, chain: int, k_lo: int, k_hi: int) -> list[ModeGroup]:
        """Groups for ``k_lo <= k <= k_hi``."""
        return [self.group(chain, k) for k in range(k_lo, k_hi + 1)]

    def _build(self, chain: int, k: int) -> ModeGroup:
        cfg = self.cfg
        if cfg.regime == "distinct":
            phi = sd.build_phi(cfg, chain, k)
            psi = sd.build_psi(cfg, chain, k)
            al, be = project_control(psi, self.lift)
            m = control_coefficient(cfg, chain, k)
            c = output_coefficient(cfg.measurement, phi)
            return ModeGroup(chain, k, ((chain, k),), np.array([[sd.eigenvalue(cfg, chain, k)]]),
                             np.array([al]), np.array([be]), np.array([m]), np.array([c]), (phi,), (psi,))
        N = cfg.N
        sigma, tau = si.chains(k, N)
        phis = tuple(si.build_generalized_phi(k, i, sigma, N) for i in range(1, N + 1))
        psis = tuple(si.build_generalized_psi(k, i, tau, N) for i in range(1, N + 1))
        proj = [project_control(p, self.lift) for p in psis]
        al = np.array([p[0] for p in proj])
        be = np.array([p[1] for p in proj])
        block = si.build_mode_block(k, N, sigma, tau, cfg.a[0], projected=(al, be))
        c = np.array([output_coefficient(cfg.measurement, p) for p in phis])
        labels = tuple((i, k) for i in range(1, N + 1))
        return ModeGroup(1, k, labels, block.M, al, be, block.Nvec, c, phis, psis)


def minimal_orders(cfg: CascadeConfig) -> dict[int, int]:
    """Least ``n0`` per channel with ``lambda(n0) < -delta``."""
    fac_a = list(cfg.a) if cfg.regime == "distinct" else [cfg.a[0]]
    out = {}
    for ch, a in enumerate(fac_a, start=1):
        n = 0
        while a - (n * math.pi) ** 2 >= -cfg.delta:
            n += 1
        out[ch] = n
    return out


@dataclass
class HautusReport:
    controllable: bool
    observable: bool
    uncontrollable: list = field(default_factory=list)
    unobservable: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.controllable and self.observable


def _nonzero_test(entries, rtol):
    """Split ``(label, value)`` pairs into failures and near-zero warnings."""
    scale = max((abs(v) for _, v in entries), default=0.0)
    cliff = rtol * (1.0 + scale)
    bad = [(lab, v) for lab, v in entries if abs(v) <= cliff]
    warn = [(lab, v) for lab, v in entries if cliff < abs(v) <= 1e3 * cliff]
    return bad, warn


def hautus_check(model: "ModalModel", rtol: float = HAUTUS_RTOL) -> HautusReport:
    """Mode-by-mode controllability and observability of the low-mode pair."""
    ctrl, obs = [], []
    for g in model.low:
        if model.cfg.regime == "distinct":
            ctrl.append((g.labels[0], float(g.m[0])))
            obs.append((g.labels[0], float(g.c[0])))
        else:
            ctrl.append(((model.cfg.N, g.k), float(g.m[-1])))
            obs.append(((1, g.k), float(g.c[0])))
    bad_c, warn_c = _nonzero_test(ctrl, rtol)
    bad_o, warn_o = _nonzero_test(obs, rtol)
    warnings = [f"near-zero control coefficient at {lab}: {v:.3e}" for lab, v in warn_c]
    warnings += [f"near-zero output coefficient at {lab}: {v:.3e}" for lab, v in warn_o]
    return HautusReport(not bad_c, not bad_o, bad_c, bad_o, warnings)


@dataclass
class ModalModel:
    """Truncated model: low modes ``X1``, observer extension ``X2``."""

    cfg: CascadeConfig
    factory: ModeFactory
    kappa: float
    n0: dict
    n: dict
    low: list
    ext: list
    c_lift: float
    A1: np.ndarray = None
    B1u: np.ndarray = None
    B1v: np.ndarray = None
    C1: np.ndarray = None
    A1a: np.ndarray = None
    B1a: np.ndarray = None
    A2: np.ndarray = None
    B2u: np.ndarray = None
    B2v: np.ndarray = None
    C2: np.ndarray = None
    C2_raw: np.ndarray = None
    x1_index: dict = field(default_factory=dict)
    x2_index: dict = field(default_factory=dict)
    x2_chain: np.ndarray = None
    x2_weight: np.ndarray = None

    @property
    def channels(self) -> list[int]:
        return self.factory.channels

    @property
    def n_low(self) -> int:
        return self.A1.shape[0]

    @property
    def n_ext(self) -> int:
        return self.A2.shape[0]

    def residual_groups(self, K: int) -> list[ModeGroup]:
        """Groups above the observer orders, up to frequency ``K``."""
        out = []
        for ch in self.channels:
            out.extend(self.factory.groups(ch, self.n[ch] + 1, K))
        return out


def _stack(groups, attr):
    if not groups:
        return np.zeros(0)
    return np.concatenate([getattr(g, attr) for g in groups])


def _blockdiag(groups):
    d = sum(g.dim for g in groups)
    out = np.zeros((d, d))
    r = 0
    for g in groups:
        out[r:r + g.dim, r:r + g.dim] = g.M
        r += g.dim
    return out


def assemble(cfg: CascadeConfig, n0: dict | None = None, n: dict | None = None,
             factory: ModeFactory | None = None) -> ModalModel:
    """Build the truncated matrices.

    ``n0`` defaults to the minimal admissible orders and may only be raised;
    ``n`` (observer orders) defaults to ``n0 + 1``. Both are dicts keyed by
    channel (chain index, or 1 for identical equations).
    """
    if cfg.regime == "identical" and cfg.measurement.kind == "neumann":
        raise SynthesisRefusal("a Neumann trace of y^1 cannot stabilise identical equations: "
                               "mode (1,0) is never observable", [((1, 0), 0.0)])
    factory = factory or ModeFactory(cfg)
    factory.lift.check()
    nmin = minimal_orders(cfg)
    chans = factory.channels
    n0 = dict(nmin) if n0 is None else {ch: int(n0[ch]) for ch in chans}
    for ch in chans:
        if n0[ch] < nmin[ch]:
            raise ConfigError(f"order n0={n0[ch]} on chain {ch} leaves lambda >= -delta; "
                              f"minimal admissible n0 is {nmin[ch]}")
    n = {ch: n0[ch] + 1 for ch in chans} if n is None else {ch: int(n[ch]) for ch in chans}
    for ch in chans:
        if n[ch] < n0[ch]:
            raise ConfigError(f"observer order n={n[ch]} below n0={n0[ch]} on chain {ch}")
    kappa = KAPPA[cfg.measurement.kind]
    low = [g for ch in chans for g in factory.groups(ch, 0, n0[ch] - 1)]
    ext = [g for ch in chans for g in factory.groups(ch, n0[ch], n[ch])]
    model = ModalModel(cfg, factory, kappa, n0, n, low, ext, lift_output(cfg))

    model.A1 = _blockdiag(low)
    model.B1u = _stack(low, "alpha")
    model.B1v = _stack(low, "beta")
    model.C1 = _stack(low, "c").reshape(1, -1)
    d1 = model.A1.shape[0]
    model.A1a = np.zeros((d1 + 1, d1 + 1))
    model.A1a[:d1, :d1] = model.A1
    model.A1a[:d1, d1] = model.B1u
    model.B1a = np.concatenate([model.B1v, [1.0]])

    model.A2 = _blockdiag(ext)
    model.B2u = _stack(ext, "alpha")
    model.B2v = _stack(ext, "beta")
    model.C2_raw = _stack(ext, "c").reshape(1, -1)
    model.x2_weight = np.concatenate([np.full(g.dim, (g.k + 1.0) ** kappa) for g in ext]) if ext else np.zeros(0)
    model.C2 = model.C2_raw / model.x2_weight if ext else model.C2_raw
    model.x2_chain = np.concatenate([np.full(g.dim, g.chain) for g in ext]) if ext else np.zeros(0, int)

    r = 0
    for g in low:
        for lab in g.labels:
            model.x1_index[lab] = r
            r += 1
    r = 0
    for g in ext:
        for lab in g.labels:
            model.x2_index[lab] = r
            r += 1
    return model
