"""Exact-coefficient algebra for scalar functions on [0, 1].

A :class:`ScalarFn` is a finite sum of atoms:

* :class:`PolyTrigAtom` -- ``P(x) cos(k pi x) + Q(x) sin(k pi x)`` with
  polynomial coefficient arrays stored in ascending order,
* :class:`HyperAtom` -- ``amplitude * cosh(rho * s)`` or ``sinh(rho * s)``
  with ``s = x`` or ``s = 1 - x``; with ``trig=True`` the hyperbolic
  functions become ``cos`` / ``sin`` (the square of the root was negative).

Products and antiderivatives of poly-trig atoms stay in the family and are
computed in closed form, as are integrals of a polynomial against a
hyperbolic atom. Remaining hyperbolic products use adaptive composite
Gauss-Legendre quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.polynomial import polynomial as npoly

__all__ = [
    "COEF_EPS",
    "QUAD_ORDER",
    "QUAD_RTOL",
    "QUAD_MAX_INTERVALS",
    "QuadratureError",
    "PolyTrigAtom",
    "HyperAtom",
    "ScalarFn",
    "BasisVector",
    "evaluate",
    "derivative",
    "inner_product",
    "vector_inner_product",
    "h1_inner_product",
    "gauss_legendre_integrate",
    "gram_matrix",
    "r_sinh_r",
]

COEF_EPS = 1e-14
QUAD_ORDER = 32
QUAD_RTOL = 1e-12
QUAD_MAX_INTERVALS = 2 ** 14
SERIES_CUTOFF = 1e-10


class QuadratureError(ArithmeticError):
    """Adaptive quadrature failed to reach the requested tolerance."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (achieved residual {residual:.3e})")
        self.residual = residual


def _trim(c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if c.ndim == 0:
        c = c.reshape(1)
    # trailing coefficients negligible against the largest one are dropped
    nz = np.nonzero(np.abs(c) > COEF_EPS * np.max(np.abs(c), initial=0.0))[0]
    if nz.size == 0:
        return np.zeros(0)
    return c[: nz[-1] + 1].copy()


def _padd(p, q) -> np.ndarray:
    if len(p) == 0:
        return np.asarray(q, dtype=float)
    if len(q) == 0:
        return np.asarray(p, dtype=float)
    return npoly.polyadd(p, q)


def _pmul(p, q) -> np.ndarray:
    if len(p) == 0 or len(q) == 0:
        return np.zeros(0)
    return npoly.polymul(p, q)


def _pval(p, x):
    if len(p) == 0:
        return np.zeros_like(np.asarray(x, dtype=float))
    return npoly.polyval(x, p)


def _pder(p) -> np.ndarray:
    if len(p) <= 1:
        return np.zeros(0)
    return npoly.polyder(p)


def _exp_antiderivative(p: np.ndarray, omega: float) -> np.ndarray:
    """Complex polynomial q with (q e^{i w x})' = p e^{i w x}, w != 0."""
    q = np.zeros(max(len(p), 1), dtype=complex)
    deriv = np.asarray(p, dtype=complex)
    iw = 1j * omega
    j = 0
    while deriv.size:
        q[: deriv.size] += ((-1) ** j) * deriv / iw ** (j + 1)
        deriv = npoly.polyder(deriv) if deriv.size > 1 else np.zeros(0, dtype=complex)
        j += 1
    return q


@dataclass(frozen=True, eq=False)
class PolyTrigAtom:
    """``poly_cos(x) cos(k pi x) + poly_sin(x) sin(k pi x)``."""

    poly_cos: np.ndarray
    poly_sin: np.ndarray
    k: int

    def __post_init__(self):
        if self.k < 0 or int(self.k) != self.k:
            raise ValueError("frequency index k must be a nonnegative integer")
        object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "poly_cos", _trim(self.poly_cos))
        sin_part = np.zeros(0) if self.k == 0 else _trim(self.poly_sin)
        object.__setattr__(self, "poly_sin", sin_part)

    @property
    def frequency(self) -> float:
        return self.k * math.pi

    def is_zero(self) -> bool:
        return self.poly_cos.size == 0 and self.poly_sin.size == 0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        w = self.frequency
        out = _pval(self.poly_cos, x) * np.cos(w * x)
        if self.poly_sin.size:
            out = out + _pval(self.poly_sin, x) * np.sin(w * x)
        return out

    def derivative(self) -> "PolyTrigAtom":
        w = self.frequency
        pc = _padd(_pder(self.poly_cos), w * np.asarray(self.poly_sin))
        ps = _padd(_pder(self.poly_sin), -w * np.asarray(self.poly_cos))
        return PolyTrigAtom(pc, ps, self.k)

    def antiderivative(self) -> tuple["PolyTrigAtom", float]:
        """Return ``(F, F(0))`` with ``F' = self``."""
        if self.k == 0:
            F = PolyTrigAtom(npoly.polyint(self.poly_cos) if self.poly_cos.size else [], [], 0)
            return F, 0.0
        n = max(self.poly_cos.size, self.poly_sin.size)
        p = np.zeros(n, dtype=complex)
        p[: self.poly_cos.size] += self.poly_cos
        p[: self.poly_sin.size] -= 1j * self.poly_sin
        q = _exp_antiderivative(p, self.frequency)
        F = PolyTrigAtom(q.real, -q.imag, self.k)
        return F, float(q.real[0])

    def integral(self) -> float:
        """Closed-form integral over [0, 1]."""
        F, f0 = self.antiderivative()
        # at x = 1 the trig factors are exact: cos(k pi) = (-1)^k, sin(k pi) = 0
        sign = -1.0 if self.k % 2 else 1.0
        return sign * float(np.sum(F.poly_cos)) - f0

    def scaled(self, c: float) -> "PolyTrigAtom":
        return PolyTrigAtom(c * self.poly_cos, c * self.poly_sin, self.k)

    def times_poly(self, p) -> "PolyTrigAtom":
        return PolyTrigAtom(_pmul(self.poly_cos, p), _pmul(self.poly_sin, p), self.k)

    def __mul__(self, other: "PolyTrigAtom") -> list["PolyTrigAtom"]:
        a, b = self.k, other.k
        P1, Q1, P2, Q2 = self.poly_cos, self.poly_sin, other.poly_cos, other.poly_sin
        d, s = abs(a - b), a + b
        sgn = 1.0 if a >= b else -1.0
        PP, QQ = _pmul(P1, P2), _pmul(Q1, Q2)
        PQ, QP = _pmul(P1, Q2), _pmul(Q1, P2)
        # cos a cos b, sin a sin b, cos a sin b, sin a cos b expanded at a-b and a+b
        diff = PolyTrigAtom(0.5 * _padd(PP, QQ), 0.5 * sgn * _padd(QP, -PQ), d)
        summ = PolyTrigAtom(0.5 * _padd(PP, -QQ), 0.5 * _padd(PQ, QP), s)
        return [diff, summ]


@dataclass(frozen=True)
class HyperAtom:
    """``amplitude * cosh(rho * s)`` (``odd=False``) or ``sinh`` (``odd=True``).

    ``s = 1 - x`` when ``reflected`` else ``s = x``. With ``trig`` set the
    atom is ``cos`` / ``sin`` instead. A negative ``rho`` is folded onto the
    principal branch, so both square roots give the same function.
    """

    amplitude: float
    rho: float
    reflected: bool = False
    odd: bool = False
    trig: bool = False

    def __post_init__(self):
        if self.rho < 0:
            object.__setattr__(self, "rho", -float(self.rho))
            if self.odd:
                object.__setattr__(self, "amplitude", -float(self.amplitude))
        object.__setattr__(self, "amplitude", float(self.amplitude))
        object.__setattr__(self, "rho", float(self.rho))

    @property
    def key(self):
        return (self.rho, self.reflected, self.odd, self.trig)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        s = 1.0 - x if self.reflected else x
        arg = self.rho * s
        if self.trig:
            val = np.sin(arg) if self.odd else np.cos(arg)
        else:
            val = np.sinh(arg) if self.odd else np.cosh(arg)
        return self.amplitude * val

    def derivative(self) -> "HyperAtom":
        chain = -self.rho if self.reflected else self.rho
        if self.odd:
            # sinh -> cosh, sin -> cos
            amp = self.amplitude * chain
        else:
            # cosh -> sinh, cos -> -sin
            amp = self.amplitude * chain * (-1.0 if self.trig else 1.0)
        return HyperAtom(amp, self.rho, self.reflected, not self.odd, self.trig)

    def scaled(self, c: float) -> "HyperAtom":
        return HyperAtom(c * self.amplitude, self.rho, self.reflected, self.odd, self.trig)

    @classmethod
    def from_square(cls, amplitude: float, rho2: float, reflected=False, odd=False,
                    root_sign: float = 1.0) -> "HyperAtom":
        """Build from ``rho**2 = rho2`` (negative means trigonometric).

        ``root_sign`` picks which square root is used. Even atoms do not
        depend on it; odd atoms change sign with it.
        """
        rho = root_sign * math.sqrt(abs(rho2))
        return cls(amplitude, rho, reflected, odd, rho2 < 0)


def r_sinh_r(rho2: float) -> float:
    """``r sinh(r)`` for ``r**2 = rho2``; real and even in ``r``.

    Uses the even Taylor series when ``|rho2|`` is tiny.
    """
    if abs(rho2) < SERIES_CUTOFF:
        # r sinh r = sum r^{2m+2} / (2m+1)!, truncated at degree 8
        return sum(rho2 ** (m + 1) / math.factorial(2 * m + 1) for m in range(4))
    rho = math.sqrt(abs(rho2))
    return rho * math.sinh(rho) if rho2 > 0 else -rho * math.sin(rho)


@dataclass(frozen=True, eq=False)
class ScalarFn:
    """Finite sum of atoms. Like atoms are merged on construction."""

    atoms: tuple = field(default_factory=tuple)

    def __post_init__(self):
        pt: dict[int, list] = {}
        hy: dict[tuple, float] = {}
        for a in self.atoms:
            if isinstance(a, PolyTrigAtom):
                slot = pt.setdefault(a.k, [np.zeros(0), np.zeros(0)])
                slot[0] = _padd(slot[0], a.poly_cos)
                slot[1] = _padd(slot[1], a.poly_sin)
            elif isinstance(a, HyperAtom):
                hy[a.key] = hy.get(a.key, 0.0) + a.amplitude
            else:
                raise TypeError(f"unsupported atom {type(a).__name__}")
        merged = []
        for k in sorted(pt):
            atom = PolyTrigAtom(pt[k][0], pt[k][1], k)
            if not atom.is_zero():
                merged.append(atom)
        for key in sorted(hy):
            if hy[key] != 0.0:
                merged.append(HyperAtom(hy[key], *key))
        object.__setattr__(self, "atoms", tuple(merged))

    # constructors
    @classmethod
    def zero(cls) -> "ScalarFn":
        return cls(())

    @classmethod
    def constant(cls, c: float) -> "ScalarFn":
        return cls((PolyTrigAtom([c], [], 0),))

    @classmethod
    def poly(cls, coeffs: Sequence[float]) -> "ScalarFn":
        return cls((PolyTrigAtom(coeffs, [], 0),))

    @classmethod
    def cos(cls, k: int, amplitude: float = 1.0) -> "ScalarFn":
        return cls((PolyTrigAtom([amplitude], [], k),))

    @classmethod
    def sin(cls, k: int, amplitude: float = 1.0) -> "ScalarFn":
        return cls((PolyTrigAtom([], [amplitude], k),))

    # structure
    @property
    def polytrig(self) -> tuple:
        return tuple(a for a in self.atoms if isinstance(a, PolyTrigAtom))

    @property
    def hyper(self) -> tuple:
        return tuple(a for a in self.atoms if isinstance(a, HyperAtom))

    def is_polytrig(self) -> bool:
        return not self.hyper

    def is_zero(self) -> bool:
        return not self.atoms

    def atom_at(self, k: int) -> PolyTrigAtom:
        for a in self.polytrig:
            if a.k == k:
                return a
        return PolyTrigAtom([], [], k)

    def max_frequency(self) -> float:
        w = [a.frequency for a in self.polytrig] + [a.rho for a in self.hyper if a.trig]
        return max(w, default=0.0)

    # arithmetic
    def __add__(self, other: "ScalarFn") -> "ScalarFn":
        return ScalarFn(self.atoms + other.atoms)

    def __neg__(self) -> "ScalarFn":
        return self * -1.0

    def __sub__(self, other: "ScalarFn") -> "ScalarFn":
        return self + (-other)

    def __mul__(self, other) -> "ScalarFn":
        if isinstance(other, ScalarFn):
            if self.hyper or other.hyper:
                raise TypeError("products are closed only for poly-trig functions")
            prods = []
            for a in self.polytrig:
                for b in other.polytrig:
                    prods.extend(a * b)
            return ScalarFn(tuple(prods))
        c = float(other)
        return ScalarFn(tuple(a.scaled(c) for a in self.atoms))

    __rmul__ = __mul__

    def times_poly(self, p) -> "ScalarFn":
        return ScalarFn(tuple(a.times_poly(p) for a in self.polytrig))

    # calculus
    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for a in self.atoms:
            out = out + a(x)
        return out

    def derivative(self) -> "ScalarFn":
        return ScalarFn(tuple(a.derivative() for a in self.atoms))

    def antiderivative(self) -> "ScalarFn":
        """``x -> integral_0^x f(s) ds`` (poly-trig only)."""
        if self.hyper:
            raise TypeError("closed-form antiderivative needs a poly-trig function")
        parts = []
        const = 0.0
        for a in self.polytrig:
            F, f0 = a.antiderivative()
            parts.append(F)
            const -= f0
        parts.append(PolyTrigAtom([const], [], 0))
        return ScalarFn(tuple(parts))

    def integral(self) -> float:
        """Integral over [0, 1]; closed form for poly-trig atoms."""
        total = sum((a.integral() for a in self.polytrig), 0.0)
        if self.hyper:
            hyper_only = ScalarFn(self.hyper)
            total += gauss_legendre_integrate(hyper_only)
        return total

    def sup_norm(self, n: int = 2001) -> float:
        x = np.linspace(0.0, 1.0, n)
        return float(np.max(np.abs(self(x))))


# -- quadrature -------------------------------------------------------------

_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gl_nodes(order: int):
    if order not in _GL_CACHE:
        x, w = np.polynomial.legendre.leggauss(order)
        _GL_CACHE[order] = (0.5 * (x + 1.0), 0.5 * w)
    return _GL_CACHE[order]


def composite_nodes(n_intervals: int, order: int = QUAD_ORDER):
    """Nodes and weights of the composite rule on [0, 1]."""
    x0, w0 = _gl_nodes(order)
    h = 1.0 / n_intervals
    left = np.arange(n_intervals) * h
    x = (left[:, None] + h * x0[None, :]).ravel()
    w = np.tile(h * w0, n_intervals)
    return x, w


def _start_intervals(freq: float, order: int) -> int:
    # about a quarter of the nodes per oscillation is plenty for a first pass
    n = 1
    while n * order < 1.5 * freq and n < QUAD_MAX_INTERVALS:
        n *= 2
    return n


def gauss_legendre_integrate(f: Callable, rtol: float = QUAD_RTOL, order: int = QUAD_ORDER,
                             freq: float = 0.0) -> float:
    """Adaptive composite Gauss-Legendre integral of ``f`` over [0, 1].

    The number of subintervals is doubled until two successive estimates
    agree to ``rtol`` relative to the integral of ``|f|``.
    """
    if isinstance(f, ScalarFn):
        freq = max(freq, f.max_frequency())
    n = _start_intervals(freq, order)
    x, w = composite_nodes(n, order)
    v = f(x)
    prev, scale = float(w @ v), float(w @ np.abs(v))
    residual = np.inf
    while True:
        n *= 2
        if n > QUAD_MAX_INTERVALS:
            raise QuadratureError("quadrature did not converge", residual)
        x, w = composite_nodes(n, order)
        v = f(x)
        cur, scale = float(w @ v), max(scale, float(w @ np.abs(v)))
        residual = abs(cur - prev)
        if residual <= rtol * max(scale, abs(cur)) or scale == 0.0:
            return cur
        prev = cur


def _closed_inner(f: ScalarFn, g: ScalarFn) -> float:
    total = 0.0
    for a in f.polytrig:
        for b in g.polytrig:
            for atom in a * b:
                if not atom.is_zero():
                    total += atom.integral()
    return total


def evaluate(f: ScalarFn, x):
    """Evaluate ``f`` at ``x``; ``x`` must lie in [0, 1]."""
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0.0) or np.any(xa > 1.0) or np.any(np.isnan(xa)):
        raise ValueError("evaluation point outside [0, 1]")
    out = f(xa)
    return float(out) if out.ndim == 0 else out


def derivative(f: ScalarFn) -> ScalarFn:
    return f.derivative()


def _poly_hyper_integral(p: np.ndarray, h: HyperAtom) -> float:
    """``integral_0^1 p(x) h(x) dx`` by repeated integration by parts.

    Only used for ``rho >= 1`` where the ``1/rho**j`` factors are benign.
    """
    if h.reflected:
        # substitute s = 1 - x
        p = _reflect(p)
    odd, amp = h.odd, h.amplitude
    total = 0.0
    dp = p
    sign = 1.0
    for _ in range(len(p)):
        # next antiderivative of the (odd, amp) atom in s
        if h.trig:
            new_amp = amp / h.rho if not odd else -amp / h.rho
        else:
            new_amp = amp / h.rho
        odd, amp = not odd, new_amp
        G = HyperAtom(amp, h.rho, False, odd, h.trig)
        total += sign * (_pval(dp, 1.0) * G(1.0) - _pval(dp, 0.0) * G(0.0))
        dp = _pder(dp)
        sign = -sign
        if dp.size == 0:
            break
    return float(total)


def _reflect(p: np.ndarray) -> np.ndarray:
    """Coefficients of ``s -> p(1 - s)``."""
    out = np.zeros(0)
    base = np.array([1.0])
    for c in p:
        out = _padd(out, c * base)
        base = _pmul(base, np.array([1.0, -1.0]))
    return _trim(out)


def _hyper_split(hyper: ScalarFn, p: np.ndarray) -> tuple[float, ScalarFn]:
    """Closed-form part of ``<hyper, p>`` for a pure polynomial ``p``.

    Atoms with ``rho < 1`` are returned for quadrature instead.
    """
    closed = 0.0
    rest = []
    for h in hyper.hyper:
        if h.rho >= 1.0:
            closed += _poly_hyper_integral(p, h)
        else:
            rest.append(h)
    return closed, ScalarFn(tuple(rest))


def inner_product(f: ScalarFn, g: ScalarFn, method: str = "auto") -> float:
    """L2(0, 1) inner product.

    Poly-trig pairs and polynomial x hyperbolic pairs (``rho >= 1``) are
    integrated in closed form; everything else involving a hyperbolic atom
    goes through adaptive quadrature. ``method="quad"`` forces quadrature
    for everything.
    """
    if method == "quad":
        return gauss_legendre_integrate(lambda x: f(x) * g(x), freq=f.max_frequency() + g.max_frequency())
    total = _closed_inner(f, g)
    fh, gh = ScalarFn(f.hyper), ScalarFn(g.hyper)
    if fh.is_zero() and gh.is_zero():
        return total
    fpoly, gpoly = ScalarFn((f.atom_at(0),)), ScalarFn((g.atom_at(0),))
    f_trig, g_trig = ScalarFn(f.polytrig) - fpoly, ScalarFn(g.polytrig) - gpoly
    # pure polynomial parts against hyperbolic atoms have a closed form
    c1, fh_rest = _hyper_split(fh, g.atom_at(0).poly_cos) if not gpoly.is_zero() else (0.0, fh)
    c2, gh_rest = _hyper_split(gh, f.atom_at(0).poly_cos) if not fpoly.is_zero() else (0.0, gh)
    total += c1 + c2
    # what is left: hyper x hyper, hyper x trig, and small-rho hyper x poly
    pairs = [(fh, gh), (fh, g_trig), (f_trig, gh)]
    if not gpoly.is_zero():
        pairs.append((fh_rest, gpoly))
    if not fpoly.is_zero():
        pairs.append((fpoly, gh_rest))
    pairs = [(u, v) for u, v in pairs if not (u.is_zero() or v.is_zero())]
    if pairs:
        def mixed(x):
            return sum(u(x) * v(x) for u, v in pairs)

        total += gauss_legendre_integrate(mixed, freq=f.max_frequency() + g.max_frequency())
    return total


@dataclass(frozen=True)
class BasisVector:
    """An N-tuple of scalar functions, one per cascade component.

    ``mode`` is ``(i, k)`` (1-based chain index), ``kind`` is ``"phi"`` or
    ``"psi"`` and ``mu`` the normalisation of the cosine component.
    """

    components: tuple
    mode: tuple = (0, 0)
    kind: str = "phi"
    mu: float = 1.0

    @property
    def N(self) -> int:
        return len(self.components)

    def __call__(self, x):
        return np.array([c(x) for c in self.components])

    def derivative(self) -> "BasisVector":
        return BasisVector(tuple(c.derivative() for c in self.components), self.mode, self.kind, self.mu)

    def scaled(self, s: float) -> "BasisVector":
        return BasisVector(tuple(c * s for c in self.components), self.mode, self.kind, self.mu * s)

    def max_frequency(self) -> float:
        return max((c.max_frequency() for c in self.components), default=0.0)

    @classmethod
    def zeros(cls, N: int) -> "BasisVector":
        return cls(tuple(ScalarFn.zero() for _ in range(N)))


def vector_inner_product(F: BasisVector, G: BasisVector) -> float:
    """Inner product on (L2)^N."""
    if F.N != G.N:
        raise ValueError(f"component count mismatch: {F.N} vs {G.N}")
    return sum(inner_product(f, g) for f, g in zip(F.components, G.components)
               if not (f.is_zero() or g.is_zero()))


def h1_inner_product(F: BasisVector, G: BasisVector) -> float:
    """Inner product on (H1)^N: values plus derivatives."""
    if F.N != G.N:
        raise ValueError(f"component count mismatch: {F.N} vs {G.N}")
    return vector_inner_product(F, G) + vector_inner_product(F.derivative(), G.derivative())


def gram_matrix(F: Sequence[BasisVector], G: Sequence[BasisVector], h1: bool = False,
                rtol: float = 1e-13) -> np.ndarray:
    """Matrix of inner products ``<F[a], G[b]>`` by batched quadrature.

    All vectors are sampled on one composite Gauss-Legendre grid that is
    refined until every entry has converged.
    """
    N = F[0].N
    if any(v.N != N for v in list(F) + list(G)):
        raise ValueError("component count mismatch")
    freq = max(v.max_frequency() for v in list(F) + list(G))

    def sample(vecs, x):
        out = np.empty((len(vecs), N, x.size))
        for a, v in enumerate(vecs):
            for j, c in enumerate(v.components):
                out[a, j] = c(x) if not c.is_zero() else 0.0
        return out

    def estimate(n):
        x, w = composite_nodes(n)
        Fv, Gv = sample(F, x), sample(G, x)
        if h1:
            Fd, Gd = sample([v.derivative() for v in F], x), sample([v.derivative() for v in G], x)
            Fv, Gv = np.concatenate([Fv, Fd], axis=1), np.concatenate([Gv, Gd], axis=1)
        Fw = (Fv * w).reshape(len(F), -1)
        M = Fw @ Gv.reshape(len(G), -1).T
        S = np.abs(Fw) @ np.abs(Gv.reshape(len(G), -1)).T
        return M, S

    n = _start_intervals(2 * freq, QUAD_ORDER)
    prev, _ = estimate(n)
    residual = np.inf
    while True:
        n *= 2
        if n > QUAD_MAX_INTERVALS:
            raise QuadratureError("Gram quadrature did not converge", residual)
        cur, scale = estimate(n)
        residual = float(np.max(np.abs(cur - prev)))
        if np.all(np.abs(cur - prev) <= rtol * np.maximum(scale, 1e-300) + 1e-15):
            return cur
        prev = cur


def poly_fn(coeffs: Iterable[float]) -> ScalarFn:
    return ScalarFn.poly(list(coeffs))
