"""Singular nonlinearity h, its truncations, and the change of variables.

The quasilinear problem  -Δu + h(u)|∇u|² = λf  with h blowing up at σ is
mapped to the semilinear problem  -Δv = λ f g(v)  through

    H(s) = ∫₀ˢ h,   ψ(s) = ∫₀ˢ e^{-H},   v = ψ(u),   g(v) = e^{-H(ψ⁻¹(v))}.

Power nonlinearities with exponent 1 are handled with exact formulas; every
other case goes through cached tables sampled on a Chebyshev grid in s.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import quad_vec
from scipy.special import exprel

from .quadrature import simpson_batch

TABLE_NODES = 4096
SIGMA_N_TOL = 1e-12
TAIL_FIT_RESIDUAL = 1e-2
_CUTOFF = 25.0


class DomainError(ValueError):
    """Argument outside the interval where a transform quantity is defined."""


@dataclass(frozen=True)
class SingularLimit:
    """Returned in place of a number when a derivative blows up at the ceiling."""
    value: float
    case_tag: str
    note: str = ""


@dataclass(frozen=True)
class IntegrabilityReport:
    sqrt_h_integrable: bool
    h_integrable: bool
    gamma_effective: Optional[float] = None
    inconclusive: bool = False

    @property
    def regime(self) -> str:
        return "FiniteThreshold" if self.sqrt_h_integrable else "AlwaysExists"


@dataclass(frozen=True, eq=False)
class Nonlinearity:
    """Coefficient h on [0, σ), either A(σ-s)^(-γ) or a strictly increasing table.

    Tables are interpolated linearly between breakpoints and continued past
    the last breakpoint by a power law A_t(σ-s)^(-γ_t) whose exponent is fitted
    to the last decade of breakpoints (in σ-s) and which matches the last
    tabulated value exactly.
    """
    sigma: float
    kind: str
    A: Optional[float] = None
    gamma: Optional[float] = None
    s_table: Optional[np.ndarray] = None
    h_table: Optional[np.ndarray] = None
    tail_gamma: Optional[float] = None
    tail_residual: Optional[float] = None
    _H_table: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def power(cls, A: float, gamma: float, sigma: float) -> "Nonlinearity":
        for name, val in (("A", A), ("gamma", gamma), ("sigma", sigma)):
            if not (np.isfinite(val) and val > 0):
                raise DomainError(f"{name} must be positive and finite, got {val}")
        return cls(sigma=float(sigma), kind="power", A=float(A), gamma=float(gamma))

    @classmethod
    def tabulated(cls, s, h, sigma: float) -> "Nonlinearity":
        s = np.asarray(s, dtype=float)
        h = np.asarray(h, dtype=float)
        if s.ndim != 1 or s.shape != h.shape or s.size < 3:
            raise DomainError("table needs at least three (s, h) breakpoints")
        if not (np.isfinite(sigma) and sigma > 0):
            raise DomainError("sigma must be positive")
        if s[0] != 0.0:
            raise DomainError("table must start at s = 0")
        if np.any(np.diff(s) <= 0) or s[-1] >= sigma:
            raise DomainError("breakpoints must be strictly increasing inside [0, sigma)")
        if np.any(np.diff(h) <= 0):
            raise DomainError("tabulated h must be strictly increasing")
        if h[0] < 0 or not np.all(np.isfinite(h)):
            raise DomainError("tabulated h must be finite and nonnegative")

        # power-law exponent of the last decade of breakpoints
        dist = sigma - s
        sel = dist <= 10.0 * dist[-1]
        if sel.sum() < 3:
            sel = np.zeros_like(sel)
            sel[-3:] = True
        x = np.log(dist[sel])
        y = np.log(np.maximum(h[sel], np.finfo(float).tiny))
        slope, icpt = np.polyfit(x, y, 1)
        resid = float(np.sqrt(np.mean((y - (slope * x + icpt)) ** 2)))
        tail_gamma = float(-slope)
        if not tail_gamma > 0:
            raise DomainError("table does not blow up towards sigma (fitted exponent <= 0)")

        seg = np.diff(s) * 0.5 * (h[1:] + h[:-1])
        H_tab = np.concatenate([[0.0], np.cumsum(seg)])
        return cls(sigma=float(sigma), kind="table", s_table=s, h_table=h,
                   tail_gamma=tail_gamma, tail_residual=resid, _H_table=H_tab)

    # -- pointwise evaluation (vectorized, no domain checks) ---------------
    @property
    def gamma_effective(self) -> float:
        return self.gamma if self.kind == "power" else self.tail_gamma

    def h(self, s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == "power":
                d = np.maximum(self.sigma - s, 0.0)
                return self.A * d ** (-self.gamma)
            st, ht = self.s_table, self.h_table
            inner = np.interp(s, st, ht)
            d_last = self.sigma - st[-1]
            tail = ht[-1] * (d_last / np.maximum(self.sigma - s, 0.0)) ** self.tail_gamma
            return np.where(s <= st[-1], inner, tail)

    def H(self, s):
        """Primitive ∫₀ˢ h; +inf at σ when h is not integrable."""
        s = np.asarray(s, dtype=float)
        return self.H_gap(np.maximum(self.sigma - s, 0.0))

    def H_gap(self, d):
        """H(σ - d), evaluated from the distance d to σ without cancellation."""
        d = np.asarray(d, dtype=float)
        sig = self.sigma
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.kind == "power":
                return _power_primitive(self.A, self.gamma, sig, d)
            st, ht, Ht = self.s_table, self.h_table, self._H_table
            s = sig - d
            j = np.clip(np.searchsorted(st, s, side="right") - 1, 0, st.size - 2)
            dx = s - st[j]
            slope = (ht[j + 1] - ht[j]) / (st[j + 1] - st[j])
            inner = Ht[j] + ht[j] * dx + 0.5 * slope * dx * dx
            d_last = sig - st[-1]
            coef = ht[-1] * d_last ** self.tail_gamma
            tail = Ht[-1] + _tail_primitive(coef, self.tail_gamma, d_last, d)
            return np.where(d >= d_last, inner, tail)

    def H_increment(self, d, u):
        """H(σ - d + u) - H(σ - d) for 0 ≤ u ≤ d, free of cancellation."""
        d = np.asarray(d, dtype=float)
        u = np.asarray(u, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.kind == "power":
                return _power_increment(self.A, self.gamma, d, u)
            d_last = self.sigma - self.s_table[-1]
            coef = self.h_table[-1] * d_last ** self.tail_gamma
            in_tail = _power_increment(coef, self.tail_gamma, d, u)
            plain = self.H_gap(d - u) - self.H_gap(d)
            return np.where(d <= d_last, in_tail, plain)

    def h_gap(self, d):
        d = np.asarray(d, dtype=float)
        if self.kind == "power":
            with np.errstate(divide="ignore"):
                return self.A * d ** (-self.gamma)
        st, ht = self.s_table, self.h_table
        d_last = self.sigma - st[-1]
        with np.errstate(divide="ignore", invalid="ignore"):
            tail = ht[-1] * (d_last / np.maximum(d, 0.0)) ** self.tail_gamma
        return np.where(d >= d_last, np.interp(self.sigma - d, st, ht), tail)

    @property
    def H_sigma(self) -> float:
        return float(self.H(self.sigma))

    def describe(self) -> dict:
        if self.kind == "power":
            return {"kind": "power", "A": self.A, "gamma": self.gamma, "sigma": self.sigma}
        return {"kind": "table", "sigma": self.sigma, "breakpoints": int(self.s_table.size),
                "tail_gamma": self.tail_gamma, "tail_residual": self.tail_residual}


def _tail_primitive(coef, gamma, d0, d):
    """∫ coef·(σ-τ)^(-γ) dτ from σ-d0 to σ-d.

    Written through exprel so that exponents near 1 do not cancel.
    """
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        log_ratio = np.log(d0 / d)
        a = 1.0 - gamma
        val = coef * d0 ** a * log_ratio * exprel(-a * log_ratio)
    # d = 0 means the full primitive up to σ
    full = coef * d0 ** a / a if a > 0 else np.inf
    return np.where(d > 0, val, full)


def _power_increment(A, gamma, d, u):
    """∫ A(σ-τ)^(-γ) dτ over [σ - d, σ - d + u]."""
    lg = np.log1p(-u / d)
    if gamma == 1.0:
        return -A * lg
    return A * d ** (1.0 - gamma) * np.expm1((1.0 - gamma) * lg) / (gamma - 1.0)


def _power_primitive(A, gamma, sigma, d):
    """∫ A(σ-τ)^(-γ) dτ from 0 to σ-d."""
    return _tail_primitive(A, gamma, sigma, d)


def classify(nl: Nonlinearity) -> IntegrabilityReport:
    """Integrability of √h and h near σ."""
    if nl.kind == "power":
        return IntegrabilityReport(nl.gamma < 2.0, nl.gamma < 1.0, nl.gamma, False)
    ge = nl.tail_gamma
    return IntegrabilityReport(ge < 2.0, ge < 1.0, ge, nl.tail_residual > TAIL_FIT_RESIDUAL)


def _chebyshev_nodes(a: float, b: float, n: int) -> np.ndarray:
    k = np.arange(n)
    # sin² form keeps relative accuracy of the nodes clustered at a
    x = a + (b - a) * np.sin(0.5 * np.pi * k / (n - 1)) ** 2
    x[0], x[-1] = a, b
    return x


def _hermite(t, p0, p1, m0, m1, width):
    t2 = t * t
    t3 = t2 * t
    return ((2 * t3 - 3 * t2 + 1) * p0 + (t3 - 2 * t2 + t) * width * m0
            + (-2 * t3 + 3 * t2) * p1 + (t3 - t2) * width * m1)


def _hermite_slope(t, p0, p1, m0, m1, width):
    t2 = t * t
    return ((6 * t2 - 6 * t) * p0 / width + (3 * t2 - 4 * t + 1) * m0
            + (-6 * t2 + 6 * t) * p1 / width + (3 * t2 - 2 * t) * m1)


class Transform:
    """Cached evaluators for H, ψ, ψ⁻¹, g, g', G and the ceiling L = ψ(σ).

    Public methods validate their arguments and raise :class:`DomainError`;
    the underscore versions are unchecked and used inside solver loops.
    """

    def __init__(self, nl: Nonlinearity, nodes: int = TABLE_NODES):
        self.source = nl
        self.sigma = nl.sigma
        self.report = classify(nl)
        self.closed_form = nl.kind == "power" and nl.gamma == 1.0
        if self.closed_form:
            A, sig = nl.A, nl.sigma
            self._a1 = A + 1.0
            self.L = sig / (A + 1.0)
            self.G_L = sig / (2.0 * A + 1.0)
            self.s_nodes = self.psi_nodes = self.G_nodes = None
        else:
            self._build_tables(nodes)

    # -- table construction ------------------------------------------------
    def _build_tables(self, nodes: int) -> None:
        nl = self.source
        sig = self.sigma
        # nodes are generated as distances to σ so the cells near σ keep
        # full relative resolution
        gap = _chebyshev_nodes(0.0, sig, nodes)[::-1].copy()
        if nl.kind == "table":
            gap = np.union1d(gap, sig - nl.s_table)[::-1].copy()
        s = sig - gap
        Hs = nl.H_gap(gap)
        e1 = np.exp(-Hs)
        e2 = e1 * e1

        def f1(d, k):
            return np.exp(-nl.H_gap(d))

        def f2(d, k):
            return np.exp(-2.0 * nl.H_gap(d))

        d1 = simpson_batch(f1, gap[1:], gap[:-1], rtol=1e-12, atol=1e-280, panels=2)
        d2 = simpson_batch(f2, gap[1:], gap[:-1], rtol=1e-12, atol=1e-280, panels=2)
        self.s_nodes = s
        self.gap_nodes = gap
        self.H_nodes = Hs
        self.e1_nodes = e1
        self.e2_nodes = e2
        self.psi_nodes = np.concatenate([[0.0], np.cumsum(d1)])
        self.G_nodes = np.concatenate([[0.0], np.cumsum(d2)])
        # tails measured from σ are accurate where the head sums saturate
        self.psi_tail = np.concatenate([np.cumsum(d1[::-1])[::-1], [0.0]])
        self.G_tail = np.concatenate([np.cumsum(d2[::-1])[::-1], [0.0]])
        self.L = float(self.psi_nodes[-1])
        self.G_L = float(self.G_nodes[-1])
        # ψ⁻¹ is only a function where the table is strictly increasing
        keep = np.concatenate([[True], np.diff(self.psi_nodes) > 0])
        self._inv_index = np.flatnonzero(keep)
        if not np.all(np.diff(self.psi_nodes) >= 0):
            raise RuntimeError("ψ table is not monotone")

    # -- unchecked vectorized evaluators -------------------------------------
    def _H(self, s):
        return self.source.H(s)

    def _h(self, s):
        return self.source.h(s)

    def _psi(self, s):
        s = np.asarray(s, dtype=float)
        if self.closed_form:
            sig = self.sigma
            return self.L * (1.0 - ((sig - s) / sig) ** self._a1)
        return self.L - self._psi_deficit(s)

    def _psi_deficit(self, s):
        """L - ψ(s), accurate near σ."""
        return self._psi_deficit_gap(self.sigma - np.asarray(s, dtype=float))

    def _psi_deficit_gap(self, d):
        """L - ψ(σ - d) from the gap d."""
        d = np.maximum(np.asarray(d, dtype=float), 0.0)
        if self.closed_form:
            return self.L * (d / self.sigma) ** self._a1
        return self._cell_eval(d, self.psi_tail, -self.e1_nodes, self.psi_nodes, self.e1_nodes)

    def _locate(self, d):
        """Cell index and local coordinate of the point with gap d = σ - s."""
        gn = self.gap_nodes
        j = np.clip(np.searchsorted(-gn, -d, side="right") - 1, 0, gn.size - 2)
        w = gn[j] - gn[j + 1]
        t = np.clip((gn[j] - d) / w, 0.0, 1.0)
        return j, t, w

    def _cell_eval(self, d, tail, tail_slope, head, head_slope):
        """Deficit (total minus head) of a tabulated primitive at gap d."""
        j, t, w = self._locate(d)
        tail_val = _hermite(t, tail[j], tail[j + 1], tail_slope[j], tail_slope[j + 1], w)
        # the cubic can overshoot where the tail spans many decades within a cell
        tail_val = np.clip(tail_val, np.minimum(tail[j], tail[j + 1]),
                           np.maximum(tail[j], tail[j + 1]))
        head_val = _hermite(t, head[j], head[j + 1], head_slope[j], head_slope[j + 1], w)
        # use the head sum in the lower half and the tail in the upper half
        total = head[-1]
        return np.where(d > 0.5 * self.sigma, total - head_val, tail_val)

    def _psi_inv(self, v):
        return self.sigma - self._psi_inv_gap(v)

    def _psi_inv_gap(self, v):
        """σ - ψ⁻¹(v), zero for v ≥ L."""
        v = np.asarray(v, dtype=float)
        if self.closed_form:
            base = np.clip(1.0 - v / self.L, 0.0, 1.0)
            return self.sigma * base ** (1.0 / self._a1)
        idx = self._inv_index
        pn = self.psi_nodes[idx]
        gn = self.gap_nodes[idx]
        en = self.e1_nodes[idx]
        j = np.clip(np.searchsorted(pn, v, side="right") - 1, 0, pn.size - 2)
        p0, p1 = pn[j], pn[j + 1]
        m0, m1 = en[j], en[j + 1]
        w = gn[j] - gn[j + 1]
        span = p1 - p0
        t = np.clip((v - p0) / np.where(span > 0, span, 1.0), 0.0, 1.0)
        t = np.array(t, dtype=float, ndmin=1)
        shape = np.shape(v)
        args = [np.broadcast_to(a, t.shape).ravel() for a in (p0, p1, m0, m1, w, v)]
        t = t.ravel()
        lo = np.zeros_like(t)
        hi = np.ones_like(t)
        act = np.arange(t.size)
        for _ in range(60):
            a0, a1, b0, b1, ww, vv = (a[act] for a in args)
            ta = t[act]
            F = _hermite(ta, a0, a1, b0, b1, ww) - vv
            lo[act] = np.where(F < 0, ta, lo[act])
            hi[act] = np.where(F >= 0, ta, hi[act])
            dF = _hermite_slope(ta, a0, a1, b0, b1, ww) * ww
            with np.errstate(divide="ignore", invalid="ignore"):
                tn = ta - F / dF
            bad = (~np.isfinite(tn) | (tn <= lo[act]) | (tn >= hi[act])) & (F != 0)
            tn = np.where(bad, 0.5 * (lo[act] + hi[act]), tn)
            t[act] = tn
            moving = (np.abs(tn - ta) > 4e-16) & (F != 0) & (hi[act] - lo[act] > 4e-16)
            act = act[moving]
            if act.size == 0:
                break
        t = t.reshape(shape)
        out = gn[j] - t * w
        return np.where(v >= self.L, 0.0, out)

    def _g(self, v):
        v = np.asarray(v, dtype=float)
        if self.closed_form:
            base = np.clip(1.0 - v / self.L, 0.0, 1.0)
            return base ** (self.source.A / self._a1)
        return np.exp(-self.source.H_gap(self._psi_inv_gap(v)))

    def _g_prime(self, v):
        v = np.asarray(v, dtype=float)
        if self.closed_form:
            base = np.clip(1.0 - v / self.L, 0.0, 1.0)
            with np.errstate(divide="ignore"):
                return -(self.source.A / self.sigma) * base ** (-1.0 / self._a1)
        return -self.source.h_gap(self._psi_inv_gap(v))

    def _G(self, v):
        v = np.asarray(v, dtype=float)
        if self.closed_form:
            base = np.clip(1.0 - v / self.L, 0.0, 1.0)
            A = self.source.A
            return self.G_L * (1.0 - base ** ((2.0 * A + 1.0) / self._a1))
        return self.G_L - self._G_deficit_gap(self._psi_inv_gap(v))

    def G_of_s(self, s):
        """∫₀ˢ e^{-2H}, i.e. G(ψ(s))."""
        return self.G_L - self._G_deficit_gap(self.sigma - np.asarray(s, dtype=float))

    def _G_deficit_gap(self, d):
        """∫ e^{-2H} from σ - d to σ."""
        d = np.maximum(np.asarray(d, dtype=float), 0.0)
        if self.closed_form:
            A, sig = self.source.A, self.sigma
            return self.G_L * (d / sig) ** (2.0 * A + 1.0)
        return self._cell_eval(d, self.G_tail, -self.e2_nodes, self.G_nodes, self.e2_nodes)

    def scaled_gap(self, x, y):
        """e^{2H(x)} ∫ₓʸ e^{-2H}, the well-scaled form of G(ψ(y)) - G(ψ(x))."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return self.scaled_gap_d(self.sigma - y, y - x)

    def scaled_gap_d(self, dy, delta):
        """:meth:`scaled_gap` for y = σ - dy and x = y - delta.

        Passing the separation delta explicitly keeps full relative accuracy
        when x is close to y.
        """
        dy, delta = np.broadcast_arrays(np.asarray(dy, dtype=float),
                                        np.asarray(delta, dtype=float))
        shape = dy.shape
        dy = dy.ravel()
        delta = delta.ravel()
        dx = dy + delta
        if self.closed_form:
            p = 2.0 * self.source.A + 1.0
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(dx > 0, delta / np.where(dx > 0, dx, 1.0), 1.0)
                val = -dx / p * np.expm1(p * np.log1p(-frac))
            return np.where(frac >= 1.0, dx / p, val).reshape(shape)
        nl = self.source
        out = np.empty_like(dx)
        # where the two tail integrals do not cancel, their table difference is
        # accurate; short separations and gaps close to σ fall to quadrature
        Gx = self._G_deficit_gap(dx)
        Gy = self._G_deficit_gap(dy)
        diff = Gx - Gy
        table = (dx >= 1e-2 * self.sigma) & (diff >= 0.05 * Gx) & (diff >= 1e-4 * self.G_L)
        if np.any(table):
            with np.errstate(over="ignore", divide="ignore"):
                out[table] = np.exp(2.0 * nl.H_gap(dx[table]) + np.log(diff[table]))
        quad = ~table
        if np.any(quad):
            out[quad] = self._scaled_gap_quad(dx[quad], delta[quad])
        return out.reshape(shape)

    def _scaled_gap_quad(self, dx, delta):
        nl = self.source
        # the integrand e^{-2ΔH} is negligible once ΔH exceeds CUTOFF; cutting
        # there keeps the boundary layer at u = 0 resolvable when h(x) is huge
        upper = delta.copy()
        far = nl.H_increment(dx, delta) > _CUTOFF
        if np.any(far):
            lo = np.zeros(far.sum())
            hi = delta[far]
            dfar = dx[far]
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                big = nl.H_increment(dfar, mid) > _CUTOFF
                hi = np.where(big, mid, hi)
                lo = np.where(big, lo, mid)
                if np.all(hi - lo <= 1e-3 * hi):
                    break
            upper[far] = hi

        # on the unit interval every integrand lies in [0, 1] with integral
        # of order one, so a shared max-norm tolerance is relative for each
        def f(r):
            with np.errstate(over="ignore", invalid="ignore"):
                val = np.exp(-2.0 * nl.H_increment(dx, r * upper))
            return np.where(np.isfinite(val), val, 0.0)

        if dx.size == 0:
            return dx.copy()
        unit, _ = quad_vec(f, 0.0, 1.0, epsabs=0.0, epsrel=1e-13, norm="max", limit=2000)
        return unit * upper

    # -- checked public API ----------------------------------------------
    def _check(self, val, lo, hi, what, open_hi=False):
        arr = np.asarray(val, dtype=float)
        bad = (arr < lo) | (arr >= hi if open_hi else arr > hi) | ~np.isfinite(arr)
        if np.any(bad):
            raise DomainError(f"{what} outside [{lo}, {hi}{')' if open_hi else ']'}")
        return arr

    @staticmethod
    def _out(x):
        x = np.asarray(x)
        return float(x) if x.ndim == 0 else x

    def H(self, s):
        s = self._check(s, 0.0, self.sigma, "s", open_hi=True)
        return self._out(self._H(s))

    def psi(self, s):
        s = self._check(s, 0.0, self.sigma, "s")
        return self._out(self._psi(s))

    def psi_inv(self, v):
        v = self._check(v, 0.0, self.L, "v")
        return self._out(self._psi_inv(v))

    def g(self, v):
        v = self._check(v, 0.0, self.L, "v")
        return self._out(self._g(v))

    def g_prime(self, v):
        v = self._check(v, 0.0, self.L, "v")
        if v.ndim == 0 and float(v) == self.L:
            return SingularLimit(-math.inf, touching_case(self.source),
                                 "g' = -h(σ) diverges at the ceiling")
        return self._out(self._g_prime(np.minimum(v, np.nextafter(self.L, 0.0))))

    def G(self, v):
        v = self._check(v, 0.0, self.L, "v")
        return self._out(self._G(v))

    def describe(self) -> dict:
        return {"L": self.L, "G_L": self.G_L, "closed_form": self.closed_form,
                "nodes": None if self.s_nodes is None else int(self.s_nodes.size)}


def touching_case(nl: Nonlinearity) -> str:
    """Case tag of the behaviour of 1/h at σ: I (slope -inf), II (finite), III (zero)."""
    ge = nl.gamma_effective
    if ge < 1.0:
        return "I"
    if ge == 1.0:
        return "II"
    if ge < 2.0:
        return "III"
    return "inapplicable"


# module-level names mirroring the operation list
def eval_H(t: Transform, s):
    if np.any(np.asarray(s, dtype=float) >= t.sigma):
        raise DomainError("H may be infinite at sigma; query h_integrable first")
    return t.H(s)


def eval_psi(t: Transform, s):
    return t.psi(s)


def eval_psi_inv(t: Transform, v):
    return t.psi_inv(v)


def eval_g(t: Transform, v):
    return t.g(v)


def eval_g_prime(t: Transform, v):
    return t.g_prime(v)


def eval_G(t: Transform, v):
    return t.G(v)


@dataclass(frozen=True, eq=False)
class TruncatedNonlinearity:
    """h_n = min(h, n) together with the induced piecewise reaction term g_n.

    g_n equals g up to ψ(σ_n), then falls linearly with slope -n from
    g(ψ(σ_n)) to zero at L_n, and vanishes beyond.
    """
    n: float
    sigma_n: float
    psi_sigma_n: float
    g_sigma_n: float
    L_n: float
    degenerate: bool
    transform: Transform = field(repr=False)

    def h_n(self, s):
        return np.minimum(self.transform._h(s), self.n)

    def g_n(self, v):
        v = np.asarray(v, dtype=float)
        t = self.transform
        ps = self.psi_sigma_n
        below = t._g(np.clip(v, 0.0, ps))
        ramp = np.maximum(self.g_sigma_n - self.n * (v - ps), 0.0)
        return np.where(v <= ps, below, ramp)

    def g_n_prime(self, v):
        v = np.asarray(v, dtype=float)
        t = self.transform
        ps = self.psi_sigma_n
        # ψ(σ_n) can round to L; clamping the gap keeps |g_n'| ≤ n there
        gap = np.maximum(t._psi_inv_gap(np.clip(v, 0.0, ps)), t.sigma - self.sigma_n)
        below = -np.minimum(t.source.h_gap(gap), self.n)
        return np.where(v <= ps, below, np.where(v < self.L_n, -self.n, 0.0))

    def lipschitz(self) -> float:
        return max(self.n, float(np.max(np.abs(self.transform._g_prime(
            np.linspace(0.0, self.psi_sigma_n, 257))))))

    def psi_n_inv(self, v):
        """Inverse of the truncated ψ_n, finite for v < L_n."""
        v = np.asarray(v, dtype=float)
        t = self.transform
        base = t._psi_inv(np.clip(v, 0.0, self.psi_sigma_n))
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = 1.0 - self.n * (v - self.psi_sigma_n) / self.g_sigma_n
            over = self.sigma_n - np.log(np.maximum(frac, 0.0)) / self.n
        return np.where(v <= self.psi_sigma_n, base, over)


def find_sigma_n(nl: Nonlinearity, n: float) -> float:
    """Level where h reaches n.

    Closed form for power laws (accurate even when σ - σ_n is far below
    1e-12); bisection to an absolute tolerance of 1e-12 for tables.
    """
    if nl.kind == "power":
        return nl.sigma - (nl.A / n) ** (1.0 / nl.gamma)
    lo, hi = 0.0, nl.sigma
    while hi - lo > SIGMA_N_TOL:
        mid = 0.5 * (lo + hi)
        if nl.h(mid) < n:
            lo = mid
        else:
            hi = mid
        if mid == lo == hi:
            break
    return 0.5 * (lo + hi)


def truncate(t: Transform, n: float) -> TruncatedNonlinearity:
    nl = t.source
    if not n > 0:
        raise DomainError("truncation level must be positive")
    if n <= float(nl.h(0.0)):
        warnings.warn(f"truncation level {n} does not exceed h(0); degenerate truncation")
        return TruncatedNonlinearity(n=float(n), sigma_n=0.0, psi_sigma_n=0.0, g_sigma_n=1.0,
                                     L_n=1.0 / n, degenerate=True, transform=t)
    sn = find_sigma_n(nl, n)
    ps = float(t._psi(sn))
    gs = float(np.exp(-nl.H(sn)))
    return TruncatedNonlinearity(n=float(n), sigma_n=sn, psi_sigma_n=ps, g_sigma_n=gs,
                                 L_n=ps + gs / n, degenerate=False, transform=t)
