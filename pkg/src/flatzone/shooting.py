"""Shooting profiles of  -v'' = λ g(v),  v(0) = ℓ,  v'(0) = 0.

Profiles come from the first integral

    v'(s)² = 2λ (G(ℓ) - G(v(s)))

by quadrature, never by time stepping. All integrals are written in the
original variable x = ψ⁻¹(t), where the integrand is I(x, y)^(-1/2) with

    I(x, y) = e^{2H(x)} ∫ₓʸ e^{-2H},   y = ψ⁻¹(ℓ),

and the endpoint singularity at x = y is removed by x = y - w^k.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import DomainError, Transform
from .quadrature import simpson_batch

RTOL = 1e-10


class DivergenceError(ArithmeticError):
    """The critical radius is infinite (√h not integrable near σ)."""


@dataclass
class ShootingSolution:
    ell: float
    lam: float
    s: np.ndarray
    v: np.ndarray
    v_prime: np.ndarray
    R_ell: float
    plateau: float = 0.0

    @property
    def samples(self):
        return np.column_stack([self.s, self.v, self.v_prime])


def _power_k(t: Transform, at_ceiling: bool) -> int:
    """Even exponent of the substitution x = y - w^k."""
    ge = t.source.gamma_effective
    if not at_ceiling or ge < 1.0 or ge >= 2.0:
        return 2
    k = math.ceil(2.0 / (2.0 - ge) - 1e-12)
    return max(2, k + (k % 2))


def _w_floor(t: Transform, k: int, w_max: float) -> float:
    """Smallest w sampled; keeps the gap w^k far from underflow."""
    return max(1e-12 * w_max, (1e-30 * t.sigma) ** (1.0 / k))


def _gap_of_ell(t: Transform, ell: float) -> float:
    """Distance σ - ψ⁻¹(ℓ), zero at the ceiling."""
    if ell >= t.L:
        return 0.0
    return float(t._psi_inv_gap(ell))


def _integrand(t: Transform, dy: float, k: int, w_floor: float):
    """Map w ↦ k w^{k-1} I(x, y)^{-1/2} for x = y - w^k (gaps: dx = dy + w^k)."""
    def f(w, idx):
        w = np.maximum(w, w_floor)
        gap = t.scaled_gap_d(dy, w ** k)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = k * w ** (k - 1) / np.sqrt(gap)
        return np.where(np.isfinite(val), val, 0.0)
    return f


def _unit_integral(t: Transform, ell: float, w_lo=None, w_hi=None, rtol=RTOL):
    """∫ I^{-1/2} dx over the w-segments [w_lo, w_hi] (batched), in gap units."""
    dy = _gap_of_ell(t, ell)
    k = _power_k(t, dy == 0.0)
    y_extent = t.sigma - dy
    w_max = y_extent ** (1.0 / k)
    f = _integrand(t, dy, k, _w_floor(t, k, w_max))
    if w_lo is None:
        w_lo, w_hi = np.array([0.0]), np.array([w_max])
    return simpson_batch(f, w_lo, w_hi, rtol=rtol, atol=1e-300, panels=16), dy, k, w_max


def _check_ell(t: Transform, ell: float, lam: float) -> None:
    if not (0.0 < ell <= t.L):
        raise DomainError(f"ell must lie in (0, L={t.L}], got {ell}")
    if not lam > 0:
        raise DomainError("lambda must be positive")


def radius(t: Transform, ell: float, lam: float) -> float:
    """Zero-crossing radius R_ℓ of the profile started at ℓ; +inf if divergent."""
    _check_ell(t, ell, lam)
    if ell >= t.L and not t.report.sqrt_h_integrable:
        return math.inf
    val, *_ = _unit_integral(t, ell)
    return float(val[0]) / math.sqrt(2.0 * lam)


def ceiling_integral(t: Transform, eps: float = 0.0, rtol: float = RTOL) -> float:
    """∫₀^{L-ε} dt / √(G(L) - G(t)), finite at ε = 0 only when √h is integrable."""
    if eps <= 0.0:
        if not t.report.sqrt_h_integrable:
            return math.inf
        val, *_ = _unit_integral(t, t.L, rtol=rtol)
        return float(val[0])
    d_eps = gap_of_deficit(t, eps)
    k = _power_k(t, True)
    w_max = t.sigma ** (1.0 / k)
    f = _integrand(t, 0.0, k, _w_floor(t, k, w_max))
    val = simpson_batch(f, [d_eps ** (1.0 / k)], [w_max], rtol=rtol, atol=1e-300, panels=16)
    return float(val[0])


def gap_of_deficit(t: Transform, eps: float) -> float:
    """Gap d with L - ψ(σ - d) = ε, by bisection on the monotone deficit."""
    lo, hi = 0.0, t.sigma
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t._psi_deficit_gap(mid) < eps:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    return 0.5 * (lo + hi)


def _chebyshev_v(ell: float, n: int) -> np.ndarray:
    j = np.arange(n)
    v = ell * np.sin(0.5 * np.pi * j / (n - 1)) ** 2
    v[-1] = ell
    return v


def trace(t: Transform, ell: float, lam: float, n_samples: int = 201) -> ShootingSolution:
    """Profile (s, v, v') sampled on a Chebyshev grid in v from ℓ down to 0."""
    _check_ell(t, ell, lam)
    if n_samples < 16:
        raise DomainError("n_samples must be at least 16")
    if ell >= t.L and not t.report.sqrt_h_integrable:
        raise DivergenceError("critical radius is infinite for this nonlinearity")
    v = _chebyshev_v(ell, n_samples)[::-1]          # ℓ ... 0
    dy = _gap_of_ell(t, ell)
    k = _power_k(t, dy == 0.0)
    y_extent = t.sigma - dy
    w_max = y_extent ** (1.0 / k)
    # gap of each sample, measured from the start level
    dx = np.empty_like(v)
    dx[0] = dy
    dx[-1] = t.sigma
    inner = v[1:-1]
    dx[1:-1] = t._psi_inv_gap(inner)
    w = np.clip(np.maximum(dx - dy, 0.0) ** (1.0 / k), 0.0, w_max)
    w[0], w[-1] = 0.0, w_max
    f = _integrand(t, dy, k, _w_floor(t, k, w_max))
    seg = simpson_batch(f, w[:-1], w[1:], rtol=RTOL, atol=1e-300, panels=4)
    scale = 1.0 / math.sqrt(2.0 * lam)
    s = scale * np.concatenate([[0.0], np.cumsum(seg)])
    gap = _gap_at(t, dx, dy)
    gap[0] = 0.0
    vp = -math.sqrt(2.0 * lam) * np.exp(-t.source.H_gap(dx)) * np.sqrt(gap)
    vp[0] = 0.0
    v = v.copy()
    v[-1] = 0.0
    return ShootingSolution(ell=float(ell), lam=float(lam), s=s, v=v, v_prime=vp,
                            R_ell=float(s[-1]))


def _gap_at(t: Transform, dx, dy):
    dx = np.asarray(dx, dtype=float)
    return np.asarray(t.scaled_gap_d(np.full_like(dx, dy), np.maximum(dx - dy, 0.0)),
                      dtype=float)


def profile_at(t: Transform, ell: float, lam: float, s_points) -> np.ndarray:
    """Values of the shooting profile at prescribed abscissae s ≥ 0 (0 beyond R_ℓ).

    Each abscissa is located by safeguarded Newton in the substitution
    variable w, so values are accurate to quadrature tolerance rather than to
    an interpolation error.
    """
    _check_ell(t, ell, lam)
    if ell >= t.L and not t.report.sqrt_h_integrable:
        raise DivergenceError("critical radius is infinite for this nonlinearity")
    s_points = np.asarray(s_points, dtype=float)
    dy = _gap_of_ell(t, ell)
    k = _power_k(t, dy == 0.0)
    w_max = (t.sigma - dy) ** (1.0 / k)
    f = _integrand(t, dy, k, _w_floor(t, k, w_max))
    scale = 1.0 / math.sqrt(2.0 * lam)
    # cumulative integral on a fixed w-grid; each abscissa then only needs
    # the short stretch from its bracketing grid node
    wg = np.linspace(0.0, w_max, 257)
    cum = np.concatenate([[0.0], np.cumsum(
        simpson_batch(f, wg[:-1], wg[1:], rtol=RTOL, atol=1e-300, panels=4))])
    R = scale * float(cum[-1])
    target = np.clip(s_points, 0.0, R) / scale
    inside = (target > 0) & (target < cum[-1])
    tgt = target[inside]
    j = np.clip(np.searchsorted(cum, tgt, side="right") - 1, 0, wg.size - 2)
    base, lo, hi = cum[j], wg[j].copy(), wg[j + 1].copy()
    w = lo + (hi - lo) * np.clip((tgt - base) / (cum[j + 1] - base), 0.0, 1.0)
    start = wg[j]
    active = np.ones(w.size, dtype=bool)
    for _ in range(100):
        a = np.flatnonzero(active)
        if a.size == 0:
            break
        wa = w[a]
        val = base[a] + simpson_batch(f, start[a], wa, rtol=RTOL, atol=1e-300,
                                      panels=2) - tgt[a]
        lo[a] = np.where(val < 0, wa, lo[a])
        hi[a] = np.where(val >= 0, wa, hi[a])
        slope = f(wa, None)
        with np.errstate(divide="ignore", invalid="ignore"):
            wn = wa - val / slope
        bad = (~np.isfinite(wn) | (wn <= lo[a]) | (wn >= hi[a])) & (val != 0)
        wn = np.where(bad, 0.5 * (lo[a] + hi[a]), wn)
        w[a] = wn
        active[a] = np.abs(wn - wa) > 1e-15 * w_max
    out = np.zeros_like(s_points)
    out[target <= 0] = ell
    d = dy + w ** k
    out[inside] = t.L - t._psi_deficit_gap(d)
    return out


def flat_family(t: Transform, lam: float, plateau: float, n_samples: int = 201) -> ShootingSolution:
    """Flat profile: L on [0, plateau], then the minimal profile shifted by plateau."""
    if plateau < 0:
        raise DomainError("plateau must be nonnegative")
    base = trace(t, t.L, lam, n_samples)
    if plateau == 0.0:
        return base
    flat_s = np.linspace(0.0, plateau, 8)
    s = np.concatenate([flat_s, plateau + base.s[1:]])
    v = np.concatenate([np.full(8, t.L), base.v[1:]])
    vp = np.concatenate([np.zeros(8), base.v_prime[1:]])
    return ShootingSolution(ell=t.L, lam=float(lam), s=s, v=v, v_prime=vp,
                            R_ell=plateau + base.R_ell, plateau=float(plateau))


def critical_lambda(t: Transform, R: float) -> float:
    """λ at which the minimal critical profile reaches zero exactly at R; +inf if none."""
    if not R > 0:
        raise DomainError("R must be positive")
    if not t.report.sqrt_h_integrable:
        return math.inf
    c = radius(t, t.L, 1.0)
    return (c / R) ** 2


def subsolution_constant(t: Transform, samples: int = 4096):
    """C = sup over levels of ∫_{v}^{L} g / g(v)², scanned in the s variable.

    In s the ratio equals I(x, σ), which is bounded since g' ≤ -h(0) and
    tends to 0 at σ; the scan is refined around its maximum by golden search.
    """
    sig = t.sigma
    d = sig * np.sin(0.5 * np.pi * np.arange(1, samples + 1) / samples) ** 2
    vals = np.asarray(t.scaled_gap_d(np.zeros_like(d), d), dtype=float)
    j = int(np.argmax(vals))
    if j == vals.size - 1:
        return float(vals[j]), sig - float(d[j])
    a = d[max(j - 1, 0)]
    b = d[min(j + 1, d.size - 1)]
    phi = (math.sqrt(5.0) - 1.0) / 2.0

    def q(x):
        return float(t.scaled_gap_d(np.array([0.0]), np.array([x]))[0])

    c1, c2 = b - phi * (b - a), a + phi * (b - a)
    f1, f2 = q(c1), q(c2)
    for _ in range(80):
        if f1 > f2:
            b, c2, f2 = c2, c1, f1
            c1 = b - phi * (b - a)
            f1 = q(c1)
        else:
            a, c1, f1 = c1, c2, f2
            c2 = a + phi * (b - a)
            f2 = q(c2)
    best = max(float(vals[j]), f1, f2)
    return best, sig - 0.5 * (a + b)


@dataclass
class SubsolutionCertificate:
    N: int
    R: float
    C: float
    R_plateau: float
    R_bar: float
    lambda_sub: float
    coord: np.ndarray = field(repr=False)
    w: np.ndarray = field(repr=False)
    residual_max: float = math.nan
    certified: bool = False


def radial_subsolution(t: Transform, N: int, R: float, m: int = 2001,
                       slack: float = 1e-9) -> SubsolutionCertificate:
    """Flat radial subsolution and the λ above which it certifies nonexistence.

    Builds w = L on [0, R_p] followed by the minimal profile (λ = 1), with
    R_p = (N-1)√(2C), rescales it to the ball of radius R, and checks the
    discrete inequality -Δ_h w ≤ λ_sub g(w) at every interior node.
    """
    from .bvp import Grid, apply_laplacian

    if int(N) < 1 or not R > 0:
        raise DomainError("need N >= 1 and R > 0")
    if not t.report.sqrt_h_integrable:
        raise DivergenceError("no flat subsolution: critical radius is infinite")
    C, _ = subsolution_constant(t) if N > 1 else (0.0, 0.0)
    R_plateau = (N - 1) * math.sqrt(2.0 * C)
    R_L1 = radius(t, t.L, 1.0)
    R_bar = R_L1 + R_plateau
    lam_sub = 2.0 * R_bar ** 2 / R ** 2
    grid = Grid.ball(N, R, m) if N > 1 else Grid.ball(1, R, m)
    rho = grid.nodes * R_bar / R
    w = np.full(grid.m, t.L)
    outside = rho > R_plateau
    w[outside] = profile_at(t, t.L, 1.0, rho[outside] - R_plateau)
    w[-1] = 0.0
    lap = apply_laplacian(grid, w)
    idx = grid.unknowns
    resid = lap[idx] - lam_sub * t._g(np.clip(w[idx], 0.0, t.L))
    rmax = float(np.max(resid))
    return SubsolutionCertificate(N=int(N), R=float(R), C=float(C), R_plateau=R_plateau,
                                  R_bar=R_bar, lambda_sub=lam_sub, coord=grid.nodes, w=w,
                                  residual_max=rmax, certified=rmax <= slack)
