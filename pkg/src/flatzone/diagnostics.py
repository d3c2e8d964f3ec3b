"""Post-hoc analyses of computed solutions.

Two different functions named g appear in this problem. The reaction term
of the transformed equation lives in :mod:`flatzone.core`; here
``reciprocal_h = 1/h`` is the coefficient used for the behaviour of u at a point
where it touches σ, with primitive ``sqrt_h_primitive(u) = ∫₀ᵘ dt/√reciprocal_h``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bvp import BvpSolution, apply_laplacian, gradient
from .core import DomainError, Nonlinearity, Transform, find_sigma_n
from .quadrature import simpson_batch

FIT_FRACTION = 0.05
FIT_MIN_NODES = 8
NEAR_TOUCH = 1e-3
# a discrete threshold sits O(h) above the continuous one (about 5% at 1000
# nodes); between the two the centre gap collapses over an O(h) core that
# swamps the fit window, so near-critical solves back off by this factor
NEAR_CRITICAL_FRACTION = 0.95


class InapplicableDiagnostic(DomainError):
    pass


def reciprocal_h(nl: Nonlinearity, s):
    """1/h(s), which vanishes at σ."""
    with np.errstate(divide="ignore"):
        return 1.0 / nl.h(s)


def sqrt_h_primitive(nl: Nonlinearity, u):
    """∫₀ᵘ √h(t) dt; finite up to σ exactly when √h is integrable."""
    u = np.asarray(u, dtype=float)
    sig = nl.sigma
    if np.any((u < 0) | (u > sig)):
        raise DomainError("sqrt_h_primitive is defined on [0, sigma]")
    if nl.kind == "power":
        A, gam = nl.A, nl.gamma
        e = 1.0 - gam / 2.0
        with np.errstate(divide="ignore", invalid="ignore"):
            if e == 0.0:
                out = -math.sqrt(A) * np.log1p(-u / sig)
            else:
                out = math.sqrt(A) * sig ** e * -np.expm1(e * np.log1p(-u / sig)) / e
        return out
    # tabulated: substitute t = σ - w² so the endpoint singularity is integrable
    flat = u.ravel()
    lo = np.sqrt(sig - flat)
    hi = np.full_like(flat, math.sqrt(sig))

    def f(w, k):
        return 2.0 * w * np.sqrt(nl.h_gap(w * w))

    out = simpson_batch(f, lo, hi, rtol=1e-10, atol=1e-300)
    return out.reshape(u.shape)


def sqrt_h_tail(nl: Nonlinearity, d):
    """sqrt_h_primitive(σ) - sqrt_h_primitive(σ - d) = ∫ √h over the last d below σ, from the gap d."""
    d = np.asarray(d, dtype=float)
    sig = nl.sigma
    if np.any((d < 0) | (d > sig)):
        raise DomainError("gap must lie in [0, sigma]")
    if nl.kind == "power":
        e = 1.0 - nl.gamma / 2.0
        if e <= 0.0:
            return np.full(d.shape, math.inf)
        return math.sqrt(nl.A) * d ** e / e
    flat = d.ravel()

    def f(w, k):
        return 2.0 * w * np.sqrt(nl.h_gap(w * w))

    out = simpson_batch(f, np.zeros_like(flat), np.sqrt(flat), rtol=1e-10, atol=1e-300)
    return out.reshape(d.shape)


@dataclass
class AsymptoticsPrediction:
    case_tag: str
    predicted_u_second_deriv_at_0: float
    predicted_G_slope: Optional[float] = None
    reciprocal_h_slope_at_sigma: Optional[float] = None


def curvature_asymptotics(nl: Nonlinearity, Lambda: float, f0: float, N: int) -> AsymptoticsPrediction:
    """Predicted behaviour of the critical solution at its touching point.

    With s = 1/h near σ: infinite slope of s at σ (γ < 1) gives
    u''(0) = -Λf0/N; a finite slope s'(σ) = -1/A (γ = 1) gives
    u''(0) = -Λf0/(N - 2/s'(σ)); zero slope (1 < γ < 2) gives u''(0) = 0
    with sqrt_h_primitive(u(r)) ≈ sqrt_h_primitive(σ) - √(Λf0)·r.
    """
    if nl.kind != "power":
        raise InapplicableDiagnostic("the touching-point classification needs a power law")
    if not (Lambda > 0 and f0 > 0 and int(N) >= 1):
        raise DomainError("need Lambda > 0, f0 > 0 and N >= 1")
    gam, A = nl.gamma, nl.A
    if gam >= 2.0:
        raise InapplicableDiagnostic("no touching solution when sqrt(h) is not integrable")
    if gam < 1.0:
        return AsymptoticsPrediction("I", -Lambda * f0 / N, reciprocal_h_slope_at_sigma=-math.inf)
    if gam == 1.0:
        slope = -1.0 / A
        return AsymptoticsPrediction("II", -Lambda * f0 / (N - 2.0 / slope),
                                     reciprocal_h_slope_at_sigma=slope)
    return AsymptoticsPrediction("III", 0.0, -math.sqrt(Lambda * f0), reciprocal_h_slope_at_sigma=0.0)


@dataclass
class TouchingFit:
    applicable: bool
    u_second_deriv_at_0: Optional[float] = None
    G_slope: Optional[float] = None
    window_nodes: int = 0
    window_radius: float = 0.0
    reason: str = ""


def _window(sol: BvpSolution):
    grid = sol.grid
    r = grid.radius_of_node
    k = max(FIT_MIN_NODES, int(math.ceil(FIT_FRACTION * grid.m)))
    order = np.argsort(r, kind="stable")[:k]
    return order, r


def fit_touching_behavior(sol: BvpSolution, t: Transform, case_tag: Optional[str] = None) -> TouchingFit:
    """Least-squares fits of u near the centre of a near-critical solution.

    u''(0) comes from an even quadratic a + c r² over the 5% of nodes nearest
    the centre; for case III the slope of sqrt_h_primitive(u) against r is fitted too.
    """
    L = t.L
    c = sol.grid.center
    if sol.v[c] < L - NEAR_TOUCH * L:
        return TouchingFit(False, reason="centre value is not within 1e-3 L of the ceiling")
    idx, r = _window(sol)
    rr = r[idx]
    uu = sol.u[idx]
    X = np.column_stack([np.ones_like(rr), rr ** 2])
    coef, *_ = np.linalg.lstsq(X, uu, rcond=None)
    fit = TouchingFit(True, u_second_deriv_at_0=float(2.0 * coef[1]), window_nodes=int(idx.size),
                      window_radius=float(rr.max()))
    if case_tag is None and t.source.kind == "power" and 1.0 < t.source.gamma < 2.0:
        case_tag = "III"
    if case_tag == "III":
        # sqrt_h_primitive(u) = sqrt_h_primitive(σ) - (tail over the gap); the gap keeps the digits near σ
        gap = sol.gap[idx] if sol.gap is not None else t.sigma - uu
        tail = sqrt_h_tail(t.source, np.clip(gap, 0.0, t.sigma))
        X1 = np.column_stack([np.ones_like(rr), rr])
        c1, *_ = np.linalg.lstsq(X1, -tail, rcond=None)
        fit.G_slope = float(c1[1])
    return fit


def plateau_flux(sol: BvpSolution) -> float:
    """One-sided difference of u at the outer plateau edge, from the non-flat side."""
    if sol.flat_set is None or sol.flat_set[0] == sol.flat_set[1]:
        raise InapplicableDiagnostic("no plateau with nonempty interior")
    i1 = sol.flat_set[1]
    if i1 >= sol.grid.m - 1:
        raise InapplicableDiagnostic("plateau reaches the boundary")
    return float((sol.u[i1 + 1] - sol.u[i1]) / sol.grid.h)


@dataclass
class DefectMeasure:
    density: np.ndarray = field(repr=False)
    total_mass: float = 0.0
    plateau_mass: float = 0.0
    flat_interior: np.ndarray = field(default=None, repr=False)


def _h_of_u(sol: BvpSolution, nl: Nonlinearity, cap: Optional[float] = None):
    u = np.minimum(sol.u, nl.sigma)
    with np.errstate(divide="ignore"):
        hu = nl.h(u)
    return hu if cap is None else np.minimum(hu, cap)


def defect_measure(sol: BvpSolution, t: Transform, lam=None, f=None) -> DefectMeasure:
    """Node density: λf on the plateau, h(u)|D_h u|² elsewhere."""
    grid = sol.grid
    lam = sol.lam if lam is None else lam
    fv = sol.f if f is None else np.broadcast_to(np.asarray(f, dtype=float), (grid.m,))
    du = gradient(grid, sol.u)
    flat = sol.flat_mask
    off = ~flat
    density = np.zeros(grid.m)
    with np.errstate(invalid="ignore", over="ignore"):
        density[off] = (_h_of_u(sol, t.source) * du ** 2)[off]
    density[flat] = lam * fv[flat]
    density[~np.isfinite(density)] = 0.0
    w = grid.weights()
    interior = flat.copy()
    interior[1:] &= flat[:-1]
    interior[:-1] &= flat[1:]
    if grid.geometry == "ball":
        interior[0] = flat[0] and flat[1]
    return DefectMeasure(density=density, total_mass=float(np.dot(w, density)),
                         plateau_mass=float(np.dot(w[flat], density[flat])),
                         flat_interior=interior)


def divergence_mass(sol: BvpSolution, lam=None, f=None) -> float:
    """Σ λf·w - Σ(-Δ_h u)·w over the unknowns: the mass the discrete equation leaves over."""
    grid = sol.grid
    lam = sol.lam if lam is None else lam
    fv = sol.f if f is None else np.broadcast_to(np.asarray(f, dtype=float), (grid.m,))
    idx = grid.unknowns
    w = grid.weights()[idx]
    lap = apply_laplacian(grid, sol.u)[idx]
    return float(np.dot(w, lam * fv[idx]) - np.dot(w, lap))


@dataclass
class EnergyCheck:
    holds: bool
    margin: float
    gradient_energy: float
    datum_mass: float


def _capped_h_integral(nl: Nonlinearity, a, b, cap: Optional[float]):
    """∫ min(h(σ - d), cap) dd over gap intervals [a, b], a ≤ b elementwise.

    A truncated solution may pass σ (negative gap); h_n is the cap there.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    split = 0.0 if cap is None else nl.sigma - find_sigma_n(nl, cap)
    lo = np.maximum(a, split)
    hi = np.maximum(b, lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        tail = np.where(hi > lo, nl.H_increment(hi, hi - lo), 0.0)
    flat = 0.0 if cap is None else cap * np.clip(np.minimum(b, split) - a, 0.0, None)
    return flat + tail


def energy_bound_check(sol: BvpSolution, t: Transform, lam=None, f=None) -> EnergyCheck:
    """∫ h_n(u)|u'|² of the piecewise-linear interpolant against Σ λf·w.

    n is the last truncation level used.  On a cell the interpolant has
    constant slope, so its energy is |Δu|/h times ∫ h_n over the cell's
    range of u, which is computed from the gap σ - u so that cells next to
    a plateau keep their digits.
    """
    grid = sol.grid
    lam = sol.lam if lam is None else lam
    fv = sol.f if f is None else np.broadcast_to(np.asarray(f, dtype=float), (grid.m,))
    n = sol.n_schedule_used[-1] if sol.n_schedule_used else None
    sig = t.sigma
    gap = sol.gap if sol.gap is not None else sig - sol.u
    gap = np.minimum(gap, sig) if n is not None else np.clip(gap, 0.0, sig)
    a = np.minimum(gap[:-1], gap[1:])
    b = np.maximum(gap[:-1], gap[1:])
    du = b - a
    h = grid.h
    if grid.geometry == "interval":
        wcell = np.ones(grid.m - 1)
    else:
        r = grid.nodes
        wcell = (r[1:] ** grid.N - r[:-1] ** grid.N) / (grid.N * h)
    live = du > 0
    cell = np.zeros(grid.m - 1)
    if np.any(live):
        cell[live] = _capped_h_integral(t.source, a[live], b[live], n) * du[live] / h
    lhs = float(np.dot(wcell, cell))
    rhs = float(np.dot(grid.weights(), lam * fv))
    return EnergyCheck(holds=lhs <= rhs, margin=rhs - lhs, gradient_energy=lhs, datum_mass=rhs)


def _same_grid(a, b) -> bool:
    return (a.geometry == b.geometry and a.N == b.N and a.m == b.m and a.R == b.R)


def comparison_check(sol_a: BvpSolution, sol_b: BvpSolution, slack: float = 1e-8) -> bool:
    """u_a ≤ u_b + slack nodewise, for λ_a ≤ λ_b on the same grid."""
    if not _same_grid(sol_a.grid, sol_b.grid):
        raise DomainError("solutions live on different grids")
    if sol_a.lam > sol_b.lam:
        raise DomainError("comparison needs sol_a.lambda <= sol_b.lambda")
    return bool(np.all(sol_a.u <= sol_b.u + slack))
