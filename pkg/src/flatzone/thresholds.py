"""Existence and nonexistence thresholds in λ, and a bisection estimate of Λ.

Λ is the supremum of the λ for which a solution stays strictly below σ. It
is bracketed from below by comparison with the linear problem, from above by
the eigenvalue bound (h integrable) and the flat subsolution (√h
integrable), and located by bisection on whether the transformed solution
develops a flat zone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded

from .bvp import (ConvergenceFailure, Grid, _banded, f_nodes, laplacian_bands, linear_solution,
                  solve_auto)
from .core import DomainError, Transform
from .serialize import jsonable


class InapplicableError(DomainError):
    """The requested bound does not apply to this nonlinearity."""


class ThresholdFailure(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


def _require_weight(fv: np.ndarray) -> None:
    if not np.any(fv > 0):
        raise DomainError("f must not vanish identically")


def principal_eigenvalue(f, grid: Grid, rtol: float = 1e-10, max_iter: int = 10_000):
    """λ₁ and φ > 0 of the discrete pencil -Δ_h φ = λ f φ by inverse iteration.

    The eigenvalue is the Rayleigh quotient in the cell-volume inner product,
    which makes the discrete operator symmetric.
    """
    fv = f_nodes(f, grid)
    _require_weight(fv)
    idx = grid.unknowns
    lo, di, up = laplacian_bands(grid)
    ab = _banded(lo, di, up)
    w = grid.weights()[idx]
    fw = fv[idx]
    phi = np.ones(idx.size)
    lam = math.nan
    for it in range(1, max_iter + 1):
        nxt = solve_banded((1, 1), ab, fw * phi)
        nxt /= np.max(np.abs(nxt))
        A_phi = _apply(lo, di, up, nxt)
        new = float(np.dot(w * nxt, A_phi) / np.dot(w * fw * nxt, nxt))
        done = abs(new - lam) <= rtol * abs(new)
        phi, lam = nxt, new
        if done:
            break
    else:
        raise ThresholdFailure("inverse iteration did not converge",
                               {"iterations": max_iter, "lambda1": lam})
    out = np.zeros(grid.m)
    out[idx] = phi
    return lam, out


def _apply(lo, di, up, x):
    y = di * x
    y[:-1] += up[:-1] * x[1:]
    y[1:] += lo[1:] * x[:-1]
    return y


def rayleigh_quotient(f, grid: Grid, phi) -> float:
    """Σ w φ(-Δ_h φ) / Σ w f φ² over the unknowns."""
    fv = f_nodes(f, grid)
    idx = grid.unknowns
    lo, di, up = laplacian_bands(grid)
    p = np.asarray(phi, dtype=float)[idx]
    w = grid.weights()[idx]
    return float(np.dot(w * p, _apply(lo, di, up, p)) / np.dot(w * fv[idx] * p, p))


def nonexistence_bound(t: Transform, f, grid: Grid) -> float:
    """λ₁(f)·e^{H(σ)}·L; no solution exists for λ above it.

    Needs h integrable on (0, σ) so that H(σ) is finite.
    """
    if not t.report.h_integrable:
        raise InapplicableError("nonexistence bound needs h integrable on (0, sigma); "
                                "here H(sigma) is infinite")
    lam1, _ = principal_eigenvalue(f, grid)
    # a finite but huge H(σ) leaves only the trivial bound
    log_bound = math.log(lam1) + t.source.H_sigma + math.log(t.L)
    return math.exp(log_bound) if log_bound < 709.0 else math.inf


def existence_lower_bound(f, grid: Grid, sigma: float) -> float:
    """σ/‖z‖∞ with -Δ_h z = f: below it u ≤ λz < σ, so a solution exists."""
    fv = f_nodes(f, grid)
    _require_weight(fv)
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    z = linear_solution(grid, fv)
    return sigma / float(np.max(z))


def subsolution_bound(t: Transform, f, grid: Grid) -> Optional[float]:
    """λ_sub of the flat radial subsolution divided by min f, if defined.

    An interval (-R, R) is the one-dimensional ball of radius R.
    """
    from .shooting import radial_subsolution

    fv = f_nodes(f, grid)
    fmin = float(np.min(fv[grid.unknowns]))
    if not t.report.sqrt_h_integrable or fmin <= 0:
        return None
    N = grid.N if grid.geometry == "ball" else 1
    cert = radial_subsolution(t, N, grid.R)
    return cert.lambda_sub / fmin


@dataclass
class LambdaEstimate:
    Lambda_hat: float
    bracket: tuple
    evaluations: list = field(default_factory=list)
    convention: str = ("a maximum touching the ceiling counts as flat, so the upper end of "
                       "the bracket is always a nonexistence value")


def has_flat_zone(t: Transform, lam: float, f, grid: Grid, **solve_kw) -> bool:
    sol = solve_auto(t, lam, f, grid, **solve_kw)
    return sol.flat_set is not None


def estimate_Lambda(t: Transform, f, grid: Grid, lambda_bracket=None,
                    tol_lambda: Optional[float] = None, max_expand: int = 10,
                    **solve_kw) -> LambdaEstimate:
    """Bisection on "the transformed solution has a flat zone".

    The default bracket runs from the linear-comparison bound to the smaller
    of the available upper bounds. An end with the wrong predicate value is
    moved outwards by factors of two, at most ``max_expand`` times.
    ``tol_lambda`` is the final bracket width; it defaults to 1% of the
    initial lower end.
    """
    if not t.report.sqrt_h_integrable:
        raise InapplicableError("solutions exist for every lambda in this regime; "
                                "there is no finite extremal parameter")
    fv = f_nodes(f, grid)
    if lambda_bracket is None:
        lo = existence_lower_bound(fv, grid, t.sigma)
        uppers = []
        if t.report.h_integrable:
            uppers.append(nonexistence_bound(t, fv, grid))
        sub = subsolution_bound(t, fv, grid)
        if sub is not None:
            uppers.append(sub)
        hi = min(uppers) if uppers else 4.0 * lo
    else:
        lo, hi = map(float, lambda_bracket)
    if not (0 < lo < hi):
        raise DomainError("lambda bracket must satisfy 0 < lo < hi")
    tol = 1e-2 * lo if tol_lambda is None else float(tol_lambda)
    if not tol > 0:
        raise DomainError("tol_lambda must be positive")
    evals = []

    def pred(lam):
        try:
            flat = has_flat_zone(t, lam, fv, grid, **solve_kw)
        except ConvergenceFailure as exc:
            raise ThresholdFailure(f"solve failed at lambda={lam}",
                                   {"evaluations": evals, **exc.report}) from exc
        evals.append((float(lam), bool(flat)))
        return flat

    for _ in range(max_expand + 1):
        if not pred(lo):
            break
        lo /= 2.0
    else:
        raise ThresholdFailure("flat zone persists at the bottom of the bracket",
                               {"evaluations": evals})
    for _ in range(max_expand + 1):
        if pred(hi):
            break
        lo, hi = hi, 2.0 * hi
    else:
        raise ThresholdFailure("no flat zone at the top of the bracket",
                               {"evaluations": evals})
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if pred(mid):
            hi = mid
        else:
            lo = mid
    ordered = sorted(evals)
    flags = [flag for _, flag in ordered]
    if flags != sorted(flags):
        raise ThresholdFailure("flat-zone predicate is not monotone in lambda",
                               {"evaluations": ordered})
    return LambdaEstimate(Lambda_hat=0.5 * (lo + hi), bracket=(lo, hi), evaluations=evals)


@dataclass
class ThresholdReport:
    lambda1: float
    H_sigma: float
    psi_sigma: float
    lambda_ne_upper: Optional[float]
    lambda_sub_certificate: Optional[float]
    lambda_lower_linear: float
    Lambda_hat: Optional[float]
    Lambda_bracket: Optional[tuple]
    regime: str
    tol_lambda: Optional[float] = None
    notes: list = field(default_factory=list)

    def check_ordering(self, slack: float) -> bool:
        """lower ≤ Λ̂ ≤ each available upper bound, within ``slack``."""
        if self.Lambda_hat is None:
            return True
        ok = self.lambda_lower_linear <= self.Lambda_hat + slack
        for up in (self.lambda_ne_upper, self.lambda_sub_certificate):
            if up is not None:
                ok &= self.Lambda_hat <= up + slack
        return bool(ok)

    def to_dict(self) -> dict:
        return jsonable(self)


def threshold_report(t: Transform, f, grid: Grid, tol_lambda: Optional[float] = None,
                     estimate: bool = True, **solve_kw) -> ThresholdReport:
    fv = f_nodes(f, grid)
    lam1, _ = principal_eigenvalue(fv, grid)
    ne = nonexistence_bound(t, fv, grid) if t.report.h_integrable else None
    sub = subsolution_bound(t, fv, grid)
    lower = existence_lower_bound(fv, grid, t.sigma)
    notes = []
    Lhat = bracket = None
    tol = None
    if t.report.regime == "FiniteThreshold" and estimate:
        uppers = [b for b in (ne, sub) if b is not None]
        hi = min(uppers) if uppers else 4.0 * lower
        tol = 1e-2 * lower if tol_lambda is None else float(tol_lambda)
        est = estimate_Lambda(t, fv, grid, (lower, hi) if hi > lower else None, tol, **solve_kw)
        Lhat, bracket = est.Lambda_hat, est.bracket
        notes.append(est.convention)
    elif t.report.regime != "FiniteThreshold":
        notes.append("solutions exist for every lambda; no extremal parameter")
    if t.report.inconclusive:
        notes.append("tail fit of the tabulated h is inconclusive; regime is a heuristic")
    return ThresholdReport(lambda1=lam1, H_sigma=t.source.H_sigma, psi_sigma=t.L,
                           lambda_ne_upper=ne, lambda_sub_certificate=sub,
                           lambda_lower_linear=lower, Lambda_hat=Lhat, Lambda_bracket=bracket,
                           regime=t.report.regime, tol_lambda=tol, notes=notes)
