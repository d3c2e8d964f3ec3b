"""Finite differences for  -Δv = λ f g(v)  on an interval or a radial ball.

The reaction term is replaced by the truncations g_n over an increasing
schedule of levels n; each level is a damped Newton solve on a tridiagonal
system warm-started from the previous level. The quasilinear solution is
recovered as u = ψ⁻¹(v), and the flat zone is read off from the levels the
truncation actually reached.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.linalg import solve_banded

from .core import DomainError, Nonlinearity, Transform, TruncatedNonlinearity, truncate

DEFAULT_SCHEDULE = (1e2, 1e3, 1e4, 1e5, 1e6, 1e7)
DEFAULT_TOL = 1e-8
MAX_BACKTRACK = 50
TOUCH_RATIO = 1.0 / 16.0
# the direct route stands in for the untruncated problem at the largest level
# whose h' is still finite in double precision
H_PRIME_CEILING = 1e300
# λ-continuation of the direct route: Newton budget per step, smallest relative step
CONTINUATION_ITER = 150
CONTINUATION_MIN_STEP = 1e-4


class ConvergenceFailure(RuntimeError):
    """Newton stagnated; carries the last iterate and the level reached."""

    def __init__(self, message, v=None, level=None, report=None):
        super().__init__(message)
        self.v = v
        self.level = level
        self.report = report or {}


@dataclass(frozen=True, eq=False)
class Grid:
    geometry: str
    R: float
    m: int
    N: int = 1
    nodes: np.ndarray = field(default=None, repr=False)

    @classmethod
    def interval(cls, R: float, m: int) -> "Grid":
        _check_grid(R, m)
        return cls("interval", float(R), int(m), 1, np.linspace(-R, R, int(m)))

    @classmethod
    def ball(cls, N: int, R: float, m: int) -> "Grid":
        _check_grid(R, m)
        if int(N) < 1:
            raise DomainError("ball dimension N must be >= 1")
        return cls("ball", float(R), int(m), int(N), np.linspace(0.0, R, int(m)))

    @property
    def h(self) -> float:
        return float(self.nodes[1] - self.nodes[0])

    @property
    def unknowns(self) -> np.ndarray:
        """Indices of nodes carrying unknowns (all but Dirichlet nodes)."""
        if self.geometry == "interval":
            return np.arange(1, self.m - 1)
        return np.arange(0, self.m - 1)

    @property
    def center(self) -> int:
        return self.m // 2 if self.geometry == "interval" else 0

    @property
    def radius_of_node(self) -> np.ndarray:
        return np.abs(self.nodes)

    def cell_volumes(self) -> np.ndarray:
        """Length (interval) or r^{N-1}-weighted volume (ball) of each node's cell."""
        h = self.h
        if self.geometry == "interval":
            w = np.full(self.m, h)
            w[0] = w[-1] = h / 2.0
            return w
        N = self.N
        hi = np.minimum(self.nodes + h / 2.0, self.R)
        lo = np.maximum(self.nodes - h / 2.0, 0.0)
        return (hi ** N - lo ** N) / N

    def weights(self) -> np.ndarray:
        """Quadrature weights; they also symmetrize the discrete Laplacian."""
        return self.cell_volumes()

    def describe(self) -> dict:
        return {"geometry": self.geometry, "N": self.N, "R": self.R, "m": self.m,
                "h": self.h}


def _check_grid(R, m):
    if not (np.isfinite(R) and R > 0):
        raise DomainError("R must be positive")
    if int(m) < 16:
        raise DomainError("grid needs at least 16 nodes")


def laplacian_bands(grid: Grid):
    """(lower, diag, upper) of -Δ_h restricted to the unknowns.

    lower[i] couples unknown i to unknown i-1, upper[i] to unknown i+1.
    """
    h2 = grid.h ** 2
    k = grid.unknowns.size
    if grid.geometry == "interval":
        return np.full(k, -1.0 / h2), np.full(k, 2.0 / h2), np.full(k, -1.0 / h2)
    N, h = grid.N, grid.h
    i = grid.unknowns.astype(float)
    # finite volumes: face fluxes r^{N-1} Du over the exact shell volume
    rp = ((i + 0.5) * h) ** (N - 1)
    rm = np.maximum(i - 0.5, 0.0) * h
    vol = (((i + 0.5) * h) ** N - rm ** N) / N
    rm = rm ** (N - 1)
    diag = (rp + rm) / (h * vol)
    lower = -rm / (h * vol)
    upper = -rp / (h * vol)
    # symmetric closure at the centre: -Δu(0) ≈ 2N(u0 - u1)/h²
    diag[0] = 2.0 * N / h2
    lower[0] = 0.0
    upper[0] = -2.0 * N / h2
    return lower, diag, upper


def apply_laplacian(grid: Grid, v_full) -> np.ndarray:
    """-Δ_h v at every unknown node; Dirichlet nodes get 0.

    Evaluated in flux (difference) form so constants give exactly zero.
    """
    v = np.asarray(v_full, dtype=float)
    lo, di, up = laplacian_bands(grid)
    idx = grid.unknowns
    out = np.zeros(grid.m)
    out[idx] = up * (v[idx + 1] - v[idx])
    if grid.geometry == "interval":
        out[idx] += lo * (v[idx - 1] - v[idx])
    else:
        out[idx[1:]] += lo[1:] * (v[idx[1:] - 1] - v[idx[1:]])
    return out


def gradient(grid: Grid, u_full) -> np.ndarray:
    """Central difference of u at every node (0 at the ball centre)."""
    u = np.asarray(u_full, dtype=float)
    h = grid.h
    d = np.zeros_like(u)
    d[1:-1] = (u[2:] - u[:-2]) / (2.0 * h)
    d[0] = (u[1] - u[0]) / h
    d[-1] = (u[-1] - u[-2]) / h
    if grid.geometry == "ball":
        d[0] = 0.0
    return d


def _banded(lower, diag, upper):
    k = diag.size
    ab = np.zeros((3, k))
    ab[0, 1:] = upper[:-1]
    ab[1, :] = diag
    ab[2, :-1] = lower[1:]
    return ab


def _matvec(lower, diag, upper, x):
    y = diag * x
    y[:-1] += upper[:-1] * x[1:]
    y[1:] += lower[1:] * x[:-1]
    return y


def f_nodes(f, grid: Grid) -> np.ndarray:
    """Nodewise datum from a constant, a callable of the coordinate, or a table."""
    if callable(f):
        vals = np.asarray(f(grid.nodes), dtype=float) * np.ones(grid.m)
    else:
        arr = np.asarray(f, dtype=float)
        vals = np.full(grid.m, float(arr)) if arr.ndim == 0 else arr.copy()
    if vals.shape != (grid.m,):
        raise DomainError("f table must have one value per grid node")
    if np.any(vals < 0) or not np.all(np.isfinite(vals)):
        raise DomainError("f must be finite and nonnegative")
    return vals


def linear_solution(grid: Grid, f) -> np.ndarray:
    """z with -Δ_h z = f and z = 0 on the Dirichlet nodes."""
    fv = f_nodes(f, grid)
    lo, di, up = laplacian_bands(grid)
    z = np.zeros(grid.m)
    z[grid.unknowns] = solve_banded((1, 1), _banded(lo, di, up), fv[grid.unknowns])
    return z


@dataclass
class BvpSolution:
    grid: Grid
    lam: float
    v: np.ndarray
    f: np.ndarray
    u: Optional[np.ndarray] = None
    flat_set: Optional[tuple] = None
    n_schedule_used: list = field(default_factory=list)
    newton_iterations: list = field(default_factory=list)
    level_distances: list = field(default_factory=list)
    residual_inf: float = math.nan
    truncation: Optional[TruncatedNonlinearity] = field(default=None, repr=False)
    delta_flat: float = math.nan
    saturated: int = 0
    route: str = "transform"
    notes: list = field(default_factory=list)
    gap: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def flat_indices(self) -> np.ndarray:
        if self.flat_set is None:
            return np.array([], dtype=int)
        return np.arange(self.flat_set[0], self.flat_set[1] + 1)

    @property
    def flat_mask(self) -> np.ndarray:
        mask = np.zeros(self.grid.m, dtype=bool)
        mask[self.flat_indices] = True
        return mask

    def flat_bounds(self):
        """Coordinates of the first and last flat node, or None."""
        if self.flat_set is None:
            return None
        x = self.grid.nodes
        return float(x[self.flat_set[0]]), float(x[self.flat_set[1]])

    def flat_width(self) -> float:
        """Measure of the flat set: full length on an interval, radius on a ball."""
        b = self.flat_bounds()
        if b is None:
            return 0.0
        if self.grid.geometry == "interval":
            return b[1] - b[0]
        return b[1]

    def telemetry(self) -> dict:
        return {"lambda": self.lam, "route": self.route,
                "n_schedule_used": [float(n) for n in self.n_schedule_used],
                "newton_iterations": list(map(int, self.newton_iterations)),
                "level_distances": [float(d) for d in self.level_distances],
                "residual_inf": float(self.residual_inf), "delta_flat": float(self.delta_flat),
                "flat_set": None if self.flat_set is None else list(map(int, self.flat_set)),
                "flat_bounds": self.flat_bounds(), "saturated_nodes": int(self.saturated),
                "notes": list(self.notes)}


def _newton_level(A, lam, fv, tr: TruncatedNonlinearity, v, max_iter=200, ftol=None):
    """Damped Newton for A v = λ f g_n(v), iterates clamped to [0, L_n]."""
    lo, di, up = A
    scale = max(1.0, lam * float(np.max(fv)) if fv.size else 1.0)
    ftol = 1e-11 * scale if ftol is None else ftol
    Ln = tr.L_n

    def resid(x):
        return _matvec(lo, di, up, x) - lam * fv * tr.g_n(x)

    v = np.clip(v, 0.0, Ln)
    F = resid(v)
    nf = float(np.max(np.abs(F))) if F.size else 0.0
    its = 0
    for its in range(1, max_iter + 1):
        if nf <= ftol:
            return v, its - 1, nf
        J = _banded(lo, di - lam * fv * tr.g_n_prime(v), up)
        dv = solve_banded((1, 1), J, -F)
        step = 1.0
        # Armijo on ‖F‖₂: the Newton step is a descent direction for it, not for ‖F‖∞
        n2 = float(np.dot(F, F))
        for _ in range(MAX_BACKTRACK):
            vn = np.clip(v + step * dv, 0.0, Ln)
            Fn = resid(vn)
            nfn = float(np.max(np.abs(Fn)))
            if float(np.dot(Fn, Fn)) <= (1.0 - 1e-4 * step) * n2:
                break
            step *= 0.5
        else:
            # no decrease: either converged to rounding level or stuck
            if nf <= 1e-7 * scale:
                return v, its, nf
            raise ConvergenceFailure("Newton step rejected 50 times", v=v, level=tr.n,
                                     report={"residual_inf": nf, "iterations": its})
        moved = float(np.max(np.abs(vn - v)))
        v, F, nf = vn, Fn, nfn
        if moved <= 1e-15 * max(Ln, 1.0) and nf <= 1e-7 * scale:
            return v, its, nf
    if nf <= 1e-7 * scale:
        return v, its, nf
    raise ConvergenceFailure("Newton did not converge", v=v, level=tr.n,
                             report={"residual_inf": nf, "iterations": its})


def _warm_up(A, lam, fv, t, v, n_first):
    """Walk the default levels below n_first; a cold start far up the schedule can stall."""
    for n in DEFAULT_SCHEDULE:
        if n >= n_first:
            break
        v, _, _ = _newton_level(A, lam, fv, truncate(t, n), v)
    return v


def solve_semilinear(t: Transform, lam: float, f, grid: Grid,
                     n_schedule: Sequence[float] = DEFAULT_SCHEDULE, tol: float = DEFAULT_TOL,
                     v_init=None) -> BvpSolution:
    """Discrete -Δ_h v = λ f g_n(v) over the truncation schedule.

    Levels are solved in increasing n, each warm-started from the previous.
    The schedule stops early when successive levels differ by less than tol
    while the truncation is inactive (max v below ψ(σ_n)); once the
    truncation is active later levels still move the solution near the
    ceiling, so the schedule is then run to its end.
    """
    if not lam > 0:
        raise DomainError("lambda must be positive")
    sched = sorted(float(n) for n in n_schedule)
    if not sched:
        raise DomainError("n_schedule must be nonempty")
    fv = f_nodes(f, grid)
    idx = grid.unknowns
    A = laplacian_bands(grid)
    if v_init is None:
        v = lam * linear_solution(grid, fv)[idx]
    else:
        v = np.asarray(v_init, dtype=float)[idx].copy()
    sol = BvpSolution(grid=grid, lam=float(lam), v=np.zeros(grid.m), f=fv)
    prev = None
    tr = None
    for n in sched:
        tr = truncate(t, n)
        try:
            try:
                v, its, nf = _newton_level(A, lam, fv[idx], tr, v)
            except ConvergenceFailure:
                if prev is not None or v_init is not None or n <= DEFAULT_SCHEDULE[0]:
                    raise
                v = _warm_up(A, lam, fv[idx], t, v, n)
                v, its, nf = _newton_level(A, lam, fv[idx], tr, v)
        except ConvergenceFailure as exc:
            full = np.zeros(grid.m)
            full[idx] = exc.v
            exc.v = full
            exc.report.update({"n_schedule_used": sol.n_schedule_used + [n]})
            raise
        sol.n_schedule_used.append(n)
        sol.newton_iterations.append(its)
        sol.residual_inf = nf
        if prev is not None:
            dist = float(np.max(np.abs(v - prev)))
            sol.level_distances.append(dist)
            active = float(np.max(v)) > tr.psi_sigma_n
            if dist < tol and not active:
                break
        prev = v.copy()
    sol.v[idx] = v
    sol.truncation = tr
    back_map(t, sol)
    return sol


def back_map(t: Transform, sol: BvpSolution) -> BvpSolution:
    """u = ψ⁻¹(min(v, L)) and the flat set {v ≥ ψ(σ_n)} of the last level.

    A maximum below that threshold still counts as a one-node flat set when
    it touches the ceiling within grid resolution (see :func:`_touches`).
    When √h is not integrable no plateau of positive width can occur, and
    nodes at the ceiling only reflect that the distance to L is below the
    floating-point resolution of v; they are counted as saturated instead.
    """
    v = sol.v
    L = t.L
    sol.gap = t._psi_inv_gap(np.clip(v, 0.0, L))
    sol.u = t.sigma - sol.gap
    tr = sol.truncation
    thresh = tr.psi_sigma_n if tr is not None else L
    sol.delta_flat = L - thresh
    hit = v >= thresh
    sol.flat_set = None
    if tr is not None and sol.delta_flat <= 4.0 * np.finfo(float).eps * L:
        sol.notes.append("L - psi(sigma_n) is below the resolution of v, so nodes merely "
                         "close to sigma read as flat; cross-check with the direct route")
    sol.saturated = 0
    if not t.report.sqrt_h_integrable:
        if np.any(hit):
            sol.saturated = int(hit.sum())
            sol.notes.append("nodes at the ceiling in the divergent-radius regime are reported "
                             "as saturated, not flat")
        return sol
    c = int(np.argmax(v))
    if not hit[c]:
        if _touches(sol.grid, L - v, c):
            sol.flat_set = (c, c)
            sol.notes.append("maximum touches the ceiling within grid resolution")
        return sol
    i0 = c
    while i0 > 0 and hit[i0 - 1]:
        i0 -= 1
    i1 = c
    while i1 < v.size - 1 and hit[i1 + 1]:
        i1 += 1
    sol.flat_set = (i0, i1)
    return sol


def _touches(grid: Grid, deficit, c: int) -> bool:
    """True when the deficit at the maximum is negligible next to its neighbours'.

    A maximum strictly below the ceiling is flat to second order, so its
    neighbours' deficits exceed it by O(h²) only; a touching maximum has a
    deficit far below theirs.
    """
    if c in (0, grid.m - 1) and grid.geometry == "interval":
        return False
    nb = [c + 1] if c == 0 else [c - 1, c + 1]
    d0 = max(float(deficit[c]), 0.0)
    return d0 <= TOUCH_RATIO * min(float(deficit[j]) for j in nb)


def quasilinear_residual(t: Transform, sol: BvpSolution, lam=None, f=None):
    """Residual of -Δ_h u + h(u)|D_h u|² - λf off the plateau, defect density on it.

    Returns (max |residual| over non-flat unknowns, density array with NaN
    off the flat interior).
    """
    grid = sol.grid
    lam = sol.lam if lam is None else lam
    fv = sol.f if f is None else f_nodes(f, grid)
    u = sol.u
    lap = apply_laplacian(grid, u)
    du = gradient(grid, u)
    flat = sol.flat_mask
    idx = grid.unknowns
    off = np.zeros(grid.m, dtype=bool)
    off[idx] = ~flat[idx]
    with np.errstate(invalid="ignore", over="ignore"):
        res = lap + t._h(np.minimum(u, t.sigma)) * du ** 2 - lam * fv
    res_inf = float(np.max(np.abs(res[off]))) if np.any(off) else 0.0
    density = np.full(grid.m, np.nan)
    interior = _flat_interior(sol)
    density[interior] = lam * fv[interior] - lap[interior]
    return res_inf, density


def _flat_interior(sol: BvpSolution) -> np.ndarray:
    """Flat nodes whose stencil neighbours are flat as well."""
    mask = sol.flat_mask
    inner = mask.copy()
    inner[1:] &= mask[:-1]
    inner[:-1] &= mask[1:]
    if sol.grid.geometry == "ball":
        inner[0] = mask[0] and mask[1]
    inner[~np.isin(np.arange(sol.grid.m), sol.grid.unknowns)] = False
    return inner


def solve_quasilinear_direct(nl: Nonlinearity, lam: float, f, grid: Grid, n: float,
                             u_init=None, max_iter: int = 400,
                             transform: Optional[Transform] = None) -> BvpSolution:
    """Newton on  -Δ_h u + h_n(u)|∇u|² = λf  without the transformation.

    The unknown is the gap d = σ - u, so values of u within 1e-300 of σ keep
    their digits; differences and h are evaluated from d directly.
    |∇u|² is discretized as the mean of the squared one-sided differences;
    unlike the central difference it sees odd-even oscillations, which the
    huge coefficient h_n(u) near σ would otherwise excite.
    Starts from the linear solution at a small λ and continues in λ; steps
    towards the singular level are limited to a fraction of the remaining
    distance to σ_n (or to 1/n beyond it), which keeps iterates out of the
    region where h_n jumps by orders of magnitude between nodes. The
    returned v is ψ(u), for diagnostics that look at the transformed value.
    """
    if not lam > 0:
        raise DomainError("lambda must be positive")
    fv = f_nodes(f, grid)
    idx = grid.unknowns
    lo, di, up = laplacian_bands(grid)
    h = grid.h
    sig = nl.sigma
    gap_n = _gap_n(nl, n)
    ball = grid.geometry == "ball"

    def hn(d):
        return np.where(d > gap_n, nl.h_gap(np.maximum(d, gap_n)), n)

    def hn_prime(d):
        """d h_n / du at u = σ - d."""
        return np.where(d > gap_n, _h_prime_gap(nl, np.maximum(d, gap_n)), 0.0)

    def full(x):
        out = np.full(grid.m, sig)
        out[idx] = x
        return out

    def one_sided(x):
        """Forward and backward differences of d at the unknowns (ghost at r = 0)."""
        df = full(x)
        fwd = (df[idx + 1] - df[idx]) / h
        if ball:
            back = np.empty_like(fwd)
            back[0] = -fwd[0]
            back[1:] = (df[idx[1:]] - df[idx[1:] - 1]) / h
        else:
            back = (df[idx] - df[idx - 1]) / h
        return fwd, back

    def resid(x, lam_):
        # -Δ_h u = Δ_h d; flux form keeps the constant σ out of the sums
        fwd, back = one_sided(x)
        return -apply_laplacian(grid, full(x))[idx] + hn(x) * 0.5 * (fwd ** 2 + back ** 2) \
            - lam_ * fv[idx]

    def merit(x, lam_):
        return float(np.max(np.abs(resid(x, lam_) / (1.0 + hn(x)))))

    def newton(x, lam_, iters=max_iter):
        F = resid(x, lam_)
        m0 = merit(x, lam_)
        scale = max(1.0, lam_ * float(np.max(fv)))
        for it in range(1, iters + 1):
            if m0 <= 1e-12 * scale:
                return x, it - 1, True
            fwd, back = one_sided(x)
            hx = hn(x)
            # Jacobian in u (differences of u are minus those of d), then negated
            dd = di + hn_prime(x) * 0.5 * (fwd ** 2 + back ** 2) + hx * (fwd - back) / h
            cu = up - hx * fwd / h
            cl = lo + hx * back / h
            if ball:
                # ghost node d_{-1} = d_1 doubles the coupling to d_1
                cu[0] = up[0] - 2.0 * hx[0] * fwd[0] / h
                dd[0] = di[0] + hn_prime(x[:1])[0] * fwd[0] ** 2 + 2.0 * hx[0] * fwd[0] / h
                cl[0] = 0.0
            step_dir = solve_banded((1, 1), _banded(-cl, -dd, -cu), -F)
            # fraction-to-boundary towards the singular level: u rises where d falls
            room = np.where(x > gap_n, 0.5 * (x - gap_n), 1.0 / n)
            room = np.maximum(room, 1.0 / n)
            fall = np.where(step_dir < 0, -step_dir, 0.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                cap = np.min(np.where(fall > 0, room / fall, np.inf))
            step = min(1.0, float(cap))
            for _ in range(MAX_BACKTRACK):
                xn = np.minimum(x + step * step_dir, sig)
                mn = merit(xn, lam_)
                if mn <= (1.0 - 1e-4 * step) * m0:
                    break
                step *= 0.5
            else:
                return x, it, m0 <= 1e-8 * scale
            moved = float(np.max(np.abs(xn - x) / np.maximum(np.abs(x), 1e-300)))
            x, m0 = xn, mn
            F = resid(x, lam_)
            if moved <= 1e-15:
                return x, it, m0 <= 1e-8 * scale
        return x, iters, m0 <= 1e-8 * scale

    z = linear_solution(grid, fv)[idx]
    zmax = float(np.max(z)) if np.max(z) > 0 else 1.0
    if u_init is not None:
        x = sig - np.asarray(u_init, dtype=float)[idx]
        lam_now = lam
        x, its, ok = newton(x, lam)
        total = its
        path = [lam]
    else:
        lam_now = min(lam, 0.25 * sig / zmax)
        x = sig - lam_now * z
        x, its, ok = newton(x, lam_now)
        total = its
        path = [lam_now]
        dlam = lam_now
        while ok and lam_now < lam:
            target = min(lam, lam_now + dlam)
            xt, its, okt = newton(x.copy(), target, min(max_iter, CONTINUATION_ITER))
            total += its
            if okt:
                x, lam_now = xt, target
                path.append(target)
                dlam *= 1.5
            else:
                dlam *= 0.25
                if dlam < CONTINUATION_MIN_STEP * lam:
                    ok = False
    if not ok:
        raise ConvergenceFailure("direct quasilinear Newton failed", v=sig - full(x),
                                 report={"lambda_reached": lam_now, "iterations": total})
    sol = BvpSolution(grid=grid, lam=float(lam), v=np.zeros(grid.m), f=fv, route="direct")
    sol.gap = full(x)
    sol.u = sig - sol.gap
    t = transform if transform is not None else Transform(nl)
    sol.v = t.L - t._psi_deficit_gap(np.clip(sol.gap, 0.0, sig))
    sol.v[[0, -1] if grid.geometry == "interval" else [-1]] = 0.0
    sol.n_schedule_used = [float(n)]
    sol.newton_iterations = [int(total)]
    sol.residual_inf = merit(x, lam)
    sol.notes.append(f"continuation steps: {len(path)}")
    return sol


def ceiling_resolved(t: Transform) -> bool:
    """Whether v = ψ(u) keeps enough digits near L to see contact with σ.

    When h grows faster than 1/(σ - s) the deficit L - ψ decays like
    exp(-H), and λ a few percent below the threshold already puts ψ(max u)
    within rounding of L, and with √h not integrable large λ saturates v
    at L although u stays below σ. Such problems go through the direct route.
    """
    return t.source.gamma_effective <= 1.0


def solve_auto(t: Transform, lam: float, f, grid: Grid, **solve_kw) -> BvpSolution:
    """Transformed solve, or the direct route where the transform cannot resolve contact.

    In the direct case a converged solution lies strictly below σ; when the
    direct Newton finds none, the transformed solve supplies the plateau,
    whose extent is then only resolved up to the digits v keeps.
    """
    if ceiling_resolved(t):
        return solve_semilinear(t, lam, f, grid, **solve_kw)
    try:
        return solve_quasilinear_direct(t.source, lam, f, grid, untruncated_level(t.source),
                                        transform=t)
    except ConvergenceFailure as exc:
        sol = solve_semilinear(t, lam, f, grid, **solve_kw)
        sol.notes.append("no solution below sigma from the direct route "
                         f"(reached lambda={exc.report.get('lambda_reached')!r}); "
                         "plateau taken from the transformed route")
        return sol


def untruncated_level(nl: Nonlinearity) -> float:
    """Largest n with h'(σ_n) ≤ 1e300: the direct route's stand-in for n = ∞."""
    lo, hi = -700.0, math.log(nl.sigma)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _h_prime_gap(nl, math.exp(mid)) > H_PRIME_CEILING:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    return float(nl.h_gap(math.exp(hi)))


def _gap_n(nl: Nonlinearity, n: float) -> float:
    """σ - σ_n, computed without cancellation for power laws."""
    if n <= float(nl.h(0.0)):
        return nl.sigma
    if nl.kind == "power":
        return (nl.A / n) ** (1.0 / nl.gamma)
    return nl.sigma - _sigma_n_plain(nl, n)


def _h_prime_gap(nl: Nonlinearity, d):
    """h'(σ - d) from the gap d."""
    d = np.asarray(d, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if nl.kind == "power":
            return nl.A * nl.gamma * d ** (-nl.gamma - 1.0)
        st, ht = nl.s_table, nl.h_table
        s = nl.sigma - d
        j = np.clip(np.searchsorted(st, s, side="right") - 1, 0, st.size - 2)
        inner = (ht[j + 1] - ht[j]) / (st[j + 1] - st[j])
        tail = nl.tail_gamma * nl.h_gap(d) / np.maximum(d, 0.0)
        return np.where(d >= nl.sigma - st[-1], inner, tail)
