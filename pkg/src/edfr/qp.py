"""Separable convex quadratic programs with full multiplier recovery.

Programs have a diagonal Hessian, box bounds, linear equalities and two-sided
linear inequalities. The sign convention for the multipliers is fixed by the
stationarity condition

    h*x + g - A_eq^T y + G^T (z_hi - z_lo) + (w_hi - w_lo) = 0

so that ``y`` is the price of an equality written as ``supply - demand = 0``.

An interior-point solve locates the optimum; an active-set polish then
re-solves the KKT system of the identified active set exactly, which makes the
multipliers consistent to rounding error instead of to the interior-point
tolerance.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import clarabel
import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DegenerateDualsWarning, DimensionMismatch, Infeasible, MaxIterations

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-6
_IPM_TOL = 1e-10
_DENSE_LSTSQ_LIMIT = 3000


@dataclass(frozen=True)
class QuadProgram:
    """``min 1/2 x^T diag(h) x + g^T x + const`` over bounds, equalities and ranged rows."""

    h: np.ndarray
    g: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    G: sp.csr_matrix
    g_lo: np.ndarray
    g_hi: np.ndarray
    const: float = 0.0

    def __post_init__(self):
        n = len(self.h)
        for name in ("g", "lo", "hi"):
            if len(getattr(self, name)) != n:
                raise DimensionMismatch(f"{name} has length {len(getattr(self, name))}, expected {n}")
        if self.A_eq.shape != (len(self.b_eq), n):
            raise DimensionMismatch(f"A_eq has shape {self.A_eq.shape}")
        if self.G.shape != (len(self.g_lo), n) or len(self.g_hi) != len(self.g_lo):
            raise DimensionMismatch(f"G has shape {self.G.shape}")
        if np.any(self.h < 0):
            raise ValueError("objective must be convex (h >= 0)")

    @property
    def n(self) -> int:
        return len(self.h)

    def objective(self, x) -> float:
        return float(0.5 * np.dot(self.h * x, x) + np.dot(self.g, x) + self.const)


def make_program(h, g, lo, hi, A_eq=None, b_eq=None, G=None, g_lo=None, g_hi=None, const=0.0) -> QuadProgram:
    h = np.asarray(h, dtype=float)
    n = len(h)
    A_eq = sp.csr_matrix((0, n)) if A_eq is None else sp.csr_matrix(A_eq, dtype=float)
    G = sp.csr_matrix((0, n)) if G is None else sp.csr_matrix(G, dtype=float)
    b_eq = np.zeros(A_eq.shape[0]) if b_eq is None else np.asarray(b_eq, dtype=float)
    g_lo = np.full(G.shape[0], -np.inf) if g_lo is None else np.asarray(g_lo, dtype=float)
    g_hi = np.full(G.shape[0], np.inf) if g_hi is None else np.asarray(g_hi, dtype=float)
    return QuadProgram(h, np.asarray(g, dtype=float), np.asarray(lo, dtype=float),
                       np.asarray(hi, dtype=float), A_eq, b_eq, G, g_lo, g_hi, float(const))


@dataclass(frozen=True)
class QPSolution:
    x: np.ndarray
    y: np.ndarray
    z_lo: np.ndarray
    z_hi: np.ndarray
    w_lo: np.ndarray
    w_hi: np.ndarray
    objective: float
    polished: bool
    iterations: int
    residuals: dict = field(default_factory=dict)

    @property
    def kkt_residual(self) -> float:
        return max(self.residuals.values()) if self.residuals else float("nan")


def kkt_residual(program: QuadProgram, sol: QPSolution) -> dict:
    """Absolute violation of each KKT block: stationarity, primal and dual feasibility, complementarity."""
    p = program
    x = sol.x
    if len(x) != p.n or len(sol.y) != len(p.b_eq) or len(sol.z_lo) != len(p.g_lo):
        raise DimensionMismatch("solution does not match program dimensions")
    grad = p.h * x + p.g - p.A_eq.T @ sol.y + p.G.T @ (sol.z_hi - sol.z_lo) + sol.w_hi - sol.w_lo
    Gx = p.G @ x
    viol_eq = p.A_eq @ x - p.b_eq

    def excess(v):
        return float(np.max(v, initial=0.0))

    def slack_product(mult, slack):
        ok = np.isfinite(slack)
        if np.any(mult[~ok] != 0):
            return np.inf
        return float(np.max(np.abs(mult[ok] * slack[ok]), initial=0.0))

    return {
        "stationarity": float(np.max(np.abs(grad), initial=0.0)),
        "primal_equality": float(np.max(np.abs(viol_eq), initial=0.0)),
        "primal_inequality": max(excess(Gx - p.g_hi), excess(p.g_lo - Gx)),
        "primal_bounds": max(excess(x - p.hi), excess(p.lo - x)),
        "dual_feasibility": max(excess(-sol.z_lo), excess(-sol.z_hi), excess(-sol.w_lo), excess(-sol.w_hi)),
        "complementarity": max(
            slack_product(sol.z_hi, p.g_hi - Gx),
            slack_product(sol.z_lo, Gx - p.g_lo),
            slack_product(sol.w_hi, p.hi - x),
            slack_product(sol.w_lo, x - p.lo),
        ),
    }


def lagrangian(program: QuadProgram, sol: QPSolution) -> float:
    """Lagrangian at (primal, multipliers); equals the objective when complementarity holds."""
    p, x = program, sol.x
    Gx = p.G @ x

    def pair(mult, slack):
        ok = mult != 0
        return float(np.dot(mult[ok], slack[ok]))

    return (p.objective(x)
            - float(np.dot(sol.y, p.A_eq @ x - p.b_eq))
            - pair(sol.z_hi, p.g_hi - Gx) - pair(sol.z_lo, Gx - p.g_lo)
            - pair(sol.w_hi, p.hi - x) - pair(sol.w_lo, x - p.lo))


# -- interior point ---------------------------------------------------------

def _ipm(h, g, lo, hi, A_eq, b_eq, G, g_lo, g_hi, max_iter):
    """Solve with Clarabel; returns (x, y, z_lo, z_hi, w_lo, w_hi, iterations)."""
    n = len(h)
    m_e, m_i = A_eq.shape[0], G.shape[0]
    up_r, lo_r = np.isfinite(g_hi), np.isfinite(g_lo)
    up_b, lo_b = np.isfinite(hi), np.isfinite(lo)
    eye = sp.identity(n, format="csr")
    A = sp.vstack([A_eq, G[up_r], -G[lo_r], eye[up_b], -eye[lo_b]], format="csc")
    b = np.concatenate([b_eq, g_hi[up_r], -g_lo[lo_r], hi[up_b], -lo[lo_b]])
    scale = max(1.0, float(np.max(np.abs(b), initial=0.0)))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = settings.tol_gap_rel = _IPM_TOL
    settings.tol_feas = _IPM_TOL
    settings.tol_ktratio = 1e-8
    settings.max_iter = max_iter
    settings.presolve_enable = False
    P = sp.diags(h, format="csc")
    cones = []
    if m_e:
        cones.append(clarabel.ZeroConeT(m_e))
    n_nonneg = A.shape[0] - m_e
    if n_nonneg:
        cones.append(clarabel.NonnegativeConeT(n_nonneg))
    if not cones:
        # unconstrained: the objective is bounded only if h > 0 wherever g != 0
        x = np.where(h > 0, -g / np.where(h > 0, h, 1.0), 0.0)
        z = np.zeros(0)
        return x, z, np.zeros(m_i), np.zeros(m_i), np.zeros(n), np.zeros(n), 0
    sol = clarabel.DefaultSolver(P, g, A, b, cones, settings).solve()
    status = str(sol.status)
    if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        raise Infeasible("no point satisfies the constraints")
    if status == "MaxIterations":
        raise MaxIterations(f"interior point stopped after {sol.iterations} iterations")
    if status not in ("Solved", "AlmostSolved", "InsufficientProgress"):
        raise Infeasible(f"interior point failed with status {status}")
    x = np.asarray(sol.x)
    z = np.asarray(sol.z)
    if status == "InsufficientProgress":
        log.warning("interior point reported insufficient progress (scale %.3g)", scale)
    k = m_e
    y = -z[:k]
    z_hi = np.zeros(m_i)
    z_hi[up_r] = z[k:k + up_r.sum()]
    k += up_r.sum()
    z_lo = np.zeros(m_i)
    z_lo[lo_r] = z[k:k + lo_r.sum()]
    k += lo_r.sum()
    w_hi = np.zeros(n)
    w_hi[up_b] = z[k:k + up_b.sum()]
    k += up_b.sum()
    w_lo = np.zeros(n)
    w_lo[lo_b] = z[k:k + lo_b.sum()]
    return x, y, z_lo, z_hi, w_lo, w_hi, int(sol.iterations)


# -- active-set polish --------------------------------------------------------

def _solve_kkt(hF, E, rhs_x, rhs_c):
    """Solve [[diag(hF), E^T], [E, 0]] [x; u] = [rhs_x; rhs_c]. Returns (x, u, singular)."""
    nF, m = len(hF), E.shape[0]
    K = sp.bmat([[sp.diags(hF), E.T], [E, None]], format="csc")
    rhs = np.concatenate([rhs_x, rhs_c])
    if nF + m == 0:
        return np.zeros(0), np.zeros(0), False
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", spla.MatrixRankWarning)
            lu = spla.splu(K)
            sol = lu.solve(rhs)
        if np.all(np.isfinite(sol)):
            # reject near-singular factorizations whose refinement diverges
            if np.max(np.abs(K @ sol - rhs), initial=0.0) <= 1e-8 * max(1.0, np.max(np.abs(rhs), initial=0.0)):
                return sol[:nF], sol[nF:], False
    except (RuntimeError, spla.MatrixRankWarning):
        pass
    if nF + m > _DENSE_LSTSQ_LIMIT:
        return None, None, True
    sol, *_ = scipy.linalg.lstsq(K.toarray(), rhs, lapack_driver="gelsd")
    return sol[:nF], sol[nF:], True


def _polish(p: QuadProgram, x0, duals0, feas_tol):
    """Refine an interior-point solution by solving the KKT system on its active set."""
    y0, zl0, zh0, wl0, wh0 = duals0
    n = p.n
    Gx = p.G @ x0
    # a constraint is taken active when its multiplier exceeds its slack
    row_hi = (zh0 > p.g_hi - Gx) & np.isfinite(p.g_hi)
    row_lo = (zl0 > Gx - p.g_lo) & np.isfinite(p.g_lo) & ~row_hi
    b_hi = (wh0 > p.hi - x0) & np.isfinite(p.hi)
    b_lo = (wl0 > x0 - p.lo) & np.isfinite(p.lo) & ~b_hi
    degenerate = False

    for _ in range(8):
        fixed = b_hi | b_lo
        free = ~fixed
        if np.any(p.h[free] <= 0):
            return None
        xf = np.where(b_hi, p.hi, np.where(b_lo, p.lo, 0.0))
        rows = np.flatnonzero(row_hi | row_lo)
        E_full = sp.vstack([p.A_eq, p.G[rows]], format="csr")
        rhs_full = np.concatenate([p.b_eq, np.where(row_hi[rows], p.g_hi[rows], p.g_lo[rows])])
        E = E_full[:, free]
        rhs_c = rhs_full - E_full[:, fixed] @ xf[fixed]
        rhs_x = -p.g[free]
        xF, u, singular = _solve_kkt(p.h[free], E, rhs_x, rhs_c)
        if xF is None:
            return None
        if singular and E.shape[0]:
            # a least-squares answer to an inconsistent active set is no solution at all
            gap = np.max(np.abs(E @ xF - rhs_c))
            if gap > max(feas_tol, 1e-9 * max(1.0, float(np.max(np.abs(rhs_c))))):
                return None
        degenerate |= singular
        x = xf.copy()
        x[free] = xF
        m_e = p.A_eq.shape[0]
        y = -u[:m_e]
        zs = u[m_e:]
        z_hi = np.zeros(len(p.g_hi))
        z_lo = np.zeros(len(p.g_lo))
        z_hi[rows] = np.where(row_hi[rows], zs, 0.0)
        z_lo[rows] = np.where(row_lo[rows], -zs, 0.0)
        res = p.h * x + p.g - p.A_eq.T @ y + p.G.T @ (z_hi - z_lo)
        w_hi = np.where(b_hi, np.maximum(-res, 0.0), 0.0)
        w_lo = np.where(b_lo, np.maximum(res, 0.0), 0.0)
        scale = max(1.0, float(np.max(np.abs(res), initial=0.0)))
        bad_bound_hi = b_hi & (-res < -1e-9 * scale)
        bad_bound_lo = b_lo & (res < -1e-9 * scale)
        bad_row_hi = row_hi & (z_hi < -1e-9 * scale)
        bad_row_lo = row_lo & (z_lo < -1e-9 * scale)
        Gx = p.G @ x
        viol_row_hi = (Gx > p.g_hi + feas_tol) & ~row_hi
        viol_row_lo = (Gx < p.g_lo - feas_tol) & ~row_lo
        viol_b_hi = (x > p.hi + feas_tol) & ~b_hi
        viol_b_lo = (x < p.lo - feas_tol) & ~b_lo
        changed = False
        for mask, bad in ((row_hi, bad_row_hi), (row_lo, bad_row_lo), (b_hi, bad_bound_hi), (b_lo, bad_bound_lo)):
            if bad.any():
                mask &= ~bad
                changed = True
        for mask, viol in ((row_hi, viol_row_hi), (row_lo, viol_row_lo), (b_hi, viol_b_hi), (b_lo, viol_b_lo)):
            if viol.any():
                mask |= viol
                changed = True
        if not changed:
            return x, (y, z_lo, z_hi, w_lo, w_hi), degenerate
    return None


def _fixed_var_duals(p: QuadProgram, x, y, z_lo, z_hi, w_lo, w_hi, fixed):
    res = p.h * x + p.g - p.A_eq.T @ y + p.G.T @ (z_hi - z_lo)
    w_hi = w_hi.copy()
    w_lo = w_lo.copy()
    w_hi[fixed] = np.maximum(-res[fixed], 0.0)
    w_lo[fixed] = np.maximum(res[fixed], 0.0)
    return w_lo, w_hi


def _solve_rows(p: QuadProgram, rows: np.ndarray, polish: bool, max_iter: int, feas_tol: float):
    """Solve the program keeping only inequality rows ``rows``; multipliers of other rows are zero."""
    n = p.n
    fixed = p.lo == p.hi
    free = ~fixed
    xf = np.where(fixed, p.lo, 0.0)
    G_r = p.G[rows]
    A_f = p.A_eq[:, free]
    b_f = p.b_eq - p.A_eq[:, fixed] @ xf[fixed]
    G_f = G_r[:, free]
    shift = G_r[:, fixed] @ xf[fixed]
    sub = make_program(p.h[free], p.g[free], p.lo[free], p.hi[free], A_f, b_f, G_f,
                       p.g_lo[rows] - shift, p.g_hi[rows] - shift)

    # an equality row with no free variables must already hold
    empty = np.asarray(abs(A_f).sum(axis=1)).ravel() == 0
    if np.any(np.abs(b_f[empty]) > feas_tol):
        raise Infeasible("equality constraint on fixed variables is violated")

    xs, ys, zl, zh, wl, wh, iters = _ipm(sub.h, sub.g, sub.lo, sub.hi, sub.A_eq, sub.b_eq,
                                         sub.G, sub.g_lo, sub.g_hi, max_iter)
    polished = False
    degenerate = False
    if polish:
        out = _polish(sub, xs, (ys, zl, zh, wl, wh), feas_tol)
        if out is not None:
            xs, (ys, zl, zh, wl, wh), degenerate = out
            polished = True
    x = xf.copy()
    x[free] = xs
    w_lo, w_hi = np.zeros(n), np.zeros(n)
    w_lo[free], w_hi[free] = wl, wh
    z_lo, z_hi = np.zeros(len(p.g_lo)), np.zeros(len(p.g_hi))
    z_lo[rows], z_hi[rows] = zl, zh
    w_lo, w_hi = _fixed_var_duals(p, x, ys, z_lo, z_hi, w_lo, w_hi, fixed)
    return x, ys, z_lo, z_hi, w_lo, w_hi, polished, degenerate, iters


def solve(program: QuadProgram, tol: float = DEFAULT_TOL, polish: bool = True, lazy_rows: bool = False,
          max_iter: int = 200, max_rounds: int = 50) -> QPSolution:
    """Solve ``program`` and return primal values, multipliers and the KKT residual report.

    With ``lazy_rows`` the inequality rows are introduced on demand: only
    rows violated by the current solution are added before re-solving, which
    keeps problems with many mostly slack line limits small.
    """
    p = program
    m_i = p.G.shape[0]
    feas_tol = 1e-9 * max(1.0, float(np.max(np.abs(p.b_eq), initial=0.0)))
    if lazy_rows and m_i:
        rows = np.zeros(0, dtype=int)
        for _ in range(max_rounds):
            out = _solve_rows(p, rows, polish, max_iter, feas_tol)
            Gx = p.G @ out[0]
            viol = np.flatnonzero((Gx > p.g_hi + feas_tol) | (Gx < p.g_lo - feas_tol))
            if viol.size == 0:
                break
            rows = np.union1d(rows, viol)
        else:
            raise MaxIterations("row generation did not settle")
    else:
        out = _solve_rows(p, np.arange(m_i), polish, max_iter, feas_tol)
    x, y, z_lo, z_hi, w_lo, w_hi, polished, degenerate, iters = out
    if degenerate:
        warnings.warn("active constraint gradients are linearly dependent; multipliers are not unique",
                      DegenerateDualsWarning, stacklevel=2)
    sol = QPSolution(x, y, z_lo, z_hi, w_lo, w_hi, p.objective(x), polished, iters)
    res = kkt_residual(p, sol)
    sol = QPSolution(x, y, z_lo, z_hi, w_lo, w_hi, p.objective(x), polished, iters, res)
    if sol.kkt_residual > tol:
        log.warning("KKT residual %.3e exceeds tolerance %.1e (%s)", sol.kkt_residual, tol,
                    max(res, key=res.get))
    return sol


@dataclass(frozen=True)
class NodalPrices:
    pi: np.ndarray


def nodal_prices(lam, mu_lo, mu_hi, network) -> NodalPrices:
    """Locational prices ``lam * 1 + H^T (mu_lo - mu_hi)``; accepts one outcome or a stack of them."""
    lam = np.asarray(lam, dtype=float)
    mu_lo = np.asarray(mu_lo, dtype=float)
    mu_hi = np.asarray(mu_hi, dtype=float)
    L = network.n_lines
    if mu_lo.shape != mu_hi.shape or mu_lo.shape[-1:] != (L,):
        raise DimensionMismatch(f"line multipliers must have trailing dimension {L}")
    if lam.shape != mu_lo.shape[:-1]:
        raise DimensionMismatch("balance multiplier shape does not match line multipliers")
    pi = lam[..., None] + (mu_lo - mu_hi) @ network.shift_factors
    return NodalPrices(pi)
