"""Swing dynamics closed with the distributed primal-dual regulation controller.

State per outcome: phase angles ``theta``, frequency deviations ``omega``,
control prices ``pi``, line multipliers ``mu_hi``/``mu_lo`` and virtual
phases ``phi``. Each regulation generator sets its output from its own
``omega`` and ``pi``; the price and multiplier updates use only neighbouring
quantities through ``L``, ``C`` and ``B``.

At an equilibrium ``omega = 0``, the regulation outputs solve FR, ``-pi`` is
the vector of FR nodal prices and the line multipliers are FR's line duals.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .decomposition import solve_fr
from .errors import DimensionMismatch, InvalidParameters, NumericalBlowup
from .grid import GeneratorFleet, Network

log = logging.getLogger(__name__)

BLOWUP_NORM = 1e9


@dataclass(frozen=True)
class DynamicParams:
    M: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.M) <= 0) or np.any(np.asarray(self.D) <= 0):
            raise InvalidParameters("inertia and damping must be strictly positive")

    @classmethod
    def default(cls, n: int, M: float = 0.1, D: float = 1.0) -> "DynamicParams":
        return cls(np.full(n, M), np.full(n, D))


@dataclass(frozen=True)
class DfrGains:
    zeta_pi: np.ndarray
    zeta_mu_hi: np.ndarray
    zeta_mu_lo: np.ndarray
    chi_phi: np.ndarray

    def __post_init__(self):
        for name in ("zeta_pi", "zeta_mu_hi", "zeta_mu_lo", "chi_phi"):
            if np.any(np.asarray(getattr(self, name)) <= 0):
                raise InvalidParameters(f"gain {name} must be strictly positive")

    @classmethod
    def uniform(cls, n: int, n_lines: int, value: float = 1.0) -> "DfrGains":
        return cls(np.full(n, value), np.full(n_lines, value), np.full(n_lines, value), np.full(n, value))

    def scaled(self, factor: float) -> "DfrGains":
        return DfrGains(self.zeta_pi * factor, self.zeta_mu_hi * factor, self.zeta_mu_lo * factor,
                        self.chi_phi * factor)


@dataclass(frozen=True)
class DfrState:
    theta: np.ndarray
    omega: np.ndarray
    pi: np.ndarray
    mu_hi: np.ndarray
    mu_lo: np.ndarray
    phi: np.ndarray
    t: float = 0.0

    @classmethod
    def zeros(cls, n: int, n_lines: int) -> "DfrState":
        z = np.zeros(n)
        return cls(z, z.copy(), z.copy(), np.zeros(n_lines), np.zeros(n_lines), z.copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.omega, self.pi, self.mu_hi, self.mu_lo, self.phi])

    @classmethod
    def from_vector(cls, v, n: int, n_lines: int, t: float = 0.0) -> "DfrState":
        parts = np.split(np.asarray(v, dtype=float), np.cumsum([n, n, n, n_lines, n_lines]))
        return cls(*parts, t=t)


# -- controller ---------------------------------------------------------------

def _barrier_inverse(y, lo, hi, b, c, barrier, iters: int = 60):
    """Solve ``b + c x + barrier (1/(hi-x) - 1/(x-lo)) = y`` for ``x`` in ``(lo, hi)``.

    Newton steps safeguarded by a bracketing interval; the left side is
    strictly increasing so the root is unique.
    """
    a, z = lo.copy(), hi.copy()
    # start where the barrier term is comparable to the curvature term
    gap = np.minimum(0.25 * (hi - lo), np.sqrt(barrier / c))
    x = np.clip((y - b) / c, lo + gap, hi - gap)
    for _ in range(iters):
        u, w = hi - x, x - lo
        f = b + c * x + barrier * (1.0 / u - 1.0 / w) - y
        fp = c + barrier * (1.0 / (u * u) + 1.0 / (w * w))
        a = np.where(f < 0, x, a)
        z = np.where(f > 0, x, z)
        xn = x - f / fp
        xn = np.where((xn > a) & (xn < z), xn, 0.5 * (a + z))
        if np.max(np.abs(xn - x)) <= 1e-13 * (1.0 + np.max(np.abs(x))):
            return xn
        x = xn
    return x


def regulation_output(signal, fleet: GeneratorFleet, barrier: float = 0.0) -> np.ndarray:
    """Total regulation output ``[c_p'^{-1}(signal)]`` clipped to the capacity interval."""
    reg = fleet.regulation
    y = np.asarray(signal, dtype=float)
    lo, hi, b, c = reg.lower, reg.upper, reg.cost.b, reg.cost.c
    x = np.clip((y - b) / c, lo, hi)
    if barrier > 0:
        open_ = reg.present & (hi > lo)
        if np.any(open_):
            x = x.copy()
            x[open_] = _barrier_inverse(y[open_], lo[open_], hi[open_], b[open_], c[open_], barrier)
    return np.where(reg.present, x, 0.0)


def controller_output(state: DfrState, fleet: GeneratorFleet, q_p, barrier: float = 0.0) -> np.ndarray:
    """Recourse ``r = [c_p'^{-1}(-omega - pi)] - q_p`` within ``[q_lo - q_p, q_hi - q_p]``."""
    q_p = np.asarray(q_p, dtype=float)
    return regulation_output(-state.omega - state.pi, fleet, barrier) - np.where(fleet.regulation.present, q_p, 0.0)


# -- dynamics -----------------------------------------------------------------

def _project(y, x):
    """``[y]^+_x``: zero where the multiplier sits at zero and would decrease."""
    return np.where((x <= 0) & (y < 0), 0.0, y)


def dfr_derivatives(state: DfrState, network: Network, fleet: GeneratorFleet, q_b, q_p, d_s,
                    params: DynamicParams, gains: DfrGains, barrier: float = 0.0) -> DfrState:
    """Time derivative of the closed loop (swing equations plus controller)."""
    N, L = network.n_nodes, network.n_lines
    for name, v in (("theta", state.theta), ("omega", state.omega), ("pi", state.pi), ("phi", state.phi),
                    ("q_b", q_b), ("q_p", q_p), ("d_s", d_s)):
        if np.shape(v) != (N,):
            raise DimensionMismatch(f"{name} has shape {np.shape(v)}, expected ({N},)")
    if np.shape(state.mu_hi) != (L,) or np.shape(state.mu_lo) != (L,):
        raise DimensionMismatch("line multipliers must have one entry per line")
    return _derivs(state, network, fleet, np.asarray(q_b) + np.asarray(q_p) - np.asarray(d_s),
                   np.asarray(q_p, dtype=float), params, gains, barrier)


def _derivs(state, network, fleet, P, q_p, params, gains, barrier):
    loop = _ClosedLoop(network, fleet, P, q_p, params, gains, barrier)
    dv = loop(state.to_vector())
    return DfrState.from_vector(dv, network.n_nodes, network.n_lines, t=1.0)


class _ClosedLoop:
    """Right-hand side on the flat state vector, with all operators precomputed."""

    def __init__(self, network, fleet, P, q_p, params, gains, barrier):
        N, L = network.n_nodes, network.n_lines
        self.N, self.L = N, L
        self.Lap = np.asarray(network.laplacian)
        self.BCt = network.branch_matrix()
        self.CB = network.incidence * network.susceptance
        fin = np.isfinite(network.capacity)
        self.fin = fin
        self.f = np.where(fin, network.capacity, 0.0)
        self.P = P
        reg = fleet.regulation
        self.present = reg.present
        self.q_p = np.where(reg.present, q_p, 0.0)
        self.lo, self.hi, self.b, self.c = reg.lower, reg.upper, reg.cost.b, reg.cost.c
        self.open = reg.present & (reg.upper > reg.lower) if barrier > 0 else np.zeros(N, dtype=bool)
        self.any_open = bool(self.open.any())
        self.barrier = barrier
        self.inv_M = 1.0 / params.M
        self.D = params.D
        self.g = gains
        self.cuts = np.cumsum([N, N, N, L, L])

    def output(self, signal):
        x = np.clip((signal - self.b) / self.c, self.lo, self.hi)
        if self.any_open:
            o = self.open
            x[o] = _barrier_inverse(signal[o], self.lo[o], self.hi[o], self.b[o], self.c[o], self.barrier)
        return np.where(self.present, x, 0.0)

    def recourse(self, v):
        N = self.N
        return self.output(-v[N:2 * N] - v[2 * N:3 * N]) - self.q_p

    def __call__(self, v):
        theta, omega, pi, mu_hi, mu_lo, phi = np.split(v, self.cuts)
        inj = self.P + self.recourse(v)
        g = self.g
        d_omega = (inj - self.D * omega - self.Lap @ theta) * self.inv_M
        d_pi = g.zeta_pi * (inj - self.Lap @ phi)
        d_phi = g.chi_phi * (self.Lap @ pi)
        if self.L:
            vflow = self.BCt @ phi
            up = vflow - self.f
            dn = -self.f - vflow
            d_mu_hi = g.zeta_mu_hi * np.where(self.fin, _project(up, mu_hi), 0.0)
            d_mu_lo = g.zeta_mu_lo * np.where(self.fin, _project(dn, mu_lo), 0.0)
            d_phi = d_phi - g.chi_phi * (self.CB @ (mu_hi - mu_lo))
        else:
            d_mu_hi = d_mu_lo = mu_hi
        return np.concatenate([omega, d_omega, d_pi, d_mu_hi, d_mu_lo, d_phi])


# -- reports ------------------------------------------------------------------

@dataclass(frozen=True)
class EquilibriumReport:
    omega_inf: float
    recourse_deviation: float
    virtual_flow_deviation: float
    line_violation: float
    derivative_norm: float
    converged: bool
    stop_reason: str
    t_final: float


def fr_prime_objective(state: DfrState, fleet: GeneratorFleet, q_p, params: DynamicParams, barrier: float = 0.0) -> float:
    x = q_p + controller_output(state, fleet, q_p, barrier)
    reg = fleet.regulation
    return float(np.sum(np.where(reg.present, reg.cost(x), 0.0)) + 0.5 * np.sum(params.D * state.omega**2))


def fr_prime_kkt_residual(state: DfrState, network: Network, fleet: GeneratorFleet, q_b, q_p, d_s,
                          params: DynamicParams, barrier: float = 0.0) -> dict:
    """KKT violation of the frequency-aware FR reformulation at a controller state.

    Primal variables are the controller's outputs, ``omega``, ``phi`` and the
    line flows ``B C^T theta``; multipliers are ``omega`` (swing balance),
    ``-pi`` (virtual balance) and the line multipliers.
    """
    P = np.asarray(q_b) + np.asarray(q_p) - np.asarray(d_s)
    r = controller_output(state, fleet, q_p, barrier)
    inj = P + r
    Lap = network.laplacian
    out = {
        # the flow variables are free, so the swing multiplier must be uniform
        "omega_uniform": float(np.ptp(state.omega)) if len(state.omega) else 0.0,
        "swing_balance": float(np.max(np.abs(inj - params.D * state.omega - Lap @ state.theta))),
        "virtual_balance": float(np.max(np.abs(inj - Lap @ state.phi))),
        "dual_feasibility": float(max(0.0, -np.min(state.mu_hi, initial=0.0), -np.min(state.mu_lo, initial=0.0))),
    }
    if network.n_lines:
        vflow = network.branch_matrix() @ state.phi
        f = network.capacity
        fin = np.isfinite(f)
        out["line_feasibility"] = float(np.max(np.maximum(np.abs(vflow[fin]) - f[fin], 0.0), initial=0.0))
        out["complementarity"] = float(max(
            np.max(np.abs(state.mu_hi[fin] * (vflow[fin] - f[fin])), initial=0.0),
            np.max(np.abs(state.mu_lo[fin] * (-f[fin] - vflow[fin])), initial=0.0),
        ))
        out["phi_stationarity"] = float(np.max(np.abs(
            Lap @ state.pi - network.incidence @ (network.susceptance * (state.mu_hi - state.mu_lo)))))
    else:
        out["phi_stationarity"] = float(np.max(np.abs(Lap @ state.pi)))
    return out


def rest_state(network: Network, fleet: GeneratorFleet, q_b, q_p, d_s) -> DfrState:
    """Alias of :func:`equilibrium_from_fr`, used for the pre-disturbance operating point."""
    return equilibrium_from_fr(network, fleet, q_b, q_p, d_s)


def equilibrium_from_fr(network: Network, fleet: GeneratorFleet, q_b, q_p, d_s) -> DfrState:
    """Controller state assembled from the FR primal-dual optimum."""
    fr = solve_fr(network, fleet, q_b, q_p, d_s)
    inj = np.asarray(q_b) + np.asarray(q_p) + fr.r - np.asarray(d_s)
    phi = network.laplacian_pinv @ inj
    mu_hi, mu_lo = fr.mu_hi.copy(), fr.mu_lo.copy()
    if network.n_lines:
        # interior-point multipliers on slack lines are tiny but positive; the
        # projected dynamics only rest when they are exactly zero
        flow = network.branch_matrix() @ phi
        f = network.capacity
        slack = 1e-7 * np.maximum(1.0, np.where(np.isfinite(f), f, 1.0))
        mu_hi[~(flow >= f - slack)] = 0.0
        mu_lo[~(flow <= -f + slack)] = 0.0
    return DfrState(theta=phi.copy(), omega=np.zeros(network.n_nodes), pi=-fr.prices(network),
                    mu_hi=mu_hi, mu_lo=mu_lo, phi=phi)


# -- integration ----------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    omega: np.ndarray
    r: np.ndarray
    mu_hi: np.ndarray
    mu_lo: np.ndarray
    objective: np.ndarray


@dataclass(frozen=True)
class SimulationResult:
    trajectory: Trajectory
    final: DfrState
    report: EquilibriumReport
    r_fr: np.ndarray
    settings: dict = field(default_factory=dict)


def simulate(network: Network, fleet: GeneratorFleet, q_b, q_p, d_s, params: DynamicParams | None = None,
             gains: DfrGains | None = None, dt: float = 1e-3, T: float = 60.0, barrier: float = 1e-4,
             initial: DfrState | None = None, record_every: int | None = None,
             deriv_tol: float = 1e-6) -> SimulationResult:
    """Fixed-step RK4 integration with the multipliers re-projected onto the orthant after every step.

    Integration stops once the sup norm of the state derivative falls below
    ``deriv_tol`` or at ``T``; the report states which happened.
    """
    if dt <= 0 or T <= 0:
        raise InvalidParameters("dt and T must be positive")
    if barrier < 0:
        raise InvalidParameters("barrier coefficient must be nonnegative")
    N, L = network.n_nodes, network.n_lines
    params = params or DynamicParams.default(N)
    gains = gains or DfrGains.uniform(N, L)
    q_b, q_p, d_s = (np.asarray(v, dtype=float) for v in (q_b, q_p, d_s))
    state = initial or DfrState.zeros(N, L)
    dfr_derivatives(state, network, fleet, q_b, q_p, d_s, params, gains, barrier)
    P = q_b + q_p - d_s
    n_steps = int(np.ceil(T / dt - 1e-9))
    record_every = record_every or max(1, n_steps // 2000)
    mu_slice = slice(3 * N, 3 * N + 2 * L)

    f = _ClosedLoop(network, fleet, P, q_p, params, gains, barrier)

    def project(v):
        v[mu_slice] = np.maximum(v[mu_slice], 0.0)
        return v

    rec_t, rec_w, rec_r, rec_mh, rec_ml, rec_obj = [], [], [], [], [], []

    reg = fleet.regulation

    def record(v, t):
        omega = v[N:2 * N]
        r = f.recourse(v)
        rec_t.append(t)
        rec_w.append(omega.copy())
        rec_r.append(r)
        rec_mh.append(v[3 * N:3 * N + L].copy())
        rec_ml.append(v[3 * N + L:3 * N + 2 * L].copy())
        cost = np.where(reg.present, reg.cost(q_p + r), 0.0).sum()
        rec_obj.append(float(cost + 0.5 * np.sum(params.D * omega**2)))

    v = state.to_vector()
    t = float(state.t)
    record(v, t)
    reason = "horizon"
    deriv_norm = float(np.max(np.abs(f(v)), initial=0.0))
    for step in range(1, n_steps + 1):
        k1 = f(v)
        k2 = f(project(v + 0.5 * dt * k1))
        k3 = f(project(v + 0.5 * dt * k2))
        k4 = f(project(v + dt * k3))
        v = project(v + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
        t = state.t + step * dt
        if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > BLOWUP_NORM:
            raise NumericalBlowup(f"state norm exceeded {BLOWUP_NORM:g} at t = {t:.4g}; reduce dt")
        if step % record_every == 0:
            record(v, t)
        if step % 10 == 0 or step == n_steps:
            deriv_norm = float(np.max(np.abs(f(v)), initial=0.0))
            if deriv_norm <= deriv_tol:
                reason = "derivative"
                break
    if rec_t[-1] != t:
        record(v, t)
    final = DfrState.from_vector(v, N, L, t)
    deriv_norm = float(np.max(np.abs(f(v)), initial=0.0))

    r_fr = solve_fr(network, fleet, q_b, q_p, d_s).r
    r_T = controller_output(final, fleet, q_p, barrier)
    vflow = network.branch_matrix() @ final.phi if L else np.zeros(0)
    phys = network.shift_factors @ (P + r_T) if L else np.zeros(0)
    fin = np.isfinite(network.capacity)
    report = EquilibriumReport(
        omega_inf=float(np.max(np.abs(final.omega))),
        recourse_deviation=float(np.max(np.abs(r_T - r_fr))),
        virtual_flow_deviation=float(np.max(np.abs(phys - vflow), initial=0.0)),
        line_violation=float(np.max(np.maximum(np.abs(vflow[fin]) - network.capacity[fin], 0.0), initial=0.0)),
        derivative_norm=deriv_norm,
        converged=reason == "derivative",
        stop_reason=reason,
        t_final=t,
    )
    log.info("DFR simulation stopped at t=%.3f s (%s), |omega|=%.2e", t, reason, report.omega_inf)
    traj = Trajectory(np.array(rec_t), np.array(rec_w), np.array(rec_r), np.array(rec_mh), np.array(rec_ml),
                      np.array(rec_obj))
    settings = {"dt": dt, "T": T, "barrier": barrier, "M": params.M.tolist(), "D": params.D.tolist()}
    return SimulationResult(traj, final, report, r_fr, settings)
