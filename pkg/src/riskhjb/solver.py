"""Backward solvers for the exponentially transformed equation, by policy
improvement and by a direct fused sweep, plus the scale transform and an
a-posteriori discrete residual.

Scheme: implicit Euler in time; second-order central diffusion; first-order
drift upwinded on the sign of f_a per axis; the finite-activity nonlocal term
lagged one time level. Boundary rows impose zero second derivative (linear
extrapolation), which drops the normal diffusion and makes the one-sided
into-domain difference the correct drift stencil for either drift sign.

The policy update minimizes each node's own discrete row objective exactly.
For every sign branch of the drift the one-sided gradient is a fixed vector,
so the branch problem is the convex ell-problem at that gradient; branches
are reconciled by sign consistency, and the rare switching nodes are
re-solved with explicit sign constraints appended to the trading polytope.
Together with the M-matrix structure of the implicit step and nonnegative
lagged-term weights under the recorded time-step bound, this makes the
discrete iteration monotone, not just approximately so.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.linalg import solve_banded
from scipy import sparse
from scipy.sparse.linalg import spsolve

from . import hamiltonian as ham
from .grid import (Lattice, PolicyField, ValueField, TRANSFORMED,
                   RISK_SENSITIVE, gradient, nonlocal_d_a)
from .model import ConstraintSet, MarketModel, a0_sup_abs, interior_point


class SolverError(RuntimeError):
    pass


class StabilityViolation(SolverError):
    """dt * (theta sup|g| + total jump intensity) >= 1."""


class NonConvergence(SolverError):
    pass


class NonPositiveValue(SolverError):
    """A transformed-scale field failed strict positivity."""


IMPLICIT_EULER = "implicit_euler"
LAGGED_EXPLICIT = "lagged_explicit"


@dataclass
class PolicyIterationConfig:
    max_outer: int = 30
    outer_tol: float = 1e-8
    scheme: str = IMPLICIT_EULER
    nonlocal_treatment: str = LAGGED_EXPLICIT
    monotonicity_slack: float = 1e-8 + 10 * np.finfo(float).eps
    minimizer_tol: float = 1e-9
    inner_tol: float = 1e-11     # direct solve: per-level fixed-point tolerance
    max_inner: int = 40

    def __post_init__(self):
        if self.outer_tol <= 0.0:
            raise ValueError("outer_tol must be positive")
        if self.scheme != IMPLICIT_EULER:
            raise ValueError(f"unsupported scheme {self.scheme!r}")
        if self.nonlocal_treatment != LAGGED_EXPLICIT:
            raise ValueError(f"unsupported nonlocal treatment {self.nonlocal_treatment!r}")
        if self.monotonicity_slack < 0.0:
            raise ValueError("monotonicity_slack must be >= 0")


@dataclass
class SolveReport:
    method: str = ""
    converged: bool = False
    outer_iterations: int = 0
    sup_changes: list = dc_field(default_factory=list)
    monotonicity_violations: int = 0
    monotonicity_max: float = 0.0
    bound_violations: int = 0
    value_min: float = np.nan
    bound_excess_max: float = 0.0
    residual_interior_max: float = np.nan
    residual_interior_median: float = np.nan
    stability_margin: float = 0.0
    clamped_interpolations: int = 0
    centered_fallback_nodes: int = 0
    sign_constrained_nodes: int = 0
    kkt_max: float = 0.0
    wall_time: float = 0.0

    def to_dict(self):
        out = {}
        for k, v in self.__dict__.items():
            if isinstance(v, np.floating):
                v = float(v)
            elif isinstance(v, np.integer):
                v = int(v)
            elif isinstance(v, list):
                v = [float(x) for x in v]
            out[k] = v
        return out


# -- discrete operator coefficients ----------------------------------------

class _LevelOperator:
    """Coefficients of the spatial operator A at one time level for a given
    policy: A u = diffusion + upwinded drift + theta g u (+ cross term).
    Shared by the implicit step assembly and the residual evaluation so the
    two can never drift apart."""

    def __init__(self, model: MarketModel, lattice: Lattice, t, h):
        pts = lattice.points()
        self.lattice = lattice
        self.theta = model.theta
        self.G = ham.g(t, pts, h, model)                      # (N,)
        self.F = ham.f_a(t, pts, h, model)                    # (N, n)
        Lam = model.factor.Lambda(t, pts)                     # (N, n, M)
        LL = Lam @ np.swapaxes(Lam, -1, -2)                   # (N, n, n)
        n = lattice.n
        shape = lattice.num_nodes
        self.diag = self.theta * self.G.copy()
        self.upper = []
        self.lower = []
        for ax in range(n):
            dx = lattice.dx[ax]
            D = 0.5 * LL[:, ax, ax].reshape(shape)
            F = self.F[:, ax].reshape(shape)
            up = np.zeros(shape)
            lo = np.zeros(shape)
            dg = np.zeros(shape)
            sl_int = [slice(None)] * n
            sl_int[ax] = slice(1, -1)
            sl_int = tuple(sl_int)
            Fp = np.maximum(F, 0.0)
            Fm = np.maximum(-F, 0.0)
            up[sl_int] = (D[sl_int] / dx ** 2 + Fp[sl_int] / dx)
            lo[sl_int] = (D[sl_int] / dx ** 2 + Fm[sl_int] / dx)
            dg[sl_int] = (-2.0 * D[sl_int] / dx ** 2 - (Fp + Fm)[sl_int] / dx)
            sl_l = [slice(None)] * n
            sl_l[ax] = 0
            sl_l = tuple(sl_l)
            sl_r = [slice(None)] * n
            sl_r[ax] = -1
            sl_r = tuple(sl_r)
            up[sl_l] = F[sl_l] / dx          # one-sided into-domain drift
            dg[sl_l] = -F[sl_l] / dx
            lo[sl_r] = -F[sl_r] / dx
            dg[sl_r] = F[sl_r] / dx
            self.upper.append(up)
            self.lower.append(lo)
            self.diag = self.diag + dg.ravel()
        self.cross = None
        if n == 2 and np.any(LL[:, 0, 1] != 0.0):
            self.cross = LL[:, 0, 1].reshape(shape) / (4.0 * lattice.dx[0] * lattice.dx[1])

    def apply(self, u_flat):
        """A u, matrix-free."""
        lat = self.lattice
        u = np.asarray(u_flat, dtype=float).reshape(lat.num_nodes)
        out = (self.diag * u.ravel()).reshape(lat.num_nodes).copy()
        for ax in range(lat.n):
            up, lo = self.upper[ax], self.lower[ax]
            sl_hi = [slice(None)] * lat.n
            sl_hi[ax] = slice(0, -1)
            sl_hi = tuple(sl_hi)
            sl_hi_n = [slice(None)] * lat.n
            sl_hi_n[ax] = slice(1, None)
            sl_hi_n = tuple(sl_hi_n)
            out[sl_hi] += up[sl_hi] * u[sl_hi_n]
            out[sl_hi_n] += lo[sl_hi_n] * u[sl_hi]
        if self.cross is not None:
            c = self.cross
            out[1:-1, 1:-1] += c[1:-1, 1:-1] * (u[2:, 2:] - u[2:, :-2]
                                                - u[:-2, 2:] + u[:-2, :-2])
        return out.ravel()

    def matrix(self, dt):
        """I - dt A as a sparse matrix (2-D lattices)."""
        lat = self.lattice
        N = lat.total_nodes
        shape = lat.num_nodes
        idx = np.arange(N).reshape(shape)
        rows = [np.arange(N)]
        cols = [np.arange(N)]
        data = [1.0 - dt * self.diag]
        for ax in range(lat.n):
            sl_hi = [slice(None)] * lat.n
            sl_hi[ax] = slice(0, -1)
            sl_hi = tuple(sl_hi)
            sl_hi_n = [slice(None)] * lat.n
            sl_hi_n[ax] = slice(1, None)
            sl_hi_n = tuple(sl_hi_n)
            rows.append(idx[sl_hi].ravel())
            cols.append(idx[sl_hi_n].ravel())
            data.append(-dt * self.upper[ax][sl_hi].ravel())
            rows.append(idx[sl_hi_n].ravel())
            cols.append(idx[sl_hi].ravel())
            data.append(-dt * self.lower[ax][sl_hi_n].ravel())
        if self.cross is not None:
            c = self.cross
            base = idx[1:-1, 1:-1].ravel()
            cc = c[1:-1, 1:-1].ravel()
            for (di, dj, sgn) in ((1, 1, 1.0), (1, -1, -1.0), (-1, 1, -1.0), (-1, -1, 1.0)):
                rows.append(base)
                cols.append(base + di * shape[1] + dj)
                data.append(-dt * sgn * cc)
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        data = np.concatenate(data)
        return sparse.csr_matrix((data, (rows, cols)), shape=(N, N))

    def solve_step(self, dt, rhs):
        lat = self.lattice
        if lat.n == 1:
            N = lat.total_nodes
            up = self.upper[0].ravel()
            lo = self.lower[0].ravel()
            ab = np.zeros((3, N))
            ab[0, 1:] = -dt * up[:-1]
            ab[1, :] = 1.0 - dt * self.diag
            ab[2, :-1] = -dt * lo[1:]
            return solve_banded((1, 1), ab, rhs)
        return spsolve(self.matrix(dt), rhs)


def _stability_margin(model: MarketModel, dt, g_values):
    return dt * (model.theta * float(np.max(np.abs(g_values)))
                 + model.nu.total_intensity)


# -- exact per-node policy update ------------------------------------------

def _one_sided_diffs(u_level, lattice: Lattice):
    """Per-axis forward/backward differences with face overrides: at a face
    both directions reduce to the one-sided into-domain difference (the
    linear-extrapolation ghost makes them equal)."""
    u = np.asarray(u_level, dtype=float).reshape(lattice.num_nodes)
    n = lattice.n
    fwd, bwd, face = [], [], []
    for ax in range(n):
        dx = lattice.dx[ax]
        um = np.moveaxis(u, ax, 0)
        fw = np.empty_like(um)
        bw = np.empty_like(um)
        fw[:-1] = (um[1:] - um[:-1]) / dx
        fw[-1] = (um[-1] - um[-2]) / dx
        bw[1:] = (um[1:] - um[:-1]) / dx
        bw[0] = (um[1] - um[0]) / dx
        fc = np.zeros(um.shape, dtype=bool)
        fc[0] = True
        fc[-1] = True
        fwd.append(np.moveaxis(fw, 0, ax).ravel())
        bwd.append(np.moveaxis(bw, 0, ax).ravel())
        face.append(np.moveaxis(fc, 0, ax).ravel())
    return fwd, bwd, face


def _row_argmin(model: MarketModel, lattice: Lattice, t, u_level, config,
                warm=None):
    """Exact minimizer of the discrete row objective
    phi(h) = f_a(h) . (upwind one-sided gradient of u) + theta g(h) u
    at every node, via per-sign-branch convex solves."""
    u = np.asarray(u_level, dtype=float)
    if np.any(u <= 0.0):
        raise NonPositiveValue("transformed iterate lost positivity")
    pts = lattice.points()
    n, m, N = lattice.n, model.m, lattice.total_nodes
    theta = model.theta
    fwd, bwd, face = _one_sided_diffs(u, lattice)
    branches = list(itertools.product((1, -1), repeat=n))
    n_br = len(branches)
    vals = np.full((n_br, N), np.inf)
    hs = np.zeros((n_br, N, m))
    ps = np.zeros((n_br, N, n))
    cons = np.zeros((n_br, N), dtype=bool)
    kkt_max = 0.0
    for bi, sig in enumerate(branches):
        p = np.stack([fwd[ax] if sig[ax] > 0 else bwd[ax] for ax in range(n)],
                     axis=-1)
        q = -p / (theta * u[:, None])
        h_b, info = ham.minimize_ell_batch(t, pts, q, model,
                                           tol=config.minimizer_tol, init=warm)
        kkt_max = max(kkt_max, float(info["kkt"].max()))
        fa = ham.f_a(t, pts, h_b, model)
        vals[bi] = (np.einsum("ij,ij->i", fa, p)
                    + theta * ham.g(t, pts, h_b, model) * u)
        ok = np.ones(N, dtype=bool)
        for ax in range(n):
            tolr = 1e-11 * (1.0 + np.abs(fa[:, ax]))
            ok &= face[ax] | (sig[ax] * fa[:, ax] >= -tolr)
        cons[bi] = ok
        hs[bi] = h_b
        ps[bi] = p
    masked = np.where(cons, vals, np.inf)
    best = np.argmin(masked, axis=0)
    h_out = hs[best, np.arange(N)]
    unresolved = ~np.any(cons, axis=0)
    sign_constrained = 0
    centered = 0
    if np.any(unresolved):
        Lam = model.factor.Lambda(t, pts)
        Sig = model.assets.Sigma(t, pts)
        K = theta * (Lam @ np.swapaxes(Sig, -1, -2))     # (N, n, m)
        cdrift = model.factor.b(t, pts) - model.xi_sum(t, pts)
        U0, v0 = model.constraints.Upsilon, model.constraints.upsilon
        for i in np.nonzero(unresolved)[0]:
            best_val, best_h = np.inf, None
            for bi, sig in enumerate(branches):
                extra_cols, extra_v = [], []
                for ax in range(n):
                    if face[ax][i]:
                        continue
                    extra_cols.append(sig[ax] * K[i, ax])
                    extra_v.append(sig[ax] * cdrift[i, ax])
                if extra_cols:
                    cs = ConstraintSet(
                        Upsilon=np.column_stack([U0] + [c[:, None] for c in extra_cols]),
                        upsilon=np.concatenate([v0, extra_v]))
                else:
                    cs = model.constraints
                q_i = -ps[bi, i] / (theta * u[i])
                try:
                    res = ham.minimize_ell_constrained(
                        t, pts[i], q_i, model, cs, tol=config.minimizer_tol)
                except ham.InfeasibleProblem:
                    continue
                fa_i = ham.f_a(t, pts[i], res.h_star, model)
                val = float(fa_i @ ps[bi, i]
                            + theta * ham.g(t, pts[i], res.h_star, model) * u[i])
                if val < best_val:
                    best_val, best_h = val, res.h_star
                    kkt_max = max(kkt_max, res.kkt_residual)
            if best_h is not None:
                h_out[i] = best_h
                sign_constrained += 1
            else:
                p_c = gradient(u, lattice)[i]
                res = ham.minimize_ell(t, pts[i], -p_c / (theta * u[i]), model,
                                       tol=config.minimizer_tol)
                h_out[i] = res.h_star
                centered += 1
    stats = {"kkt_max": kkt_max, "sign_constrained": sign_constrained,
             "centered_fallback": centered}
    return h_out, stats


def _initial_policy(model: MarketModel, lattice: Lattice, h_init):
    nt1 = lattice.num_steps + 1
    N, m = lattice.total_nodes, model.m
    if h_init is None:
        h0 = np.zeros(m)
        U, v = model.constraints.Upsilon, model.constraints.upsilon
        if np.any(h0 @ U > v):
            center, _ = interior_point(
                model.constraints,
                [a.gamma for a in model.nu.asset_atoms()])
            if center is None:
                raise ham.InfeasibleProblem("no strictly feasible start")
            h0 = center
        return np.tile(h0, (nt1, N, 1))
    arr = np.asarray(h_init, dtype=float)
    if arr.shape == (m,):
        return np.tile(arr, (nt1, N, 1))
    if arr.shape == (nt1, N, m):
        return arr.copy()
    raise ValueError("h_init must be a length-m vector or a full policy array")


def _sweep(model: MarketModel, lattice: Lattice, policy_values, config):
    """One linear backward sweep under a fixed policy field."""
    nt = lattice.num_steps
    dt = lattice.dt
    times = lattice.times
    u = np.empty((nt + 1, lattice.total_nodes))
    u[nt] = 1.0
    clamps = 0
    margin = 0.0
    for k in range(nt - 1, -1, -1):
        da, diag = nonlocal_d_a(u[k + 1], times[k], model, lattice)
        clamps += diag["clamped"]
        rhs = u[k + 1] + dt * da
        op = _LevelOperator(model, lattice, times[k], policy_values[k])
        lm = _stability_margin(model, dt, op.G)
        margin = max(margin, lm)
        if lm >= 1.0:
            raise StabilityViolation(
                f"dt*(theta sup|g| + total intensity) = {lm:.3f} >= 1 at level {k}")
        u[k] = op.solve_step(dt, rhs)
    if np.any(u <= 0.0):
        raise NonPositiveValue("implicit sweep produced a non-positive value")
    return u, {"clamped": clamps, "stability_margin": margin}


def _bound_audit(model: MarketModel, lattice: Lattice, u):
    a0_bar = a0_sup_abs(model, lattice.bounds)
    bounds = np.exp(model.theta * a0_bar * (lattice.T - lattice.times))
    excess = u - bounds[:, None]
    # exact arithmetic preserves the bound; allow linear-solve roundoff when
    # the value sits exactly on it (max excess is still reported raw)
    slack = 64.0 * np.finfo(float).eps * bounds[:, None]
    viol = int(np.count_nonzero((excess > slack) | (u <= 0.0)))
    return viol, float(np.min(u)), float(np.max(excess))


def _residual_stats(vf: ValueField, pf: PolicyField, model, lattice):
    res = pide_residual(vf, pf, model, lattice)
    core = lattice.core_mask()
    interior = np.abs(res[:, core])
    return float(interior.max()), float(np.median(interior))


def policy_iteration_solve(model: MarketModel, lattice: Lattice,
                           config: PolicyIterationConfig = None, h_init=None):
    """Outer loop over policies, inner linear parabolic solves. Returns
    (transformed ValueField, PolicyField, SolveReport). The reported policy
    is the exact row argmin at the final value iterate."""
    config = config or PolicyIterationConfig()
    if model.n != lattice.n:
        raise ValueError("model and lattice dimensions differ")
    t0 = time.perf_counter()
    policy = _initial_policy(model, lattice, h_init)
    report = SolveReport(method="policy_iteration")
    u_prev = None
    times = lattice.times
    for outer in range(config.max_outer):
        u, sw = _sweep(model, lattice, policy, config)
        report.outer_iterations = outer + 1
        report.clamped_interpolations += sw["clamped"]
        report.stability_margin = max(report.stability_margin, sw["stability_margin"])
        if u_prev is not None:
            diff = u - u_prev
            sup = float(np.abs(diff).max())
            report.sup_changes.append(sup)
            dmax = float(diff.max())
            report.monotonicity_max = max(report.monotonicity_max, dmax)
            report.monotonicity_violations += int(
                np.count_nonzero(diff > config.monotonicity_slack))
        new_policy = np.empty_like(policy)
        for k in range(lattice.num_steps + 1):
            new_policy[k], st = _row_argmin(model, lattice, times[k], u[k],
                                            config, warm=policy[k])
            report.kkt_max = max(report.kkt_max, st["kkt_max"])
            report.sign_constrained_nodes += st["sign_constrained"]
            report.centered_fallback_nodes += st["centered_fallback"]
        policy = new_policy
        done = u_prev is not None and report.sup_changes[-1] <= config.outer_tol
        u_prev = u
        if done:
            report.converged = True
            break
    if not report.converged:
        raise NonConvergence(
            f"policy iteration: {config.max_outer} outer iterations without "
            f"sup-change <= {config.outer_tol:g}")
    vf = ValueField(lattice=lattice, values=u_prev, kind=TRANSFORMED)
    pf = PolicyField(lattice=lattice, values=policy)
    (report.bound_violations, report.value_min,
     report.bound_excess_max) = _bound_audit(model, lattice, u_prev)
    (report.residual_interior_max,
     report.residual_interior_median) = _residual_stats(vf, pf, model, lattice)
    report.wall_time = time.perf_counter() - t0
    return vf, pf, report


def direct_solve(model: MarketModel, lattice: Lattice,
                 config: PolicyIterationConfig = None):
    """Single backward sweep with the policy update fused into each time
    step: at every level, alternate the implicit linear solve and the exact
    row argmin until the level's value stops moving. Cross-validates
    policy_iteration_solve without sharing its outer loop."""
    config = config or PolicyIterationConfig()
    if model.n != lattice.n:
        raise ValueError("model and lattice dimensions differ")
    t0 = time.perf_counter()
    nt = lattice.num_steps
    dt = lattice.dt
    times = lattice.times
    N, m = lattice.total_nodes, model.m
    report = SolveReport(method="direct")
    u = np.empty((nt + 1, N))
    u[nt] = 1.0
    policy = np.empty((nt + 1, N, m))
    policy[nt], st = _row_argmin(model, lattice, times[nt], u[nt], config)
    report.kkt_max = st["kkt_max"]
    for k in range(nt - 1, -1, -1):
        da, diag = nonlocal_d_a(u[k + 1], times[k], model, lattice)
        report.clamped_interpolations += diag["clamped"]
        rhs = u[k + 1] + dt * da
        h_k = policy[k + 1].copy()
        u_k = None
        for _ in range(config.max_inner):
            op = _LevelOperator(model, lattice, times[k], h_k)
            lm = _stability_margin(model, dt, op.G)
            report.stability_margin = max(report.stability_margin, lm)
            if lm >= 1.0:
                raise StabilityViolation(
                    f"dt*(theta sup|g| + total intensity) = {lm:.3f} >= 1")
            u_new = op.solve_step(dt, rhs)
            if np.any(u_new <= 0.0):
                raise NonPositiveValue("direct sweep produced a non-positive value")
            h_k, st = _row_argmin(model, lattice, times[k], u_new, config,
                                  warm=h_k)
            report.kkt_max = max(report.kkt_max, st["kkt_max"])
            report.sign_constrained_nodes += st["sign_constrained"]
            report.centered_fallback_nodes += st["centered_fallback"]
            if u_k is not None and float(np.abs(u_new - u_k).max()) <= config.inner_tol:
                u_k = u_new
                break
            u_k = u_new
        else:
            raise NonConvergence(
                f"direct solve: level {k} fixed point not converged in "
                f"{config.max_inner} iterations")
        u[k] = u_k
        policy[k] = h_k
    report.converged = True
    report.outer_iterations = 1
    vf = ValueField(lattice=lattice, values=u, kind=TRANSFORMED)
    pf = PolicyField(lattice=lattice, values=policy)
    (report.bound_violations, report.value_min,
     report.bound_excess_max) = _bound_audit(model, lattice, u)
    (report.residual_interior_max,
     report.residual_interior_median) = _residual_stats(vf, pf, model, lattice)
    report.wall_time = time.perf_counter() - t0
    return vf, pf, report


TO_RISK_SENSITIVE = "to_risk_sensitive"
TO_TRANSFORMED = "to_transformed"


def transform(vf: ValueField, direction, theta):
    """Elementwise scale change Phi = -(1/theta) ln u  /  u = e^{-theta Phi},
    flipping the kind flag."""
    if direction == TO_RISK_SENSITIVE:
        if vf.kind != TRANSFORMED:
            raise ValueError("expected a transformed-scale field")
        if np.any(vf.values <= 0.0):
            raise NonPositiveValue("cannot take logarithm of a non-positive field")
        return ValueField(lattice=vf.lattice,
                          values=-np.log(vf.values) / theta,
                          kind=RISK_SENSITIVE)
    if direction == TO_TRANSFORMED:
        if vf.kind != RISK_SENSITIVE:
            raise ValueError("expected a risk-sensitive-scale field")
        return ValueField(lattice=vf.lattice,
                          values=np.exp(-theta * vf.values),
                          kind=TRANSFORMED)
    raise ValueError(f"unknown direction {direction!r}")


def pide_residual(vf: ValueField, pf: PolicyField, model: MarketModel,
                  lattice: Lattice = None):
    """Discrete residual of the scheme at a given (value, policy) pair:
    (u_{k+1} - u_k)/dt + A[h_k] u_k + d_a[u_{k+1}], one row per time step.
    Converged solver output should sit at linear-solve round-off; analytic
    solutions sampled on the grid show their truncation error."""
    lattice = lattice or vf.lattice
    nt = lattice.num_steps
    dt = lattice.dt
    times = lattice.times
    out = np.empty((nt, lattice.total_nodes))
    for k in range(nt):
        da, _ = nonlocal_d_a(vf.values[k + 1], times[k], model, lattice)
        op = _LevelOperator(model, lattice, times[k], pf.values[k])
        out[k] = (vf.values[k + 1] - vf.values[k]) / dt + op.apply(vf.values[k]) + da
    return out
