"""Closed-form-adjacent references used to cross-check the PDE solver.

For linear-Gaussian no-jump markets (affine drifts, constant loadings,
affine money-market rate, constraints wide enough to stay inactive) the
untransformed value is quadratic in the state,
    Phi(t, x) = 1/2 x'Q(t) x + q(t)'x + k(t),
and substituting the ansatz into the equation reduces it to a terminal-value
Riccati system, integrated here by fixed-step RK4. verify_ansatz then checks
the stored trajectory against the equation itself with an independently
computed infimum, so an error in the derived right-hand sides cannot
self-certify. brute_force_argmin is the dense-grid oracle for the
constrained minimizer (m <= 2).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog, minimize

from . import hamiltonian as ham
from .model import (AssetModel, ConstraintSet, FactorModel, JumpMeasure,
                    MarketModel, affine, affine_saturated, constant)


class OracleError(RuntimeError):
    pass


class BlowUp(OracleError):
    """The Riccati flow left the basin where the solution exists on [0, T]."""


@dataclass(frozen=True)
class LGQSpec:
    """Linear-Gaussian quadratic-value instance: b = b0 + B x, ahat = ahat0
    + A x, a0 = c0 + c1'x, constant Lambda and Sigma, no jumps."""

    theta: float
    T: float
    b0: np.ndarray       # (n,)
    B: np.ndarray        # (n, n)
    Lambda: np.ndarray   # (n, M)
    ahat0: np.ndarray    # (m,)
    A: np.ndarray        # (m, n)
    Sigma: np.ndarray    # (m, M)
    c0: float
    c1: np.ndarray       # (n,)

    def __post_init__(self):
        for name in ("b0", "B", "Lambda", "ahat0", "A", "Sigma", "c1"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        object.__setattr__(self, "B", np.atleast_2d(self.B))
        object.__setattr__(self, "Lambda", np.atleast_2d(self.Lambda))
        object.__setattr__(self, "A", np.atleast_2d(self.A))
        object.__setattr__(self, "Sigma", np.atleast_2d(self.Sigma))
        n, m = self.n, self.m
        if self.B.shape != (n, n) or self.A.shape != (m, n) or self.c1.shape != (n,):
            raise OracleError("inconsistent shapes in linear-Gaussian spec")
        if self.Lambda.shape[1] != self.Sigma.shape[1]:
            raise OracleError("Lambda and Sigma must share the Brownian dimension")
        if self.theta <= 0.0 or self.T <= 0.0:
            raise OracleError("need theta > 0 and T > 0")
        for mat in (self.Lambda @ self.Lambda.T, self.Sigma @ self.Sigma.T):
            if np.linalg.eigvalsh(mat).min() <= 0.0:
                raise OracleError("degenerate diffusion in linear-Gaussian spec")

    @property
    def n(self):
        return self.b0.shape[0]

    @property
    def m(self):
        return self.ahat0.shape[0]

    @property
    def K(self):
        """((theta+1) Sigma Sigma')^{-1}."""
        return np.linalg.inv((self.theta + 1.0) * self.Sigma @ self.Sigma.T)


def _rhs(spec: LGQSpec, Q, q):
    """Time derivatives (dQ/dt, dq/dt, dk/dt) of the quadratic-value
    coefficients, obtained by matching powers of x in the equation."""
    th = spec.theta
    LL = spec.Lambda @ spec.Lambda.T
    SL = spec.Sigma @ spec.Lambda.T          # (m, n)
    K = spec.K
    W = spec.A - th * SL @ Q                 # (m, n)
    w0 = spec.ahat0 - th * SL @ q            # (m,)
    dQ = -(spec.B.T @ Q + Q @ spec.B) + th * Q @ LL @ Q - W.T @ K @ W
    dq = (-Q @ spec.b0 - spec.B.T @ q + th * Q @ LL @ q - spec.c1
          - W.T @ K @ w0)
    dk = (-0.5 * np.trace(LL @ Q) + 0.5 * th * q @ LL @ q - spec.b0 @ q
          - spec.c0 - 0.5 * w0 @ K @ w0)
    return dQ, dq, dk


@dataclass
class RiccatiSolution:
    spec: LGQSpec
    times: np.ndarray     # increasing, times[0] = 0, times[-1] = T
    Q: np.ndarray         # (steps+1, n, n)
    q: np.ndarray         # (steps+1, n)
    k: np.ndarray         # (steps+1,)

    def _coeffs_at(self, t):
        tt = np.clip(t, 0.0, self.spec.T)
        idx = np.searchsorted(self.times, tt)
        idx = np.clip(idx, 1, len(self.times) - 1)
        t0, t1 = self.times[idx - 1], self.times[idx]
        w = (tt - t0) / (t1 - t0)
        Q = (1 - w) * self.Q[idx - 1] + w * self.Q[idx]
        q = (1 - w) * self.q[idx - 1] + w * self.q[idx]
        k = (1 - w) * self.k[idx - 1] + w * self.k[idx]
        return Q, q, k

    def phi(self, t, x):
        """Phi(t, x); x batched over leading axes."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        Q, q, k = self._coeffs_at(float(t))
        return 0.5 * np.einsum("bi,ij,bj->b", x, Q, x) + x @ q + k

    def phi_tilde(self, t, x):
        return np.exp(-self.spec.theta * self.phi(t, x))

    def grad_phi(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        Q, q, _ = self._coeffs_at(float(t))
        return x @ Q.T + q

    def h_star(self, t, x):
        """K (ahat(x) - theta Sigma Lambda' grad Phi)."""
        sp = self.spec
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p = self.grad_phi(t, x)
        ahat = sp.ahat0 + x @ sp.A.T
        SL = sp.Sigma @ sp.Lambda.T
        return (ahat - sp.theta * p @ SL.T) @ sp.K.T

    def to_dict(self):
        return {
            "theta": self.spec.theta, "T": self.spec.T,
            "times": self.times.tolist(), "Q": self.Q.tolist(),
            "q": self.q.tolist(), "k": self.k.tolist(),
        }

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


def riccati_solve(spec: LGQSpec, ode_steps=10_000) -> RiccatiSolution:
    """Integrate the terminal-value system backward from (0, 0, 0) at t = T
    with fixed-step classical RK4."""
    S = int(ode_steps)
    if S < 1:
        raise OracleError("ode_steps must be positive")
    n = spec.n
    dt = spec.T / S
    Qs = np.zeros((S + 1, n, n))
    qs = np.zeros((S + 1, n))
    ks = np.zeros(S + 1)
    cap = 1e8
    Q = np.zeros((n, n))
    q = np.zeros(n)
    k = 0.0
    for i in range(S, 0, -1):
        # step from t_i down to t_{i-1}
        k1 = _rhs(spec, Q, q)
        k2 = _rhs(spec, Q - 0.5 * dt * k1[0], q - 0.5 * dt * k1[1])
        k3 = _rhs(spec, Q - 0.5 * dt * k2[0], q - 0.5 * dt * k2[1])
        k4 = _rhs(spec, Q - dt * k3[0], q - dt * k3[1])
        Q = Q - (dt / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        q = q - (dt / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        k = k - (dt / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        Q = 0.5 * (Q + Q.T)
        if (not np.all(np.isfinite(Q)) or not np.all(np.isfinite(q))
                or not np.isfinite(k) or np.abs(Q).max() > cap
                or np.abs(q).max() > cap or abs(k) > cap):
            raise BlowUp(f"quadratic-value coefficients diverged near t = {dt * (i - 1):.4f}")
        Qs[i - 1], qs[i - 1], ks[i - 1] = Q, q, k
    return RiccatiSolution(spec=spec, times=np.linspace(0.0, spec.T, S + 1),
                           Q=Qs, q=qs, k=ks)


def _independent_inf(spec: LGQSpec, x, p):
    """inf_h of the quadratic 1/2 (theta+1) h'SS'h + (theta Sigma Lambda' p
    - ahat)'h by quasi-Newton iteration, no use of the closed form."""
    th = spec.theta
    SS = spec.Sigma @ spec.Sigma.T
    c = th * spec.Sigma @ spec.Lambda.T @ p - (spec.ahat0 + spec.A @ x)

    def fun(h):
        return 0.5 * (th + 1.0) * h @ SS @ h + c @ h

    def jac(h):
        return (th + 1.0) * SS @ h + c

    best = np.inf
    for start in (np.zeros(spec.m), np.ones(spec.m), -np.ones(spec.m)):
        res = minimize(fun, start, jac=jac, method="BFGS",
                       options={"gtol": 1e-12, "maxiter": 500})
        best = min(best, float(res.fun))
    return best


def verify_ansatz(spec: LGQSpec, sol: RiccatiSolution, probe_points=None,
                  time_samples=25) -> float:
    """Max |residual| of the untransformed equation along the stored
    trajectory: the time derivative is a centered difference of stored
    Phi values and the infimum term is recomputed by numerical optimization,
    so this check fails if the integrated right-hand sides are wrong."""
    if probe_points is None:
        axes = [np.linspace(-2.0, 2.0, 9)] * spec.n
        mesh = np.meshgrid(*axes, indexing="ij")
        probe_points = np.stack([m.ravel() for m in mesh], axis=-1)
    probe_points = np.atleast_2d(np.asarray(probe_points, dtype=float))
    S = len(sol.times) - 1
    idxs = np.unique(np.linspace(1, S - 1, time_samples).astype(int))
    LL = spec.Lambda @ spec.Lambda.T
    dt = spec.T / S
    worst = 0.0
    for i in idxs:
        Qm, qm, km = sol.Q[i - 1], sol.q[i - 1], sol.k[i - 1]
        Qp, qp, kp = sol.Q[i + 1], sol.q[i + 1], sol.k[i + 1]
        Qc, qc = sol.Q[i], sol.q[i]
        for x in probe_points:
            phi_m = 0.5 * x @ Qm @ x + qm @ x + km
            phi_p = 0.5 * x @ Qp @ x + qp @ x + kp
            phi_t = (phi_p - phi_m) / (2.0 * dt)
            p = Qc @ x + qc
            b = spec.b0 + spec.B @ x
            a0 = spec.c0 + spec.c1 @ x
            resid = (phi_t + 0.5 * np.trace(LL @ Qc)
                     - 0.5 * spec.theta * p @ LL @ p + b @ p + a0
                     - _independent_inf(spec, x, p))
            worst = max(worst, abs(float(resid)))
    return worst


def brute_force_argmin(inputs: ham.HamiltonianInputs, model: MarketModel,
                       grid_density=1000):
    """Dense-grid minimizer of h -> f_a'p + theta g r over the feasible
    region (m <= 2): per-axis bounds by linear programming with a small
    inset on the jump margins, then a full product grid filtered for
    feasibility, evaluating the raw objective (not the ell reduction)."""
    m = model.m
    if m > 2:
        raise OracleError("dense grid oracle supports m <= 2 only")
    if not inputs.r > 0.0:
        raise OracleError("transformed value r must be positive")
    U, v = model.constraints.Upsilon, model.constraints.upsilon
    gammas = [a.gamma for a in model.nu.asset_atoms()]
    A_ub = [U.T] if U.size else []
    b_ub = [v] if U.size else []
    inset = 1e-6
    for gam in gammas:
        A_ub.append(-np.asarray(gam, dtype=float)[None, :])
        b_ub.append(np.array([1.0 - inset]))
    A_ub = np.vstack(A_ub) if A_ub else None
    b_ub = np.concatenate(b_ub) if b_ub else None
    lo = np.empty(m)
    hi = np.empty(m)
    for ax in range(m):
        e = np.zeros(m)
        e[ax] = 1.0
        for sgn, dest in ((1.0, lo), (-1.0, hi)):
            res = linprog(sgn * e, A_ub=A_ub, b_ub=b_ub,
                          bounds=[(None, None)] * m, method="highs")
            if not res.success:
                raise OracleError("feasible region is empty or unbounded "
                                  "along an axis; cannot grid it")
            dest[ax] = sgn * res.fun
    axes = [np.linspace(lo[ax], hi[ax], grid_density) for ax in range(m)]
    mesh = np.meshgrid(*axes, indexing="ij")
    H = np.stack([g.ravel() for g in mesh], axis=-1)
    feas = np.ones(H.shape[0], dtype=bool)
    if U.size:
        feas &= np.all(H @ U <= v + 1e-12, axis=1)
    for gam in gammas:
        feas &= (H @ np.asarray(gam, dtype=float)) > -1.0 + inset / 2
    H = H[feas]
    if H.size == 0:
        raise OracleError("no feasible grid points")
    best_val = np.inf
    best_h = None
    theta = model.theta
    x = inputs.x
    chunk = 200_000
    for s in range(0, H.shape[0], chunk):
        Hc = H[s:s + chunk]
        xb = np.broadcast_to(x, (Hc.shape[0], x.shape[0]))
        fa = ham.f_a(inputs.t, xb, Hc, model)
        vals = fa @ inputs.p + theta * ham.g(inputs.t, xb, Hc, model) * inputs.r
        j = int(np.argmin(vals))
        if vals[j] < best_val:
            best_val = float(vals[j])
            best_h = Hc[j].copy()
    return best_h


def lgq_to_market(spec: LGQSpec, box, constraint_cap=30.0,
                  inflate=3.0) -> MarketModel:
    """Realize a linear-Gaussian instance as a market model whose affine
    coefficients saturate only outside an inflated copy of the given box, so
    the two agree exactly on the computational domain while the model keeps
    globally bounded coefficients."""
    box = np.atleast_2d(np.asarray(box, dtype=float))
    center = 0.5 * (box[:, 0] + box[:, 1])
    half = 0.5 * (box[:, 1] - box[:, 0]) * inflate

    def saturated(const, slope):
        const = np.asarray(const, dtype=float)
        slope = np.asarray(slope, dtype=float)
        mid = const + slope @ center
        rad = np.abs(slope) @ half
        pad = 1.0 + rad
        return affine_saturated(const, slope, lo=mid - rad - pad,
                                hi=mid + rad + pad)

    n, m = spec.n, spec.m
    factor = FactorModel(n=n, b=saturated(spec.b0, spec.B),
                         Lambda=constant(spec.Lambda))
    a0_fn = saturated(np.float64(spec.c0), spec.c1)
    a_fn = saturated(spec.ahat0 + spec.c0,
                     spec.A + np.ones((m, 1)) @ spec.c1[None, :])
    assets = AssetModel(m=m, a0=a0_fn, a=a_fn, Sigma=constant(spec.Sigma))
    Upsilon = np.hstack([np.eye(m), -np.eye(m)])
    upsilon = np.full(2 * m, float(constraint_cap))
    return MarketModel(factor=factor, assets=assets, nu=JumpMeasure(atoms=()),
                       constraints=ConstraintSet(Upsilon=Upsilon, upsilon=upsilon),
                       theta=spec.theta, T=spec.T)
